pub mod cart_oracle;
