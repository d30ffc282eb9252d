//! Seeded random search over named hyperparameter dimensions.
//!
//! Draws are taken sequentially from one generator, so the trace depends only
//! on the seed and the space; trials are then evaluated in parallel.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Text(String),
}

pub type Hyperparams = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Choice(Vec<ParamValue>),
    Uniform { low: f64, high: f64 },
}

impl Dimension {
    fn draw(&self, rng: &mut ChaCha8Rng) -> ParamValue {
        match self {
            Dimension::Choice(options) => options[rng.random_range(0..options.len())].clone(),
            Dimension::Uniform { low, high } => ParamValue::Float(low + (high - low) * rng.random::<f64>()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperparamSpace {
    pub dims: BTreeMap<String, Dimension>,
}

impl HyperparamSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn choice(mut self, name: &str, options: Vec<ParamValue>) -> Self {
        self.dims.insert(name.into(), Dimension::Choice(options));
        self
    }

    pub fn ints(self, name: &str, options: &[i64]) -> Self {
        self.choice(name, options.iter().map(|&v| ParamValue::Int(v)).collect())
    }

    pub fn floats(self, name: &str, options: &[f64]) -> Self {
        self.choice(name, options.iter().map(|&v| ParamValue::Float(v)).collect())
    }

    pub fn texts(self, name: &str, options: &[&str]) -> Self {
        self.choice(name, options.iter().map(|&v| ParamValue::Text(v.into())).collect())
    }

    pub fn uniform(mut self, name: &str, low: f64, high: f64) -> Self {
        self.dims.insert(name.into(), Dimension::Uniform { low, high });
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dims.is_empty() {
            return Err(ModelError::InvalidHyperparams("search space has no dimensions".into()));
        }
        for (name, d) in &self.dims {
            match d {
                Dimension::Choice(o) if o.is_empty() => {
                    return Err(ModelError::InvalidHyperparams(format!("{name}: empty choice list")))
                }
                Dimension::Uniform { low, high } if !(low <= high && low.is_finite() && high.is_finite()) => {
                    return Err(ModelError::InvalidHyperparams(format!("{name}: bad interval")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// One draw per dimension, in key order.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Hyperparams {
        self.dims.iter().map(|(k, d)| (k.clone(), d.draw(rng))).collect()
    }
}

/// The full-size convolutional search space; Adam is the only optimizer.
pub fn wide_cnn_space() -> HyperparamSpace {
    let mut s = HyperparamSpace::new()
        .floats("learning_rate", &[0.001, 0.0001])
        .ints("stride", &[1, 4, 8])
        .ints("conv_layers", &[1, 2, 3])
        .ints("fc_layers", &[1, 2, 3])
        .texts("activation", &["relu", "tanh", "softplus"])
        .uniform("dropout", 0.0, 0.5)
        .ints("pool", &[2]);
    for i in 0..3 {
        s = s
            .ints(&format!("filters_{i}"), &[64, 128, 256])
            .ints(&format!("kernel_{i}"), &[8, 32, 128])
            .ints(&format!("fc_neurons_{i}"), &[128, 256, 512]);
    }
    s
}

/// A scaled-down space that trains in seconds on one CPU core.
pub fn desk_cnn_space() -> HyperparamSpace {
    let mut s = HyperparamSpace::new()
        .floats("learning_rate", &[0.001, 0.003])
        .ints("stride", &[4, 8])
        .ints("conv_layers", &[1, 2])
        .ints("fc_layers", &[1, 2])
        .texts("activation", &["relu", "tanh", "softplus"])
        .uniform("dropout", 0.0, 0.5)
        .ints("pool", &[2]);
    for i in 0..2 {
        s = s
            .ints(&format!("filters_{i}"), &[4, 8])
            .ints(&format!("kernel_{i}"), &[8, 16])
            .ints(&format!("fc_neurons_{i}"), &[16, 32]);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: Hyperparams,
    /// `None` when the trial failed (for example an impossible shape).
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T> {
    pub best_index: usize,
    pub best_params: Hyperparams,
    pub best_score: f64,
    pub best: T,
    pub trace: Vec<Trial>,
}

/// Evaluates `budget` independent draws and returns the highest-scoring one
/// together with whatever the objective produced for it. Ties go to the
/// earliest trial; NaN scores never win. Fails only if every trial fails.
pub fn random_search<T, F>(
    space: &HyperparamSpace,
    budget: usize,
    seed: u64,
    objective: F,
) -> Result<SearchOutcome<T>, ModelError>
where
    T: Send,
    F: Fn(usize, &Hyperparams) -> Result<(f64, T), ModelError> + Sync,
{
    if budget == 0 {
        return Err(ModelError::InvalidHyperparams(
            "search budget must be at least 1".into(),
        ));
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Hyperparams> = (0..budget).map(|_| space.sample(&mut rng)).collect();
    let results: Vec<Result<(f64, T), ModelError>> =
        draws.par_iter().enumerate().map(|(i, h)| objective(i, h)).collect();

    let mut trace = Vec::with_capacity(budget);
    let mut best: Option<(usize, f64, T)> = None;
    let mut first_err = None;
    for (i, (params, r)) in draws.into_iter().zip(results).enumerate() {
        match r {
            Ok((score, artifact)) => {
                trace.push(Trial {
                    params,
                    score: Some(score),
                });
                let key = if score.is_nan() { f64::NEG_INFINITY } else { score };
                if best.as_ref().is_none_or(|(_, b, _)| key > *b) {
                    best = Some((i, key, artifact));
                }
            }
            Err(e) => {
                tracing::debug!(trial = i, error = %e, "search trial failed");
                trace.push(Trial { params, score: None });
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some((best_index, best_score, best)) => Ok(SearchOutcome {
            best_params: trace[best_index].params.clone(),
            best_index,
            best_score,
            best,
            trace,
        }),
        None => Err(first_err.expect("budget >= 1 so some trial ran")),
    }
}
