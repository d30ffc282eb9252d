//! A small 1-D convolutional network trained in f64.
//!
//! Shape: `[conv -> activation -> max-pool] * n -> flatten -> [dense ->
//! activation -> dropout] * m -> dense -> softmax`, trained with Adam on mean
//! cross-entropy. Inputs are byte values divided by 255.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fraction_correct, Hyperparams, ModelError, ParamValue};
use crate::features::ViewDataset;
use crate::rng::derive_seed;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    /// No nonlinearity; used to check gradients against closed forms.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "softplus" => Activation::Softplus,
            "identity" => Activation::Identity,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnHyperparams {
    pub conv: Vec<ConvSpec>,
    pub fc: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    /// Max-pool width after every conv layer; 1 disables pooling.
    pub pool: usize,
    pub learning_rate: f64,
}

impl Default for CnnHyperparams {
    fn default() -> Self {
        CnnHyperparams {
            conv: vec![ConvSpec {
                filters: 8,
                kernel: 8,
                stride: 4,
            }],
            fc: vec![32],
            activation: Activation::Relu,
            dropout: 0.1,
            pool: 2,
            learning_rate: 0.003,
        }
    }
}

fn get_int(h: &Hyperparams, key: &str) -> Result<usize, ModelError> {
    match h.get(key) {
        Some(ParamValue::Int(v)) if *v >= 0 => Ok(*v as usize),
        Some(ParamValue::Float(v)) if v.fract() == 0.0 && *v >= 0.0 => Ok(*v as usize),
        Some(other) => Err(ModelError::InvalidHyperparams(format!(
            "{key} = {other:?} is not a count"
        ))),
        None => Err(ModelError::InvalidHyperparams(format!("missing {key}"))),
    }
}

fn get_float(h: &Hyperparams, key: &str) -> Result<f64, ModelError> {
    match h.get(key) {
        Some(ParamValue::Float(v)) => Ok(*v),
        Some(ParamValue::Int(v)) => Ok(*v as f64),
        Some(other) => Err(ModelError::InvalidHyperparams(format!(
            "{key} = {other:?} is not a number"
        ))),
        None => Err(ModelError::InvalidHyperparams(format!("missing {key}"))),
    }
}

impl CnnHyperparams {
    /// Reads a search-space draw. Per-layer keys are `filters_i`, `kernel_i`
    /// and `fc_neurons_i`; draws for layers beyond the sampled depth are ignored.
    pub fn from_params(h: &Hyperparams) -> Result<Self, ModelError> {
        let stride = get_int(h, "stride")?;
        let conv = (0..get_int(h, "conv_layers")?)
            .map(|i| {
                Ok(ConvSpec {
                    filters: get_int(h, &format!("filters_{i}"))?,
                    kernel: get_int(h, &format!("kernel_{i}"))?,
                    stride,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let fc = (0..get_int(h, "fc_layers")?)
            .map(|i| get_int(h, &format!("fc_neurons_{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let activation = match h.get("activation") {
            Some(ParamValue::Text(s)) => Activation::from_name(s)
                .ok_or_else(|| ModelError::InvalidHyperparams(format!("unknown activation {s}")))?,
            _ => return Err(ModelError::InvalidHyperparams("missing activation".into())),
        };
        let hp = CnnHyperparams {
            conv,
            fc,
            activation,
            dropout: get_float(h, "dropout")?,
            pool: if h.contains_key("pool") { get_int(h, "pool")? } else { 2 },
            learning_rate: get_float(h, "learning_rate")?,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn to_params(&self) -> Hyperparams {
        let mut h = Hyperparams::new();
        h.insert("conv_layers".into(), ParamValue::Int(self.conv.len() as i64));
        for (i, c) in self.conv.iter().enumerate() {
            h.insert(format!("filters_{i}"), ParamValue::Int(c.filters as i64));
            h.insert(format!("kernel_{i}"), ParamValue::Int(c.kernel as i64));
        }
        if let Some(c) = self.conv.first() {
            h.insert("stride".into(), ParamValue::Int(c.stride as i64));
        }
        h.insert("fc_layers".into(), ParamValue::Int(self.fc.len() as i64));
        for (i, n) in self.fc.iter().enumerate() {
            h.insert(format!("fc_neurons_{i}"), ParamValue::Int(*n as i64));
        }
        h.insert("activation".into(), ParamValue::Text(self.activation.name().into()));
        h.insert("dropout".into(), ParamValue::Float(self.dropout));
        h.insert("pool".into(), ParamValue::Int(self.pool as i64));
        h.insert("learning_rate".into(), ParamValue::Float(self.learning_rate));
        h
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidHyperparams(m.into()));
        if self
            .conv
            .iter()
            .any(|c| c.filters == 0 || c.kernel == 0 || c.stride == 0)
        {
            return bad("conv filters, kernel and stride must be positive");
        }
        if self.fc.contains(&0) {
            return bad("dense layers need at least one neuron");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.pool == 0 {
            return bad("pool width must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        in_len: usize,
        conv_len: usize,
        pool: usize,
        out_len: usize,
        w: usize,
        b: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
        hidden: bool,
        w: usize,
        b: usize,
    },
}

impl Layer {
    fn out_size(&self) -> usize {
        match *self {
            Layer::Conv { out_ch, out_len, .. } => out_ch * out_len,
            Layer::Dense { out_dim, .. } => out_dim,
        }
    }

    fn pre_size(&self) -> usize {
        match *self {
            Layer::Conv { out_ch, conv_len, .. } => out_ch * conv_len,
            Layer::Dense { out_dim, .. } => out_dim,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            Layer::Conv {
                in_ch, out_ch, kernel, ..
            } => (in_ch * kernel, out_ch * kernel),
            Layer::Dense { in_dim, out_dim, .. } => (in_dim, out_dim),
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        match *self {
            Layer::Conv {
                in_ch,
                out_ch,
                kernel,
                w,
                b,
                ..
            } => (w, b, in_ch * out_ch * kernel),
            Layer::Dense {
                in_dim, out_dim, w, b, ..
            } => (w, b, in_dim * out_dim),
        }
    }
}

fn build_layers(h: &CnnHyperparams, input_len: usize, n_classes: usize) -> Result<(Vec<Layer>, usize), ModelError> {
    let mut layers = Vec::new();
    let mut offset = 0;
    let (mut ch, mut len) = (1usize, input_len);
    for (i, c) in h.conv.iter().enumerate() {
        if len < c.kernel {
            return Err(ModelError::ShapeError(format!(
                "conv layer {i}: input length {len} is shorter than kernel {}",
                c.kernel
            )));
        }
        let conv_len = (len - c.kernel) / c.stride + 1;
        let out_len = conv_len / h.pool;
        if out_len == 0 {
            return Err(ModelError::ShapeError(format!(
                "conv layer {i}: length {conv_len} vanishes under pool width {}",
                h.pool
            )));
        }
        let w = offset;
        offset += c.filters * ch * c.kernel;
        let b = offset;
        offset += c.filters;
        layers.push(Layer::Conv {
            in_ch: ch,
            out_ch: c.filters,
            kernel: c.kernel,
            stride: c.stride,
            in_len: len,
            conv_len,
            pool: h.pool,
            out_len,
            w,
            b,
        });
        ch = c.filters;
        len = out_len;
    }
    let mut dim = ch * len;
    let widths =
        h.fc.iter()
            .map(|&n| (n, true))
            .chain(std::iter::once((n_classes, false)));
    for (out_dim, hidden) in widths {
        let w = offset;
        offset += dim * out_dim;
        let b = offset;
        offset += out_dim;
        layers.push(Layer::Dense {
            in_dim: dim,
            out_dim,
            hidden,
            w,
            b,
        });
        dim = out_dim;
    }
    Ok((layers, offset))
}

/// Per-sample activations kept for the backward pass.
struct Scratch {
    /// `io[l]` is the input of layer `l`; the last entry holds the logits.
    io: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    argmax: Vec<Vec<u32>>,
    mask: Vec<Vec<f64>>,
    probs: Vec<f64>,
    grad_io: Vec<Vec<f64>>,
    grad_pre: Vec<f64>,
}

impl Scratch {
    fn new(layers: &[Layer], input_len: usize) -> Self {
        let mut io = vec![vec![0.0; input_len]];
        io.extend(layers.iter().map(|l| vec![0.0; l.out_size()]));
        Scratch {
            grad_io: io.clone(),
            io,
            pre: layers.iter().map(|l| vec![0.0; l.pre_size()]).collect(),
            argmax: layers.iter().map(|l| vec![0; l.out_size()]).collect(),
            mask: layers.iter().map(|_| Vec::new()).collect(),
            probs: Vec::new(),
            grad_pre: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub hyperparams: CnnHyperparams,
    pub input_len: usize,
    pub n_classes: usize,
    layers: Vec<Layer>,
    params: Vec<f64>,
    adam: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    /// `conv` or `dense`.
    pub kind: String,
    /// Conv: `[out_ch, in_ch, kernel]`; dense: `[out_dim, in_dim]`. Weights are row-major in this shape.
    pub shape: Vec<usize>,
    pub stride: Option<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnDocument {
    pub input_len: usize,
    pub n_classes: usize,
    pub hyperparams: CnnHyperparams,
    pub layers: Vec<LayerDocument>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

impl CnnModel {
    /// Fresh network with Glorot-uniform weights and zero biases.
    pub fn new(h: &CnnHyperparams, input_len: usize, n_classes: usize, seed: u64) -> Result<Self, ModelError> {
        h.validate()?;
        if n_classes < 2 {
            return Err(ModelError::DegenerateData);
        }
        let (layers, n_params) = build_layers(h, input_len, n_classes)?;
        let mut params = vec![0.0; n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        for l in &layers {
            let (fan_in, fan_out) = l.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _, n) = l.offsets();
            for p in &mut params[w..w + n] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(CnnModel {
            hyperparams: h.clone(),
            input_len,
            n_classes,
            layers,
            adam: AdamState {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
            params,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64], s: &mut Scratch, dropout: Option<&mut ChaCha8Rng>) {
        let act = self.hyperparams.activation;
        let p = &self.params;
        s.io[0].copy_from_slice(x);
        let mut dropout = dropout;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = s.io.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            let pre = &mut s.pre[l];
            match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    in_len,
                    conv_len,
                    pool,
                    out_len,
                    w,
                    b,
                } => {
                    for oc in 0..out_ch {
                        let z = &mut pre[oc * conv_len..(oc + 1) * conv_len];
                        z.fill(p[b + oc]);
                        for ic in 0..in_ch {
                            let wk = &p[w + (oc * in_ch + ic) * kernel..][..kernel];
                            let xin = &input[ic * in_len..(ic + 1) * in_len];
                            for (t, zt) in z.iter_mut().enumerate() {
                                *zt += dot(wk, &xin[t * stride..t * stride + kernel]);
                            }
                        }
                        let arg = &mut s.argmax[l][oc * out_len..(oc + 1) * out_len];
                        for u in 0..out_len {
                            let mut best = u * pool;
                            for v in u * pool + 1..(u + 1) * pool {
                                if z[v] > z[best] {
                                    best = v;
                                }
                            }
                            arg[u] = (oc * conv_len + best) as u32;
                            out[oc * out_len + u] = act.apply(z[best]);
                        }
                    }
                }
                Layer::Dense {
                    in_dim,
                    out_dim,
                    hidden,
                    w,
                    b,
                } => {
                    for o in 0..out_dim {
                        pre[o] = p[b + o] + dot(&p[w + o * in_dim..w + (o + 1) * in_dim], input);
                    }
                    if hidden {
                        for o in 0..out_dim {
                            out[o] = act.apply(pre[o]);
                        }
                        let mask = &mut s.mask[l];
                        mask.clear();
                        let rate = self.hyperparams.dropout;
                        if let Some(rng) = dropout.as_deref_mut().filter(|_| rate > 0.0) {
                            let keep = 1.0 / (1.0 - rate);
                            mask.extend((0..out_dim).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }));
                            out.iter_mut().zip(mask.iter()).for_each(|(o, m)| *o *= m);
                        }
                    } else {
                        out.copy_from_slice(pre);
                    }
                }
            }
        }
        let logits = s.io.last().expect("at least the output layer");
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        s.probs.clear();
        s.probs.extend(logits.iter().map(|z| (z - max).exp()));
        let sum: f64 = s.probs.iter().sum();
        s.probs.iter_mut().for_each(|v| *v /= sum);
    }

    fn sample_loss(s: &Scratch, label: usize) -> f64 {
        let logits = s.io.last().expect("output layer");
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    }

    /// Accumulates `scale * dLoss/dParams` for the sample held in `s`.
    fn backward(&self, s: &mut Scratch, label: usize, scale: f64, grad: &mut [f64]) {
        let act = self.hyperparams.activation;
        let p = &self.params;
        let n = self.layers.len();
        {
            let g = &mut s.grad_io[n];
            for (k, gk) in g.iter_mut().enumerate() {
                *gk = scale * (s.probs[k] - if k == label { 1.0 } else { 0.0 });
            }
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (head, tail) = s.grad_io.split_at_mut(l + 1);
            let g_out = &tail[0];
            let g_in = &mut head[l];
            let input = &s.io[l];
            let pre = &s.pre[l];
            match *layer {
                Layer::Dense {
                    in_dim,
                    out_dim,
                    hidden,
                    w,
                    b,
                } => {
                    let dz = &mut s.grad_pre;
                    dz.clear();
                    dz.extend_from_slice(g_out);
                    if hidden {
                        let mask = &s.mask[l];
                        for o in 0..out_dim {
                            let m = if mask.is_empty() { 1.0 } else { mask[o] };
                            dz[o] *= m * act.derivative(pre[o]);
                        }
                    }
                    if l > 0 {
                        g_in.fill(0.0);
                    }
                    for o in 0..out_dim {
                        let d = dz[o];
                        if d == 0.0 {
                            continue;
                        }
                        grad[b + o] += d;
                        axpy(d, input, &mut grad[w + o * in_dim..w + (o + 1) * in_dim]);
                        if l > 0 {
                            axpy(d, &p[w + o * in_dim..w + (o + 1) * in_dim], g_in);
                        }
                    }
                }
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    in_len,
                    conv_len,
                    out_len,
                    w,
                    b,
                    ..
                } => {
                    if l > 0 {
                        g_in.fill(0.0);
                    }
                    for oc in 0..out_ch {
                        for u in 0..out_len {
                            let idx = oc * out_len + u;
                            let zi = s.argmax[l][idx] as usize;
                            let d = g_out[idx] * act.derivative(pre[zi]);
                            if d == 0.0 {
                                continue;
                            }
                            let t = zi - oc * conv_len;
                            grad[b + oc] += d;
                            for ic in 0..in_ch {
                                let wo = w + (oc * in_ch + ic) * kernel;
                                let xs = ic * in_len + t * stride;
                                axpy(d, &input[xs..xs + kernel], &mut grad[wo..wo + kernel]);
                                if l > 0 {
                                    axpy(d, &p[wo..wo + kernel], &mut g_in[xs..xs + kernel]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Mean cross-entropy over `batch` and its gradient, with dropout off.
    pub fn loss_and_gradient(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<f64>), ModelError> {
        let mut grad = vec![0.0; self.params.len()];
        let mut s = Scratch::new(&self.layers, self.input_len);
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for &(x, y) in batch {
            self.check_input(x.len())?;
            self.forward(x, &mut s, None);
            loss += Self::sample_loss(&s, y) * scale;
            self.backward(&mut s, y, scale, &mut grad);
        }
        Ok((loss, grad))
    }

    fn mean_loss(&self, batch: &[(&[f64], usize)]) -> f64 {
        let mut s = Scratch::new(&self.layers, self.input_len);
        batch
            .iter()
            .map(|&(x, y)| {
                self.forward(x, &mut s, None);
                Self::sample_loss(&s, y)
            })
            .sum::<f64>()
            / batch.len().max(1) as f64
    }

    fn check_input(&self, len: usize) -> Result<(), ModelError> {
        if len != self.input_len {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_len,
                actual: len,
            });
        }
        Ok(())
    }

    fn adam_step(&mut self, grad: &[f64]) {
        let a = &mut self.adam;
        a.t += 1;
        let lr = self.hyperparams.learning_rate;
        let c1 = 1.0 - ADAM_BETA1.powi(a.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(a.t as i32);
        for (((p, m), v), &g) in self.params.iter_mut().zip(&mut a.m).zip(&mut a.v).zip(grad) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }

    /// Softmax output for already-scaled input.
    pub fn predict_proba_scaled(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x.len())?;
        let mut s = Scratch::new(&self.layers, self.input_len);
        self.forward(x, &mut s, None);
        Ok(s.probs)
    }

    pub fn predict_proba(&self, sample: &[u8]) -> Result<Vec<f64>, ModelError> {
        self.predict_proba_scaled(&scale_bytes(sample))
    }

    pub fn predict(&self, sample: &[u8]) -> Result<usize, ModelError> {
        Ok(argmax(&self.predict_proba(sample)?))
    }

    pub fn accuracy(&self, view: &ViewDataset) -> Result<f64, ModelError> {
        self.check_input(view.dim())?;
        let mut s = Scratch::new(&self.layers, self.input_len);
        let mut x = vec![0.0; self.input_len];
        let preds: Vec<usize> = view
            .samples
            .iter()
            .map(|smp| {
                scale_into(&smp.features, &mut x);
                self.forward(&x, &mut s, None);
                argmax(&s.probs)
            })
            .collect();
        Ok(fraction_correct(preds.into_iter(), &view.labels()))
    }

    pub fn to_document(&self) -> CnnDocument {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b, n) = l.offsets();
                let (kind, shape, stride, nb) = match *l {
                    Layer::Conv {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        ..
                    } => ("conv", vec![out_ch, in_ch, kernel], Some(stride), out_ch),
                    Layer::Dense { in_dim, out_dim, .. } => ("dense", vec![out_dim, in_dim], None, out_dim),
                };
                LayerDocument {
                    kind: kind.into(),
                    shape,
                    stride,
                    weights: self.params[w..w + n].to_vec(),
                    bias: self.params[b..b + nb].to_vec(),
                }
            })
            .collect();
        CnnDocument {
            input_len: self.input_len,
            n_classes: self.n_classes,
            hyperparams: self.hyperparams.clone(),
            layers,
        }
    }

    /// Rebuilds a model for prediction; optimizer moments start from zero.
    pub fn from_document(doc: &CnnDocument) -> Result<Self, ModelError> {
        let mut m = CnnModel::new(&doc.hyperparams, doc.input_len, doc.n_classes, 0)?;
        if doc.layers.len() != m.layers.len() {
            return Err(ModelError::ShapeError(
                "layer count differs from hyperparameters".into(),
            ));
        }
        for (l, d) in m.layers.clone().iter().zip(&doc.layers) {
            let (w, b, n) = l.offsets();
            let nb = match *l {
                Layer::Conv { out_ch, .. } => out_ch,
                Layer::Dense { out_dim, .. } => out_dim,
            };
            if d.weights.len() != n || d.bias.len() != nb {
                return Err(ModelError::ShapeError(format!(
                    "layer {} has the wrong weight count",
                    d.kind
                )));
            }
            m.params[w..w + n].copy_from_slice(&d.weights);
            m.params[b..b + nb].copy_from_slice(&d.bias);
        }
        Ok(m)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn scale_into(bytes: &[u8], out: &mut [f64]) {
    out.iter_mut().zip(bytes).for_each(|(o, &b)| *o = f64::from(b) / 255.0);
}

pub(crate) fn scale_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Minibatch Adam on mean cross-entropy. Shuffling, dropout and weight
/// initialization all derive from `opts.seed`.
pub fn train_cnn(
    train: &ViewDataset,
    h: &CnnHyperparams,
    opts: &TrainOptions,
) -> Result<(CnnModel, TrainingTrace), ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyData);
    }
    if train.classes_present() < 2 {
        return Err(ModelError::DegenerateData);
    }
    if opts.batch_size == 0 {
        return Err(ModelError::InvalidHyperparams("batch size must be positive".into()));
    }
    let mut model = CnnModel::new(h, train.dim(), train.n_classes(), opts.seed)?;
    let d = train.dim();
    let mut xs = vec![0.0; train.len() * d];
    for (i, s) in train.samples.iter().enumerate() {
        scale_into(&s.features, &mut xs[i * d..(i + 1) * d]);
    }
    let labels = train.labels();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0x5f1e]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0xd20f]));
    let mut s = Scratch::new(&model.layers, d);
    let mut grad = vec![0.0; model.params.len()];
    let mut trace = TrainingTrace::default();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(opts.batch_size).enumerate() {
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                model.forward(&xs[i * d..(i + 1) * d], &mut s, Some(&mut dropout_rng));
                batch_loss += CnnModel::sample_loss(&s, labels[i]);
                model.backward(&mut s, labels[i], scale, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss: batch_loss,
                });
            }
            model.adam_step(&grad);
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                });
            }
            epoch_loss += batch_loss;
        }
        trace.epoch_loss.push(epoch_loss / train.len() as f64);
    }
    Ok((model, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares backprop against central differences on 200 randomly chosen
/// parameters (all of them when the net is smaller). Dropout is forced off. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn cnn_gradient_check(
    h: &CnnHyperparams,
    n_classes: usize,
    batch: &[(Vec<f64>, usize)],
    seed: u64,
) -> Result<GradientCheck, ModelError> {
    let input_len = batch.first().ok_or(ModelError::EmptyData)?.0.len();
    let h = CnnHyperparams {
        dropout: 0.0,
        ..h.clone()
    };
    let mut model = CnnModel::new(&h, input_len, n_classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9c4e]));
    // Zero biases behind an all-zero ReLU window put the next pre-activation
    // exactly on the kink; jitter them so the check runs at a smooth point.
    for l in &model.layers {
        let (_, b, _) = l.offsets();
        let nb = match *l {
            Layer::Conv { out_ch, .. } => out_ch,
            Layer::Dense { out_dim, .. } => out_dim,
        };
        for p in &mut model.params[b..b + nb] {
            *p = rng.random_range(-0.1..0.1);
        }
    }
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (_, analytic) = model.loss_and_gradient(&refs)?;
    let n_params = model.params.len();
    let mut picks = if n_params <= 200 {
        (0..n_params).collect()
    } else {
        index::sample(&mut rng, n_params, 200).into_vec()
    };
    picks.sort_unstable();
    let mut worst: f64 = 0.0;
    for &i in &picks {
        let orig = model.params[i];
        model.params[i] = orig + FD_STEP;
        let plus = model.mean_loss(&refs);
        model.params[i] = orig - FD_STEP;
        let minus = model.mean_loss(&refs);
        model.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if !rel.is_finite() {
            return Ok(GradientCheck {
                max_rel_error: f64::INFINITY,
                checked: picks.len(),
            });
        }
        worst = worst.max(rel);
    }
    Ok(GradientCheck {
        max_rel_error: worst,
        checked: picks.len(),
    })
}
