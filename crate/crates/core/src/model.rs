//! CNN-GRU classifier over `C x C x T` feature tensors, its CNN-only
//! ablation, and full-batch training.
//!
//! Per band `t` the slice `[C, C]` passes through
//!
//! ```text
//! conv1: K x K, `conv1_filters` maps, ReLU      -> [F, C-K+1, C-K+1]
//! conv2: (C-K+1) x (C-K+1), one map, ReLU       -> [1, 1, 1]
//! ```
//!
//! with the same convolution weights for every band. The `T` scalars form a
//! sequence that goes through dropout, a GRU with scalar input, and a dense
//! readout of the last hidden state. The CNN-only variant takes a single band
//! and feeds its scalar straight to the readout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureTensor;
use crate::nn::{adam_step, conv2d_forward, relu, AdamState, Conv2dLayer, Graph, NnError, ParamSet, Tensor, Var};
use crate::signal::ClassLabel;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training set has no {0:?} examples")]
    MissingClass(ClassLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    CnnGru,
    CnnOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnGruConfig {
    pub channels: usize,
    pub bands: usize,
    pub kernel: usize,
    pub conv1_filters: usize,
    pub gru_hidden: usize,
    pub n_classes: usize,
    pub p_drop: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Use the GRU hidden state directly as logits (`gru_hidden == n_classes`).
    pub strict: bool,
}

impl Default for CnnGruConfig {
    fn default() -> Self {
        CnnGruConfig {
            channels: 22,
            bands: 16,
            kernel: 3,
            conv1_filters: 128,
            gru_hidden: 16,
            n_classes: 2,
            p_drop: 0.8,
            lr: 1e-4,
            epochs: 500,
            seed: 0,
            strict: false,
        }
    }
}

impl CnnGruConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.kernel == 0 {
            return bad("kernel must be at least 1".into());
        }
        if self.kernel >= self.channels {
            return bad(format!(
                "kernel exceeds channels (K={} with C={})",
                self.kernel, self.channels
            ));
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.bands == 0 {
            return bad("need at least one band".into());
        }
        if self.conv1_filters == 0 || self.gru_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.strict && self.gru_hidden != self.n_classes {
            return bad(format!(
                "strict mode needs gru_hidden == n_classes ({} != {})",
                self.gru_hidden, self.n_classes
            ));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop must lie in [0, 1), got {}", self.p_drop));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Spatial size after the first convolution, `C - K + 1`.
    pub fn conv1_size(&self) -> usize {
        self.channels - self.kernel + 1
    }
}

/// Intermediate shapes observed during one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub conv1_out: Vec<usize>,
    pub conv2_out: Vec<usize>,
    pub sequence_len: usize,
    pub logits: usize,
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;

const GRU_NAMES: [&str; 9] = [
    "gru.w_z", "gru.w_r", "gru.w_h", "gru.u_z", "gru.u_r", "gru.u_h", "gru.b_z", "gru.b_r", "gru.b_h",
];

/// Positive start for the convolution biases, so the single-channel ReLU
/// after conv2 begins in its active region.
pub const CONV_BIAS_INIT: f64 = 0.1;

/// Fresh parameters. Weights are Glorot-uniform, convolution biases
/// [`CONV_BIAS_INIT`], other biases zero.
pub fn init_params(config: &CnnGruConfig, arch: Architecture, rng: &mut impl Rng) -> ParamSet {
    let (f, k, p, h, n) = (
        config.conv1_filters,
        config.kernel,
        config.conv1_size(),
        config.gru_hidden,
        config.n_classes,
    );
    let mut ps = ParamSet::default();
    ps.push("conv1.weight", Tensor::glorot(&[f, 1, k, k], k * k, f * k * k, rng));
    ps.push("conv1.bias", Tensor::new(vec![CONV_BIAS_INIT; f], vec![f]).expect("shape"));
    ps.push("conv2.weight", Tensor::glorot(&[1, f, p, p], f * p * p, p * p, rng));
    ps.push("conv2.bias", Tensor::new(vec![CONV_BIAS_INIT], vec![1]).expect("shape"));
    match arch {
        Architecture::CnnGru => {
            for name in &GRU_NAMES[..3] {
                ps.push(*name, Tensor::glorot(&[h, 1], 1, h, rng));
            }
            for name in &GRU_NAMES[3..6] {
                ps.push(*name, Tensor::glorot(&[h, h], h, h, rng));
            }
            for name in &GRU_NAMES[6..] {
                ps.push(*name, Tensor::zeros(&[h]));
            }
            if !config.strict {
                ps.push("readout.weight", Tensor::zeros(&[n, h]));
                ps.push("readout.bias", Tensor::zeros(&[n]));
            }
        }
        Architecture::CnnOnly => {
            ps.push("readout.weight", Tensor::zeros(&[n, 1]));
            ps.push("readout.bias", Tensor::zeros(&[n]));
        }
    }
    ps
}

/// Chooses the sign of the conv2 kernel that leaves more `(trial, band)`
/// pairs in the active region of the scalar ReLU; keeps the drawn sign on a
/// tie. Returns whether the kernel was flipped.
///
/// Conv2 reduces everything to one non-negative scalar per band, and NSCM
/// inputs differ little between trials, so a kernel whose pre-activation is
/// negative for one trial is usually negative for all of them. Such a
/// network has zero gradient everywhere and never trains. Negating the
/// kernel turns every `s + b < 0` into `-s + b > 0` while keeping the
/// Glorot magnitude distribution.
pub fn orient_conv2(params: &mut ParamSet, dataset: &[FeatureTensor], config: &CnnGruConfig) -> Result<bool, ModelError> {
    let c = config.channels;
    let conv1 = Conv2dLayer {
        kernels: params.tensors[CONV1_W].clone(),
        bias: params.tensors[CONV1_B].clone(),
    };
    let conv2 = Conv2dLayer {
        kernels: params.tensors[CONV2_W].clone(),
        bias: Tensor::zeros(&[1]),
    };
    let bias = params.tensors[CONV2_B].values[0];
    let (mut alive, mut alive_flipped) = (0usize, 0usize);
    for tensor in dataset {
        for t in 0..tensor.bands() {
            let x = Tensor::new(tensor.slice(t).iter().copied().collect(), vec![1, c, c])?;
            let mut h = conv2d_forward(&x, &conv1)?;
            h.values = relu(&h.values);
            let s = conv2d_forward(&h, &conv2)?.values[0];
            alive += usize::from(s + bias > 0.0);
            alive_flipped += usize::from(-s + bias > 0.0);
        }
    }
    let flip = alive_flipped > alive;
    if flip {
        params.tensors[CONV2_W].values.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(flip)
}

/// Checks that `params` has exactly the layout `init_params` produces.
pub fn check_params(params: &ParamSet, config: &CnnGruConfig, arch: Architecture) -> Result<(), ModelError> {
    let expected = init_params(config, arch, &mut ChaCha8Rng::seed_from_u64(0));
    if expected.names != params.names {
        return Err(ModelError::ShapeMismatch(format!(
            "parameter names {:?}, expected {:?}",
            params.names, expected.names
        )));
    }
    for (name, (a, b)) in params.names.iter().zip(params.tensors.iter().zip(&expected.tensors)) {
        if a.shape != b.shape {
            return Err(ModelError::ShapeMismatch(format!(
                "{name} has shape {:?}, expected {:?}",
                a.shape, b.shape
            )));
        }
    }
    Ok(())
}

fn check_input(tensor: &FeatureTensor, config: &CnnGruConfig, arch: Architecture) -> Result<(), ModelError> {
    let (c1, c2, t) = tensor.values.dim();
    let bands = match arch {
        Architecture::CnnGru => config.bands,
        Architecture::CnnOnly => 1,
    };
    if c1 != config.channels || c2 != config.channels || t != bands {
        return Err(ModelError::ShapeMismatch(format!(
            "input {c1}x{c2}x{t}, model expects {0}x{0}x{bands}",
            config.channels
        )));
    }
    Ok(())
}

/// Records the forward pass on `g` and returns the logits node.
fn record<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    tensor: &FeatureTensor,
    config: &CnnGruConfig,
    arch: Architecture,
    training: bool,
    rng: &mut R,
) -> Result<(Var, ShapeTrace), ModelError> {
    check_input(tensor, config, arch)?;
    let c = config.channels;
    let (w1, b1, w2, b2) = (g.param(CONV1_W), g.param(CONV1_B), g.param(CONV2_W), g.param(CONV2_B));

    let mut conv1_out = Vec::new();
    let mut conv2_out = Vec::new();
    let mut steps = Vec::with_capacity(tensor.bands());
    for t in 0..tensor.bands() {
        let slice: Vec<f64> = tensor.slice(t).iter().copied().collect();
        let x = g.input(slice, vec![1, c, c], false)?;
        let h1 = g.conv2d(x, w1, b1)?;
        let h1 = g.relu(h1);
        let h2 = g.conv2d(h1, w2, b2)?;
        let h2 = g.relu(h2);
        conv1_out = g.shape(h1).to_vec();
        conv2_out = g.shape(h2).to_vec();
        steps.push(h2);
    }
    let seq = g.concat(&steps);
    let seq = g.dropout(seq, config.p_drop, rng, training)?;
    let sequence_len = g.value(seq).len();

    let logits = match arch {
        Architecture::CnnGru => {
            let gv: Vec<Var> = (4..13).map(|i| g.param(i)).collect();
            let (wz, wr, wh, uz, ur, uh, bz, br, bh) = (gv[0], gv[1], gv[2], gv[3], gv[4], gv[5], gv[6], gv[7], gv[8]);
            let mut h = g.input(vec![0.0; config.gru_hidden], vec![config.gru_hidden], false)?;
            for t in 0..sequence_len {
                let x = g.index(seq, t)?;
                let gate = |g: &mut Graph<'_>, w: Var, u: Var, b: Var, hv: Var| -> Result<Var, NnError> {
                    let wx = g.matvec(w, x)?;
                    let uh = g.matvec(u, hv)?;
                    let s = g.add(wx, uh)?;
                    g.add(s, b)
                };
                let z = gate(g, wz, uz, bz, h)?;
                let z = g.sigmoid(z);
                let r = gate(g, wr, ur, br, h)?;
                let r = g.sigmoid(r);
                let rh = g.mul(r, h)?;
                let cand = gate(g, wh, uh, bh, rh)?;
                let cand = g.tanh(cand);
                let keep = g.one_minus(z);
                let old = g.mul(keep, h)?;
                let new = g.mul(z, cand)?;
                h = g.add(old, new)?;
            }
            if config.strict {
                h
            } else {
                let (rw, rb) = (g.param(13), g.param(14));
                let l = g.matvec(rw, h)?;
                g.add(l, rb)?
            }
        }
        Architecture::CnnOnly => {
            let (rw, rb) = (g.param(4), g.param(5));
            let l = g.matvec(rw, seq)?;
            g.add(l, rb)?
        }
    };
    let trace = ShapeTrace {
        conv1_out,
        conv2_out,
        sequence_len,
        logits: g.value(logits).len(),
    };
    Ok((logits, trace))
}

/// Logits for one trial.
pub fn forward<R: Rng + ?Sized>(
    tensor: &FeatureTensor,
    params: &ParamSet,
    config: &CnnGruConfig,
    training: bool,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    forward_with(tensor, params, config, Architecture::CnnGru, training, rng).map(|(l, _)| l)
}

/// Logits of the CNN-only ablation for a single band (`T = 1` tensor).
pub fn forward_cnn_only<R: Rng + ?Sized>(
    slice: &FeatureTensor,
    params: &ParamSet,
    config: &CnnGruConfig,
    training: bool,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    forward_with(slice, params, config, Architecture::CnnOnly, training, rng).map(|(l, _)| l)
}

pub fn forward_with<R: Rng + ?Sized>(
    tensor: &FeatureTensor,
    params: &ParamSet,
    config: &CnnGruConfig,
    arch: Architecture,
    training: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, ShapeTrace), ModelError> {
    let mut g = Graph::new(params);
    let (logits, trace) = record(&mut g, tensor, config, arch, training, rng)?;
    Ok((g.value(logits).to_vec(), trace))
}

/// Cross-entropy of one trial and the gradient with respect to every
/// parameter.
pub fn loss_and_grads<R: Rng + ?Sized>(
    tensor: &FeatureTensor,
    params: &ParamSet,
    config: &CnnGruConfig,
    arch: Architecture,
    training: bool,
    rng: &mut R,
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let mut g = Graph::new(params);
    let (logits, _) = record(&mut g, tensor, config, arch, training, rng)?;
    let loss = g.softmax_xent(logits, tensor.label.index())?;
    let value = g.value(loss)[0];
    g.backward(loss)?;
    Ok((value, g.param_grads()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ParamSet,
    pub config: CnnGruConfig,
    pub architecture: Architecture,
    /// Mean training loss at the start of every epoch.
    pub training_curve: Vec<f64>,
}

fn trial_seed(epoch_seed: u64, trial: usize) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = epoch_seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn per_trial<T, F>(dataset: &[FeatureTensor], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &FeatureTensor) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        dataset.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        dataset.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Full-batch Adam on mean cross-entropy for `config.epochs` epochs. Each
/// epoch's gradient is summed in dataset order, so results do not depend on
/// thread scheduling.
pub fn train(dataset: &[FeatureTensor], config: &CnnGruConfig, arch: Architecture) -> Result<TrainedModel, ModelError> {
    train_with_progress(dataset, config, arch, |_, _| {})
}

pub fn train_with_progress(
    dataset: &[FeatureTensor],
    config: &CnnGruConfig,
    arch: Architecture,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainedModel, ModelError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for class in ClassLabel::ALL {
        if !dataset.iter().any(|t| t.label == class) {
            return Err(ModelError::MissingClass(class));
        }
    }
    for t in dataset {
        check_input(t, config, arch)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params(config, arch, &mut rng);
    if orient_conv2(&mut params, dataset, config)? {
        log::debug!("conv2 kernel negated to start in the active ReLU region");
    }
    let mut adam = AdamState::new(config.lr, &params.tensors);
    let mut curve = Vec::with_capacity(config.epochs);
    let scale = 1.0 / dataset.len() as f64;

    for epoch in 0..config.epochs {
        let epoch_seed: u64 = rng.random();
        let results = per_trial(dataset, |i, tensor| {
            let mut trial_rng = ChaCha8Rng::seed_from_u64(trial_seed(epoch_seed, i));
            loss_and_grads(tensor, &params, config, arch, true, &mut trial_rng)
        });

        let mut total = 0.0;
        let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        for r in results {
            let (loss, g) = r?;
            total += loss;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        let mean_loss = total * scale;
        if !mean_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        adam_step(&mut params.tensors, &grads, &mut adam)?;
        curve.push(mean_loss);
        progress(epoch, mean_loss);
    }

    Ok(TrainedModel {
        params,
        config: config.clone(),
        architecture: arch,
        training_curve: curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<ClassLabel>,
}

impl TrainedModel {
    pub fn logits(&self, tensor: &FeatureTensor) -> Result<Vec<f64>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        forward_with(tensor, &self.params, &self.config, self.architecture, false, &mut rng).map(|(l, _)| l)
    }

    /// Argmax class; ties go to the lower index.
    pub fn predict(&self, tensor: &FeatureTensor) -> Result<ClassLabel, ModelError> {
        let logits = self.logits(tensor)?;
        let best = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        ClassLabel::from_index(best)
            .ok_or_else(|| ModelError::ShapeMismatch(format!("class index {best} has no label")))
    }
}

pub fn evaluate(model: &TrainedModel, dataset: &[FeatureTensor]) -> Result<Evaluation, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let predictions = per_trial(dataset, |_, t| model.predict(t))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Evaluation {
        accuracy: accuracy(&predictions, dataset.iter().map(|t| t.label)),
        predictions,
    })
}

pub fn accuracy(predictions: &[ClassLabel], truth: impl IntoIterator<Item = ClassLabel>) -> f64 {
    let correct = predictions.iter().zip(truth).filter(|(p, t)| **p == *t).count();
    correct as f64 / predictions.len() as f64
}
