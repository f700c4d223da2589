//! Multilayer perceptron with dropout, trained by SGD with momentum.
//!
//! Each hidden block is `Linear -> Dropout -> ReLU`; the network ends with a
//! plain `Linear` producing logits. Dropout is inverted: kept units are
//! scaled by `1/(1-p)` while sampling masks, so [`Mode::Eval`] applies no
//! correction at all.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::{log_sum_exp, matmul, matmul_at, matmul_bt, softmax_rows, Array2, ProbMatrix};

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BATCH_SIZE: usize = 128;
/// Epochs used for MNIST-sized runs.
pub const DEFAULT_EPOCHS: usize = 100;
/// Epochs used for CIFAR-10 runs.
pub const CIFAR_EPOCHS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub dropout: f64,
}

/// Architecture: `input_dim`, then one `Lin(width)-Drop(p)-ReLU` block per
/// hidden layer, then `Lin(output_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<HiddenLayer>, output_dim: usize) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two hidden layers of equal width sharing one dropout rate.
    pub fn two_hidden(input_dim: usize, width: usize, dropout: f64, output_dim: usize) -> Result<Self> {
        let layer = HiddenLayer { width, dropout };
        MlpSpec::new(input_dim, vec![layer, layer], output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input and output dims must be >= 1".into()));
        }
        for (i, h) in self.hidden.iter().enumerate() {
            if h.width == 0 {
                return Err(Error::Config(format!("hidden layer {i} has width 0")));
            }
            if !(0.0..1.0).contains(&h.dropout) {
                return Err(Error::Config(format!(
                    "hidden layer {i} dropout {} outside [0, 1)",
                    h.dropout
                )));
            }
        }
        Ok(())
    }

    /// `(out, in)` for every linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for h in &self.hidden {
            dims.push((h.width, fan_in));
            fan_in = h.width;
        }
        dims.push((self.output_dim, fan_in));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn has_dropout(&self) -> bool {
        self.hidden.iter().any(|h| h.dropout > 0.0)
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        for h in &mut self.hidden {
            h.dropout = rate;
        }
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// out × in
    pub weight: Array2,
    pub bias: Vec<f64>,
}

/// Weights and biases of every linear layer, input side first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Linear>,
}

impl ModelParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(out, fan_in)| Linear {
                weight: Array2::zeros(out, fan_in),
                bias: vec![0.0; out],
            })
            .collect();
        ModelParams { layers }
    }

    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut params = ModelParams::zeros(spec);
        for layer in &mut params.layers {
            let (out, fan_in) = layer.weight.shape();
            let limit = (6.0 / (fan_in + out) as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Layer dims as `(out, in)`.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    pub fn matches(&self, spec: &MlpSpec) -> bool {
        self.dims() == spec.layer_dims()
    }

    fn check(&self, spec: &MlpSpec) -> Result<()> {
        if !self.matches(spec) {
            return Err(Error::Shape(format!(
                "parameters with layer dims {:?} do not fit spec {:?}",
                self.dims(),
                spec.layer_dims()
            )));
        }
        Ok(())
    }

    /// All values in layer order: weights row-major, then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(spec: &MlpSpec, values: &[f64]) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                spec.param_count()
            )));
        }
        let mut params = ModelParams::zeros(spec);
        let mut offset = 0;
        for l in &mut params.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&values[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(params)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Dropout active; used for training.
    Train,
    /// Dropout off, no rescaling.
    Eval,
    /// Dropout active at prediction time; each pass is one posterior sample.
    McDropout,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Activations retained by [`forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every linear layer.
    inputs: Vec<Array2>,
    /// Per hidden layer, the dropout multiplier (0 or `1/(1-p)`) if masks were drawn.
    masks: Vec<Option<Array2>>,
}

/// Runs the network on `x` (one example per row), returning logits.
pub fn forward<R: Rng>(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &Array2,
    mode: Mode,
    rng: &mut R,
) -> Result<(Array2, ForwardCache)> {
    params.check(spec)?;
    if x.cols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {}",
            x.cols(),
            spec.input_dim
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut masks = Vec::with_capacity(spec.hidden.len());
    let mut a = x.clone();
    for (layer, hidden) in params.layers.iter().zip(&spec.hidden) {
        let mut z = matmul_bt(&a, &layer.weight)?;
        z.add_row_vector(&layer.bias)?;
        let mask = if mode.dropout_active() && hidden.dropout > 0.0 {
            let scale = 1.0 / (1.0 - hidden.dropout);
            let mut m = Array2::zeros(z.rows(), z.cols());
            for (mv, zv) in m.as_mut_slice().iter_mut().zip(z.as_mut_slice()) {
                if rng.random::<f64>() >= hidden.dropout {
                    *mv = scale;
                }
                *zv *= *mv;
            }
            Some(m)
        } else {
            None
        };
        masks.push(mask);
        for v in z.as_mut_slice() {
            *v = v.max(0.0);
        }
        inputs.push(std::mem::replace(&mut a, z));
    }
    let last = params.layers.last().expect("an MLP always has an output layer");
    let mut logits = matmul_bt(&a, &last.weight)?;
    logits.add_row_vector(&last.bias)?;
    inputs.push(a);
    Ok((logits, ForwardCache { inputs, masks }))
}

/// Class probabilities with dropout off.
pub fn predict_probs(params: &ModelParams, spec: &MlpSpec, x: &Array2) -> Result<ProbMatrix> {
    // Eval mode never touches the rng.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, _) = forward(params, spec, x, Mode::Eval, &mut rng)?;
    Ok(softmax_rows(&logits))
}

/// Mean cross-entropy of the batch under a train-mode pass, and its
/// gradient with respect to every parameter.
pub fn loss_and_grads<R: Rng>(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &Array2,
    labels: &[usize],
    rng: &mut R,
) -> Result<(f64, ModelParams)> {
    if labels.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if labels.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} inputs",
            labels.len(),
            x.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= spec.output_dim) {
        return Err(Error::Domain(format!(
            "label {bad} outside [0, {})",
            spec.output_dim
        )));
    }
    let (logits, cache) = forward(params, spec, x, Mode::Train, rng)?;
    let n = labels.len() as f64;

    let mut loss = 0.0;
    let mut delta = logits;
    for (i, &y) in labels.iter().enumerate() {
        let row = delta.row_mut(i);
        loss += log_sum_exp(row) - row[y];
        crate::ndcore::softmax_in_place(row);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    loss /= n;

    let mut grads = ModelParams::zeros(spec);
    for l in (0..params.layers.len()).rev() {
        grads.layers[l].weight = matmul_at(&delta, &cache.inputs[l])?;
        grads.layers[l].bias = delta.sum_rows();
        if l == 0 {
            break;
        }
        let mut upstream = matmul(&delta, &params.layers[l].weight)?;
        let activated = &cache.inputs[l];
        match &cache.masks[l - 1] {
            Some(mask) => {
                for ((g, &a), &m) in upstream
                    .as_mut_slice()
                    .iter_mut()
                    .zip(activated.as_slice())
                    .zip(mask.as_slice())
                {
                    *g = if a > 0.0 { *g * m } else { 0.0 };
                }
            }
            None => {
                for (g, &a) in upstream.as_mut_slice().iter_mut().zip(activated.as_slice()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
        delta = upstream;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// L2 coefficient added to the gradient (`g + λw`); 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Heavy-ball update: `v <- momentum*v + g`, `w <- w - lr*v`, where `g`
/// includes the weight-decay term.
pub fn sgd_step(params: &mut ModelParams, velocity: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig) {
    let decay = cfg.weight_decay;
    for ((w, v), &g) in params
        .values_mut()
        .zip(velocity.values_mut())
        .zip(grads.values())
    {
        *v = cfg.momentum * *v + g + decay * *w;
        *w -= cfg.learning_rate * *v;
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains from a fresh initialization. Initialization, the per-epoch
/// shuffles and the dropout masks all come from one stream seeded by
/// `cfg.seed`, so the result is a pure function of `(spec, dataset, cfg)`.
pub fn train(spec: &MlpSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    spec.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if dataset.dim() != spec.input_dim || dataset.c() != spec.output_dim {
        return Err(Error::Shape(format!(
            "dataset with {} features / {} classes for a {}-in {}-out network",
            dataset.dim(),
            dataset.c(),
            spec.input_dim,
            spec.output_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(spec, &mut rng);
    let mut velocity = ModelParams::zeros(spec);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        // the trailing partial batch is kept
        for batch in order.chunks(cfg.batch_size) {
            let x = dataset.inputs().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| dataset.labels()[i]).collect();
            let (loss, grads) = loss_and_grads(&params, spec, &x, &y, &mut rng)?;
            sgd_step(&mut params, &mut velocity, &grads, cfg);
            epoch_loss += loss * batch.len() as f64;
        }
        loss_trace.push(epoch_loss / dataset.len() as f64);
    }
    if !params.is_finite() {
        return Err(Error::Consistency("training diverged to non-finite parameters".into()));
    }
    Ok(Trained { params, loss_trace })
}

const MAGIC: &[u8; 4] = b"UQF1";

/// Binary layout: `UQF1`, layer count, then `(out, in)` per layer (all u32
/// little-endian), then each layer's weights (row-major) and bias as f64
/// little-endian.
pub fn write_params<W: Write>(params: &ModelParams, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for (out, fan_in) in params.dims() {
        w.write_all(&(out as u32).to_le_bytes())?;
        w.write_all(&(fan_in as u32).to_le_bytes())?;
    }
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_params<R: Read>(mut r: R) -> std::result::Result<ModelParams, String> {
    let mut buf4 = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> std::result::Result<u32, String> {
        r.read_exact(&mut buf4).map_err(|e| format!("truncated header: {e}"))?;
        Ok(u32::from_le_bytes(buf4))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| format!("truncated magic: {e}"))?;
    if &magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let n_layers = read_u32(&mut r)? as usize;
    if n_layers == 0 {
        return Err("file declares no layers".into());
    }
    let mut dims = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let out = read_u32(&mut r)? as usize;
        let fan_in = read_u32(&mut r)? as usize;
        dims.push((out, fan_in));
    }
    let mut layers = Vec::with_capacity(n_layers);
    let mut buf8 = [0u8; 8];
    let mut read_f64s = |r: &mut R, n: usize| -> std::result::Result<Vec<f64>, String> {
        (0..n)
            .map(|_| {
                r.read_exact(&mut buf8).map_err(|e| format!("truncated payload: {e}"))?;
                Ok(f64::from_le_bytes(buf8))
            })
            .collect()
    };
    for (i, &(out, fan_in)) in dims.iter().enumerate() {
        if i > 0 && dims[i - 1].0 != fan_in {
            return Err(format!("layer {i} input {fan_in} does not follow previous output {}", dims[i - 1].0));
        }
        let weight = Array2::from_vec(out, fan_in, read_f64s(&mut r, out * fan_in)?)
            .map_err(|e| e.to_string())?;
        let bias = read_f64s(&mut r, out)?;
        layers.push(Linear { weight, bias });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| e.to_string())?;
    if !rest.is_empty() {
        return Err(format!("{} trailing bytes", rest.len()));
    }
    Ok(ModelParams { layers })
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(params, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(std::io::BufReader::new(file)).map_err(|reason| Error::format(path, reason))
}
