//! Tiny trainable point counter: a decoder that maps each `r x r x c`
//! feature block to a foreground probability, with analytic gradients and
//! an Adam optimizer.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psam::{gather_block, BlockDecoder};
use crate::tensor::{load_tensor, save_tensor, DType, Tensor};
use crate::types::{FeatureMap, ScoreMap};

pub const DEFAULT_RECEPTIVE_FIELD: usize = 5;
pub const DEFAULT_HIDDEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecoderKind {
    Linear,
    Mlp { hidden: usize },
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Linear => "linear",
            DecoderKind::Mlp { .. } => "mlp",
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decoder parameters stored as one flat vector.
///
/// Linear layout: `[w (r*r*c), b]`.
/// MLP layout: `[W1 (hidden x r*r*c), b1 (hidden), w2 (hidden), b2]`, with a
/// tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDecoder {
    kind: DecoderKind,
    receptive_field: usize,
    channels: usize,
    params: Vec<f64>,
}

fn param_count(kind: DecoderKind, block_len: usize) -> usize {
    match kind {
        DecoderKind::Linear => block_len + 1,
        DecoderKind::Mlp { hidden } => hidden * block_len + 2 * hidden + 1,
    }
}

impl TinyDecoder {
    /// Zero-initialised decoder; outputs 0.5 everywhere.
    pub fn zeros(kind: DecoderKind, receptive_field: usize, channels: usize) -> Result<Self> {
        if receptive_field % 2 == 0 || receptive_field == 0 {
            return Err(Error::InvalidParameter(format!(
                "receptive field must be odd, got {receptive_field}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidParameter("decoder needs at least one channel".into()));
        }
        if let DecoderKind::Mlp { hidden: 0 } = kind {
            return Err(Error::InvalidParameter("mlp decoder needs hidden units".into()));
        }
        let len = param_count(kind, receptive_field * receptive_field * channels);
        Ok(Self {
            kind,
            receptive_field,
            channels,
            params: vec![0.0; len],
        })
    }

    /// Linear decoder from explicit weights (`r*r*c`, block layout) and bias.
    pub fn linear(receptive_field: usize, channels: usize, weights: Vec<f64>, bias: f64) -> Result<Self> {
        let mut d = Self::zeros(DecoderKind::Linear, receptive_field, channels)?;
        if weights.len() != d.block_len() {
            return Err(Error::shape("decoder weights", d.block_len(), weights.len()));
        }
        d.params[..weights.len()].copy_from_slice(&weights);
        d.params[weights.len()] = bias;
        d.check_finite()?;
        Ok(d)
    }

    /// Randomly initialised decoder. Linear decoders start at zero; MLP
    /// hidden weights are drawn uniformly with a fan-in scale.
    pub fn init<R: Rng>(kind: DecoderKind, receptive_field: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let mut d = Self::zeros(kind, receptive_field, channels)?;
        if let DecoderKind::Mlp { hidden } = kind {
            let fan_in = d.block_len();
            let scale = (1.0 / fan_in as f64).sqrt();
            for w in &mut d.params[..hidden * fan_in] {
                *w = rng.random_range(-scale..scale);
            }
            let out = (1.0 / hidden as f64).sqrt();
            let w2 = hidden * fan_in + hidden;
            for w in &mut d.params[w2..w2 + hidden] {
                *w = rng.random_range(-out..out);
            }
        }
        Ok(d)
    }

    pub fn from_params(kind: DecoderKind, receptive_field: usize, channels: usize, params: Vec<f64>) -> Result<Self> {
        let mut d = Self::zeros(kind, receptive_field, channels)?;
        if params.len() != d.params.len() {
            return Err(Error::shape("decoder parameters", d.params.len(), params.len()));
        }
        d.params = params;
        d.check_finite()?;
        Ok(d)
    }

    fn check_finite(&self) -> Result<()> {
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder parameters"));
        }
        Ok(())
    }

    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    #[inline]
    pub fn block_len(&self) -> usize {
        self.receptive_field * self.receptive_field * self.channels
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Every parameter except the output bias.
    pub fn weights(&self) -> &[f64] {
        &self.params[..self.params.len() - 1]
    }

    /// Output bias.
    pub fn bias(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Pre-sigmoid response for one block.
    pub fn logit(&self, block: &[f64]) -> f64 {
        let d = self.block_len();
        match self.kind {
            DecoderKind::Linear => dot(&self.params[..d], block) + self.params[d],
            DecoderKind::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut z = 0.0;
                for k in 0..hidden {
                    z += w2[k] * (dot(&w1[k * d..(k + 1) * d], block) + b1[k]).tanh();
                }
                z + b2[0]
            }
        }
    }

    /// Accumulates `scale * dp/dparams` into `d_params` and writes
    /// `scale * dp/dblock` into `d_block` (when given). Returns `p`.
    fn backward_block(&self, block: &[f64], scale: f64, d_params: &mut [f64], d_block: Option<&mut [f64]>) -> f64 {
        let d = self.block_len();
        match self.kind {
            DecoderKind::Linear => {
                let p = sigmoid(self.logit(block));
                let g = scale * p * (1.0 - p);
                for (dp, x) in d_params[..d].iter_mut().zip(block) {
                    *dp += g * x;
                }
                d_params[d] += g;
                if let Some(db) = d_block {
                    for (o, w) in db.iter_mut().zip(&self.params[..d]) {
                        *o = g * w;
                    }
                }
                p
            }
            DecoderKind::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let w2 = &rest[..hidden];
                let mut h = vec![0.0; hidden];
                let mut z = 0.0;
                for k in 0..hidden {
                    h[k] = (dot(&w1[k * d..(k + 1) * d], block) + b1[k]).tanh();
                    z += w2[k] * h[k];
                }
                z += rest[hidden];
                let p = sigmoid(z);
                let g = scale * p * (1.0 - p);
                let mut db = d_block;
                if let Some(db) = db.as_deref_mut() {
                    db.fill(0.0);
                }
                for k in 0..hidden {
                    let gh = g * w2[k] * (1.0 - h[k] * h[k]);
                    let row = &mut d_params[k * d..(k + 1) * d];
                    for (dp, x) in row.iter_mut().zip(block) {
                        *dp += gh * x;
                    }
                    d_params[hidden * d + k] += gh;
                    d_params[hidden * d + hidden + k] += g * h[k];
                    if let Some(db) = db.as_deref_mut() {
                        for (o, w) in db.iter_mut().zip(&w1[k * d..(k + 1) * d]) {
                            *o += gh * w;
                        }
                    }
                }
                d_params[hidden * d + 2 * hidden] += g;
                p
            }
        }
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.channels() != self.channels {
            return Err(Error::shape("feature channels", self.channels, features.channels()));
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

impl BlockDecoder for TinyDecoder {
    fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn forward_block(&self, block: &[f64]) -> f64 {
        sigmoid(self.logit(block))
    }

    fn gradient_block(&self, block: &[f64], out: &mut [f64]) -> Result<()> {
        let mut scratch = vec![0.0; self.params.len()];
        self.backward_block(block, 1.0, &mut scratch, Some(out));
        Ok(())
    }
}

/// Per-pixel decoder output over the whole feature map.
///
/// Each pixel's block is gathered with the same routine that
/// [`crate::psam::extract_blocks`] uses, so the result is bit-identical to
/// block-wise decoding.
pub fn decoder_forward<D: BlockDecoder + ?Sized>(decoder: &D, features: &FeatureMap) -> Result<ScoreMap> {
    if features.channels() != decoder.channels() {
        return Err(Error::shape("feature channels", decoder.channels(), features.channels()));
    }
    let r = decoder.receptive_field();
    let shape = features.shape();
    let mut block = vec![0.0; r * r * features.channels()];
    let values = (0..shape.len())
        .map(|q| {
            gather_block(features, q, r, &mut block, None);
            decoder.forward_block(&block)
        })
        .collect();
    ScoreMap::new(values, shape.height, shape.width)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGradients {
    pub d_params: Vec<f64>,
    /// Per-pixel block gradients, `n x (r*r*c)`.
    pub d_features: Vec<f64>,
}

impl DecoderGradients {
    pub fn d_weights(&self) -> &[f64] {
        &self.d_params[..self.d_params.len() - 1]
    }

    pub fn d_bias(&self) -> f64 {
        self.d_params[self.d_params.len() - 1]
    }
}

/// Chain rule from a per-pixel loss gradient `dL/dp` to the decoder
/// parameters and each pixel's feature block.
pub fn decoder_backward(decoder: &TinyDecoder, features: &FeatureMap, upstream: &[f64]) -> Result<DecoderGradients> {
    decoder.check_features(features)?;
    let n = features.shape().len();
    if upstream.len() != n {
        return Err(Error::shape("upstream gradient", n, upstream.len()));
    }
    let bl = decoder.block_len();
    let mut d_params = vec![0.0; decoder.num_params()];
    let mut d_features = vec![0.0; n * bl];
    let mut block = vec![0.0; bl];
    for (q, (&g, db)) in upstream.iter().zip(d_features.chunks_exact_mut(bl)).enumerate() {
        if g == 0.0 {
            continue;
        }
        gather_block(features, q, decoder.receptive_field, &mut block, None);
        decoder.backward_block(&block, g, &mut d_params, Some(db));
    }
    Ok(DecoderGradients { d_params, d_features })
}

/// Parameter gradient only; skips the per-block feature gradients.
pub fn decoder_param_gradient(decoder: &TinyDecoder, features: &FeatureMap, upstream: &[f64]) -> Result<Vec<f64>> {
    decoder.check_features(features)?;
    let n = features.shape().len();
    if upstream.len() != n {
        return Err(Error::shape("upstream gradient", n, upstream.len()));
    }
    let mut d_params = vec![0.0; decoder.num_params()];
    let mut block = vec![0.0; decoder.block_len()];
    for (q, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        gather_block(features, q, decoder.receptive_field, &mut block, None);
        decoder.backward_block(&block, g, &mut d_params, None);
    }
    Ok(d_params)
}

/// Number of pixels scoring strictly above 0.5.
pub fn count_estimate(p: &ScoreMap) -> usize {
    p.values().iter().filter(|&&v| v > 0.5).count()
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam state", params.len(), grads.len()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub receptive_field: usize,
    pub channels: usize,
    pub decoder: DecoderKind,
    pub weights_file: String,
    pub bias_file: String,
}

/// Writes `<stem>.weights.p2rt`, `<stem>.bias.p2rt` and `<stem>.meta.json`
/// into `dir`; returns the three paths (meta first).
pub fn save_checkpoint(decoder: &TinyDecoder, dir: &Path, stem: &str) -> Result<[PathBuf; 3]> {
    let weights_file = format!("{stem}.weights.p2rt");
    let bias_file = format!("{stem}.bias.p2rt");
    let r = decoder.receptive_field;
    let weights = match decoder.kind {
        DecoderKind::Linear => Tensor::new(vec![r, r, decoder.channels], decoder.weights().to_vec())?,
        DecoderKind::Mlp { .. } => Tensor::new(vec![decoder.weights().len()], decoder.weights().to_vec())?,
    };
    let wpath = dir.join(&weights_file);
    let bpath = dir.join(&bias_file);
    save_tensor(&wpath, &weights, DType::F64)?;
    save_tensor(&bpath, &Tensor::new(vec![1], vec![decoder.bias()])?, DType::F64)?;
    let meta = CheckpointMeta {
        receptive_field: r,
        channels: decoder.channels,
        decoder: decoder.kind,
        weights_file,
        bias_file,
    };
    let mpath = dir.join(format!("{stem}.meta.json"));
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok([mpath, wpath, bpath])
}

/// Loads a checkpoint from its `.meta.json` path.
pub fn load_checkpoint(meta_path: &Path) -> Result<TinyDecoder> {
    let text = std::fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let weights = load_tensor(dir.join(&meta.weights_file))?;
    let bias = load_tensor(dir.join(&meta.bias_file))?;
    if bias.data.len() != 1 {
        return Err(Error::shape("bias tensor", 1, bias.data.len()));
    }
    let mut params = weights.data;
    params.push(bias.data[0]);
    TinyDecoder::from_params(meta.decoder, meta.receptive_field, meta.channels, params)
}
