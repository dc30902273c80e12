//! Mean-teacher semi-supervised training on synthetic scenes.
//!
//! Scenes are frozen feature maps with Gaussian bumps planted at the
//! annotated points; only the decoder is trained. Labeled scenes are
//! supervised with their ground truth, unlabeled scenes with the teacher's
//! foreground pixels matched by the selected scheme.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counter::{
    adam_step, count_estimate, decoder_forward, decoder_param_gradient, AdamState, DecoderKind, TinyDecoder,
};
use crate::error::{Error, Result};
use crate::loss::{
    bce_gradient, confidence_vector, masked_bce, p2p_confidence, p2r_confidence, weighted_bce, LossBreakdown,
};
use crate::matching::{p2p_objective, p2r_objective, MatchParams, ScoreTransform};
use crate::points::{load_points, save_points};
use crate::psam::FOREGROUND_THRESHOLD;
use crate::tensor::{load_tensor, save_tensor, DType, Tensor};
use crate::types::{ConfidenceMask, FeatureMap, GridShape, PointAnnotation, ScoreMap};

/// Mixes a base seed with a stream tag and two indices into an independent
/// 64-bit seed (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = base;
    for v in [stream, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn rng_for(base: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, a, b))
}

const STREAM_SCENE: u64 = 1;
const STREAM_LABELED: u64 = 2;
const STREAM_WEAK: u64 = 3;
const STREAM_STRONG: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;
const STREAM_INIT: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    /// Peak height of each planted bump.
    pub amplitude: f64,
    /// Spatial standard deviation of each bump.
    pub spread: f64,
    /// Minimum distance between planted points.
    pub min_separation: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            channels: 4,
            noise_sigma: 0.45,
            amplitude: 1.0,
            spread: 1.0,
            min_separation: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub features: FeatureMap,
    pub gt_points: PointAnnotation,
    pub labeled: bool,
    pub seed: u64,
}

/// Integer pixel locations at pairwise distance `>= min_separation`,
/// chosen greedily from a seeded shuffle of the grid.
fn place_points<R: Rng>(m: usize, params: &SceneParams, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    let mut cells: Vec<usize> = (0..params.height * params.width).collect();
    cells.shuffle(rng);
    let mut placed: Vec<[f64; 2]> = Vec::with_capacity(m);
    for cell in cells {
        if placed.len() == m {
            break;
        }
        let p = [(cell / params.width) as f64, (cell % params.width) as f64];
        let clear = placed
            .iter()
            .all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= params.min_separation);
        if clear {
            placed.push(p);
        }
    }
    if placed.len() < m {
        return Err(Error::InvalidParameter(format!(
            "cannot place {m} points at separation {} on a {}x{} grid",
            params.min_separation, params.height, params.width
        )));
    }
    placed.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    Ok(placed)
}

pub fn generate_scene(m_points: usize, params: &SceneParams, seed: u64) -> Result<SceneSample> {
    let (h, w, c) = (params.height, params.width, params.channels);
    GridShape::new(h, w)?;
    if c == 0 {
        return Err(Error::InvalidParameter("scenes need at least one channel".into()));
    }
    if !(params.noise_sigma >= 0.0 && params.spread > 0.0 && params.amplitude.is_finite()) {
        return Err(Error::InvalidParameter("invalid scene noise, spread or amplitude".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = place_points(m_points, params, &mut rng)?;

    let mut signal = vec![0.0; h * w];
    let denom = 2.0 * params.spread * params.spread;
    for p in &points {
        for (t, s) in signal.iter_mut().enumerate() {
            let dy = (t / w) as f64 - p[0];
            let dx = (t % w) as f64 - p[1];
            *s += params.amplitude * (-(dy * dy + dx * dx) / denom).exp();
        }
    }
    let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend(signal.iter().map(|s| s + noise.sample(&mut rng)));
    }
    Ok(SceneSample {
        features: FeatureMap::new(c, h, w, data)?,
        gt_points: PointAnnotation::new(points)?,
        labeled: false,
        seed,
    })
}

/// Mirror image left to right; point columns map to `w - 1 - col`.
pub fn flip_horizontal(sample: &SceneSample) -> SceneSample {
    let f = &sample.features;
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let src = f.data();
    let mut data = Vec::with_capacity(src.len());
    for row in src.chunks_exact(w) {
        data.extend(row.iter().rev());
    }
    debug_assert_eq!(data.len(), c * h * w);
    let coords = sample
        .gt_points
        .coords()
        .iter()
        .map(|p| [p[0], (w - 1) as f64 - p[1]])
        .collect();
    SceneSample {
        features: FeatureMap::new(c, h, w, data).expect("flip preserves shape"),
        gt_points: PointAnnotation::new(coords).expect("flip keeps points in grid"),
        labeled: sample.labeled,
        seed: sample.seed,
    }
}

/// Horizontal flip with probability 0.5. Also returns whether it flipped.
pub fn augment_weak(sample: &SceneSample, seed: u64) -> (SceneSample, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(0.5) {
        (flip_horizontal(sample), true)
    } else {
        (sample.clone(), false)
    }
}

pub const JITTER_SIGMA: f64 = 0.1;
pub const CUTOUT_MIN_FRACTION: f64 = 0.10;
pub const CUTOUT_MAX_FRACTION: f64 = 0.25;

/// Rectangle `(top, left, height, width)` covering 10 to 25 percent of the
/// grid.
fn cutout_rect<R: Rng>(h: usize, w: usize, rng: &mut R) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    let fits = |rh: usize, rw: usize| {
        let f = (rh * rw) as f64 / area;
        (CUTOUT_MIN_FRACTION..=CUTOUT_MAX_FRACTION).contains(&f)
    };
    let mut options = Vec::new();
    for rh in 1..=h {
        for rw in 1..=w {
            if fits(rh, rw) {
                options.push((rh, rw));
            }
        }
    }
    let &(rh, rw) = options.get(rng.random_range(0..options.len().max(1)))?;
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    Some((top, left, rh, rw))
}

/// Feature jitter followed by one rectangular cutout. The returned mask is
/// 0 inside the cutout and 1 elsewhere. Grids too small to hold a cutout in
/// the allowed area range get jitter only.
pub fn augment_strong(sample: &SceneSample, seed: u64) -> (SceneSample, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = &sample.features;
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let jitter = Normal::new(0.0, JITTER_SIGMA).expect("valid jitter");
    let mut data: Vec<f64> = f.data().iter().map(|v| v + jitter.sample(&mut rng)).collect();
    let mut mask = vec![1.0; h * w];
    if let Some((top, left, rh, rw)) = cutout_rect(h, w, &mut rng) {
        for y in top..top + rh {
            for x in left..left + rw {
                mask[y * w + x] = 0.0;
                for k in 0..c {
                    data[(k * h + y) * w + x] = 0.0;
                }
            }
        }
    }
    let out = SceneSample {
        features: FeatureMap::new(c, h, w, data).expect("jitter preserves shape"),
        gt_points: sample.gt_points.clone(),
        labeled: sample.labeled,
        seed: sample.seed,
    };
    (out, mask)
}

/// Teacher foreground pixels (score above 0.5) as points, with their scores.
pub fn extract_pseudo_labels(teacher_scores: &ScoreMap) -> (PointAnnotation, Vec<f64>) {
    let shape = teacher_scores.shape();
    let mut coords = Vec::new();
    let mut scores = Vec::new();
    for (i, &p) in teacher_scores.values().iter().enumerate() {
        if p > FOREGROUND_THRESHOLD {
            coords.push(shape.coords_unchecked(i));
            scores.push(p);
        }
    }
    (PointAnnotation::new(coords).expect("pixel centres are valid points"), scores)
}

/// `teacher <- momentum * teacher + (1 - momentum) * student`.
pub fn ema_update(teacher: &mut [f64], student: &[f64], momentum: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::shape("ema parameters", teacher.len(), student.len()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidParameter(format!("ema momentum must lie in [0, 1), got {momentum}")));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = momentum * *t + (1.0 - momentum) * s;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingScheme {
    P2p,
    P2r,
}

impl FromStr for MatchingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p2p" => Ok(MatchingScheme::P2p),
            "p2r" => Ok(MatchingScheme::P2r),
            other => Err(Error::InvalidParameter(format!("unknown matching scheme `{other}`"))),
        }
    }
}

impl fmt::Display for MatchingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchingScheme::P2p => "p2p",
            MatchingScheme::P2r => "p2r",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Teacher,
    Student,
}

impl FromStr for EvalModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(EvalModel::Teacher),
            "student" => Ok(EvalModel::Student),
            other => Err(Error::InvalidParameter(format!("unknown eval model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub alpha_step: f64,
    pub alpha_cap: f64,
    pub eta: f64,
    pub tau: f64,
    pub mu: f64,
    pub lambda: f64,
    pub ema_momentum: f64,
    pub lr_decoder: f64,
    pub batch_size: usize,
    pub matching_scheme: MatchingScheme,
    pub score_transform: ScoreTransform,
    pub decoder: String,
    pub hidden: usize,
    pub receptive_field: usize,
    pub eval_model: EvalModel,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            warmup_epochs: 100,
            alpha_step: 0.01,
            alpha_cap: 2.0 / 3.0,
            eta: 0.7,
            tau: 8.0,
            mu: 64.0,
            lambda: 1.0,
            ema_momentum: 0.99,
            lr_decoder: 1e-2,
            batch_size: 16,
            matching_scheme: MatchingScheme::P2r,
            score_transform: ScoreTransform::InverseSigmoid,
            decoder: "linear".into(),
            hidden: 8,
            receptive_field: 5,
            eval_model: EvalModel::Teacher,
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "warmup_epochs",
        "alpha_step",
        "alpha_cap",
        "eta",
        "tau",
        "mu",
        "lambda",
        "ema_momentum",
        "lr_decoder",
        "batch_size",
        "matching_scheme",
        "score_transform",
        "decoder",
        "hidden",
        "receptive_field",
        "eval_model",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "alpha_step" => self.alpha_step = parse_value(key, value)?,
            "alpha_cap" => self.alpha_cap = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "mu" => self.mu = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "ema_momentum" => self.ema_momentum = parse_value(key, value)?,
            "lr_decoder" => self.lr_decoder = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "matching_scheme" => self.matching_scheme = value.trim().parse()?,
            "score_transform" => self.score_transform = value.trim().parse()?,
            "decoder" => {
                let v = value.trim();
                if v != "linear" && v != "mlp" {
                    return Err(Error::InvalidParameter(format!("unknown decoder `{v}`")));
                }
                self.decoder = v.to_string();
            }
            "hidden" => self.hidden = parse_value(key, value)?,
            "receptive_field" => self.receptive_field = parse_value(key, value)?,
            "eval_model" => self.eval_model = value.trim().parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(Error::InvalidParameter(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.eta > 0.5 && self.eta < 1.0) {
            return bad(format!("eta must lie in (0.5, 1), got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.alpha_cap) {
            return bad(format!("alpha_cap must lie in [0, 1], got {}", self.alpha_cap));
        }
        if !(self.alpha_step >= 0.0) {
            return bad(format!("alpha_step must be >= 0, got {}", self.alpha_step));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_decoder > 0.0 && self.lr_decoder.is_finite()) {
            return bad(format!("lr_decoder must be positive, got {}", self.lr_decoder));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must lie in [0, 1), got {}", self.ema_momentum));
        }
        if self.receptive_field % 2 == 0 {
            return bad(format!("receptive_field must be odd, got {}", self.receptive_field));
        }
        if !(self.lambda > 0.0) || !(self.mu > 0.0) || !(self.tau >= 0.0) {
            return bad("lambda and mu must be positive and tau non-negative".into());
        }
        Ok(())
    }

    pub fn decoder_kind(&self) -> DecoderKind {
        if self.decoder == "mlp" {
            DecoderKind::Mlp { hidden: self.hidden }
        } else {
            DecoderKind::Linear
        }
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            tau: self.tau,
            mu: self.mu,
            transform: self.score_transform,
        }
    }
}

/// Unlabeled-loss weight for an epoch: zero during warmup, then a linear
/// ramp capped at `alpha_cap`.
pub fn alpha_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.warmup_epochs {
        0.0
    } else {
        ((epoch - config.warmup_epochs) as f64 * config.alpha_step).min(config.alpha_cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: f64,
    /// Root-mean-square count error.
    pub mse: f64,
    pub mean_pred_count: f64,
    pub mean_true_count: f64,
}

/// Count errors of `decoder` over `samples` (no augmentation).
pub fn evaluate(decoder: &TinyDecoder, samples: &[SceneSample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let counts = samples
        .par_iter()
        .map(|s| decoder_forward(decoder, &s.features).map(|p| (count_estimate(&p), s.gt_points.len())))
        .collect::<Result<Vec<_>>>()?;
    Ok(count_metrics(&counts))
}

/// MAE and RMSE from `(predicted, true)` count pairs.
pub fn count_metrics(counts: &[(usize, usize)]) -> EvalMetrics {
    let k = counts.len() as f64;
    let (mut abs, mut sq, mut pred, mut truth) = (0.0, 0.0, 0.0, 0.0);
    for &(p, t) in counts {
        let e = p as f64 - t as f64;
        abs += e.abs();
        sq += e * e;
        pred += p as f64;
        truth += t as f64;
    }
    EvalMetrics {
        mae: abs / k,
        mse: (sq / k).sqrt(),
        mean_pred_count: pred / k,
        mean_true_count: truth / k,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub val_scenes: usize,
    pub points_min: usize,
    pub points_max: usize,
    pub labeled_frac: f64,
    pub scene: SceneParams,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scenes: 200,
            val_scenes: 50,
            points_min: 4,
            points_max: 12,
            labeled_frac: 0.05,
            scene: SceneParams::default(),
            seed: 0,
        }
    }
}

/// Number of labeled training scenes for a fraction, rounded to nearest.
pub fn labeled_count(scenes: usize, frac: f64) -> usize {
    ((scenes as f64 * frac).round() as usize).min(scenes)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.points_min > spec.points_max {
        return Err(Error::InvalidParameter(format!(
            "empty point range {}..{}",
            spec.points_min, spec.points_max
        )));
    }
    if !(0.0..=1.0).contains(&spec.labeled_frac) {
        return Err(Error::InvalidParameter(format!(
            "labeled fraction must lie in [0, 1], got {}",
            spec.labeled_frac
        )));
    }
    let make = |id: usize| -> Result<SceneSample> {
        let mut rng = rng_for(spec.seed, STREAM_SCENE, id as u64, 0);
        let m = rng.random_range(spec.points_min..=spec.points_max);
        generate_scene(m, &spec.scene, rng.random())
    };
    let total = spec.scenes + spec.val_scenes;
    let mut all = (0..total).into_par_iter().map(make).collect::<Result<Vec<_>>>()?;
    let val = all.split_off(spec.scenes);
    let mut train = all;
    let mut ids: Vec<usize> = (0..spec.scenes).collect();
    ids.shuffle(&mut rng_for(spec.seed, STREAM_LABELED, 0, 0));
    for &id in &ids[..labeled_count(spec.scenes, spec.labeled_frac)] {
        train[id].labeled = true;
    }
    Ok(Dataset { train, val })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    split: String,
    labeled: u8,
    seed: u64,
}

pub const DATASET_MANIFEST: &str = "manifest.csv";

fn scene_id(split: &str, i: usize) -> String {
    format!("{split}{i:05}")
}

/// Writes `scenes/<id>.features.p2rt`, `scenes/<id>.points.csv` and the
/// `manifest.csv` listing. Returns every file written, manifest last.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let scenes = dir.join("scenes");
    std::fs::create_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
    let mut written = Vec::new();
    let mut rows = Vec::new();
    for (split, samples) in [("train", &dataset.train), ("val", &dataset.val)] {
        for (i, s) in samples.iter().enumerate() {
            let id = scene_id(split, i);
            let fpath = scenes.join(format!("{id}.features.p2rt"));
            let ppath = scenes.join(format!("{id}.points.csv"));
            save_tensor(&fpath, &Tensor::from(&s.features), DType::F64)?;
            save_points(&ppath, &s.gt_points)?;
            written.push(fpath);
            written.push(ppath);
            rows.push(ManifestRow {
                id,
                split: split.to_string(),
                labeled: s.labeled as u8,
                seed: s.seed,
            });
        }
    }
    let mpath = dir.join(DATASET_MANIFEST);
    let mut wtr = csv::Writer::from_path(&mpath).map_err(|e| Error::Parse {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    for r in &rows {
        wtr.serialize(r).map_err(|e| Error::Parse {
            path: mpath.clone(),
            message: e.to_string(),
        })?;
    }
    wtr.flush().map_err(|e| Error::io(&mpath, e))?;
    written.push(mpath);
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(DATASET_MANIFEST);
    let parse_err = |e: csv::Error| Error::Parse {
        path: mpath.clone(),
        message: e.to_string(),
    };
    let mut rdr = csv::Reader::from_path(&mpath).map_err(parse_err)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for row in rdr.deserialize::<ManifestRow>() {
        let row = row.map_err(parse_err)?;
        let base = dir.join("scenes");
        let features = load_tensor(base.join(format!("{}.features.p2rt", row.id)))?.into_feature_map()?;
        let gt_points = load_points(base.join(format!("{}.points.csv", row.id)), Some(features.shape()))?;
        let sample = SceneSample {
            features,
            gt_points,
            labeled: row.labeled != 0,
            seed: row.seed,
        };
        match row.split.as_str() {
            "train" => train.push(sample),
            "val" => val.push(sample),
            other => {
                return Err(Error::Parse {
                    path: mpath.clone(),
                    message: format!("unknown split `{other}` for `{}`", row.id),
                })
            }
        }
    }
    Ok(Dataset { train, val })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub labeled_loss: f64,
    pub unlabeled_loss: f64,
    pub unlabeled_fg: f64,
    pub unlabeled_bg: f64,
    pub pseudo_points: f64,
    pub val_mae: f64,
    pub val_mse: f64,
    pub mean_pred_count: f64,
    pub mean_true_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub epoch: usize,
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub student: TinyDecoder,
    pub teacher: TinyDecoder,
    /// Teacher at the end of the labeled-only warmup.
    pub warmup_teacher: Option<TinyDecoder>,
    pub abort: Option<AbortRecord>,
}

impl TrainOutcome {
    /// The model selected for evaluation by the config.
    pub fn eval_model(&self, config: &TrainConfig) -> &TinyDecoder {
        match config.eval_model {
            EvalModel::Teacher => &self.teacher,
            EvalModel::Student => &self.student,
        }
    }

    /// JSON lines, one per epoch, plus a final abort line if the run
    /// stopped early.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        if let Some(a) = &self.abort {
            let line = serde_json::json!({ "abort": a });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

struct SampleGrad {
    loss: LossBreakdown,
    grad: Vec<f64>,
    pseudo: usize,
}

fn labeled_gradient(
    student: &TinyDecoder,
    sample: &SceneSample,
    config: &TrainConfig,
    seed: u64,
) -> Result<SampleGrad> {
    let (view, _) = augment_weak(sample, seed);
    let p = decoder_forward(student, &view.features)?;
    let params = config.match_params();
    let target = match config.matching_scheme {
        MatchingScheme::P2p => p2p_objective(&p, &view.gt_points, &params)?,
        MatchingScheme::P2r => p2r_objective(&p, &view.gt_points, &params)?,
    }
    .objective;
    let loss = weighted_bce(&p, &target, config.lambda)?;
    let up = bce_gradient(&p, &target, &ConfidenceMask::ones(p.len()), config.lambda)?;
    let grad = decoder_param_gradient(student, &view.features, &up)?;
    Ok(SampleGrad { loss, grad, pseudo: 0 })
}

fn unlabeled_gradient(
    student: &TinyDecoder,
    teacher: &TinyDecoder,
    sample: &SceneSample,
    config: &TrainConfig,
    weak_seed: u64,
    strong_seed: u64,
) -> Result<SampleGrad> {
    let (weak, _) = augment_weak(sample, weak_seed);
    let (pseudo_points, pseudo_scores) = extract_pseudo_labels(&decoder_forward(teacher, &weak.features)?);
    let (strong, valid) = augment_strong(&weak, strong_seed);
    let p = decoder_forward(student, &strong.features)?;
    let zeta = confidence_vector(&pseudo_scores, config.eta)?;
    let params = config.match_params();
    let (target, z) = match config.matching_scheme {
        MatchingScheme::P2p => {
            let res = p2p_objective(&p, &pseudo_points, &params)?;
            let z = p2p_confidence(&res.region, &zeta)?;
            (res.objective, z)
        }
        MatchingScheme::P2r => {
            let res = p2r_objective(&p, &pseudo_points, &params)?;
            let beta = res.neighborhood.as_ref().expect("region matching yields a mask");
            let z = p2r_confidence(&res.region, &zeta, beta)?;
            (res.objective, z)
        }
    };
    let z = z.restrict(&valid)?;
    let loss = masked_bce(&p, &target, &z, config.lambda)?;
    if config.matching_scheme == MatchingScheme::P2p && loss.background_term != 0.0 {
        return Err(Error::NumericFailure(format!(
            "one-to-one background term is {} instead of 0",
            loss.background_term
        )));
    }
    let up = bce_gradient(&p, &target, &z, config.lambda)?;
    let grad = decoder_param_gradient(student, &strong.features, &up)?;
    Ok(SampleGrad {
        loss,
        grad,
        pseudo: pseudo_points.len(),
    })
}

fn accumulate(total: &mut [f64], parts: &[SampleGrad], weight: f64) {
    for part in parts {
        for (t, g) in total.iter_mut().zip(&part.grad) {
            *t += weight * g;
        }
    }
}

/// Runs the full schedule. Numerical blow-ups stop the run early and are
/// reported in [`TrainOutcome::abort`] rather than as an error.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let labeled: Vec<&SceneSample> = dataset.train.iter().filter(|s| s.labeled).collect();
    let unlabeled: Vec<&SceneSample> = dataset.train.iter().filter(|s| !s.labeled).collect();
    if labeled.is_empty() {
        return Err(Error::Empty("labeled training set"));
    }
    let val: &[SceneSample] = if dataset.val.is_empty() { &dataset.train } else { &dataset.val };
    let channels = labeled[0].features.channels();

    let mut init_rng = rng_for(config.seed, STREAM_INIT, 0, 0);
    let mut student = TinyDecoder::init(config.decoder_kind(), config.receptive_field, channels, &mut init_rng)?;
    let mut teacher = student.clone();
    let mut adam = AdamState::new(student.num_params());
    let mut log = Vec::with_capacity(config.epochs);
    let mut warmup_teacher = None;

    let batch = config.batch_size;
    let steps = unlabeled.len().div_ceil(batch).max(labeled.len().div_ceil(batch)).max(1);

    for epoch in 0..config.epochs {
        let alpha = alpha_schedule(epoch, config);
        let mut order: Vec<usize> = (0..unlabeled.len()).collect();
        order.shuffle(&mut rng_for(config.seed, STREAM_SHUFFLE, epoch as u64, 0));
        let mut lab_order: Vec<usize> = (0..labeled.len()).collect();
        lab_order.shuffle(&mut rng_for(config.seed, STREAM_SHUFFLE, epoch as u64, 1));

        let (mut l_sum, mut u_sum, mut fg_sum, mut bg_sum, mut pseudo_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut u_count = 0usize;
        for step in 0..steps {
            let lab_ids: Vec<usize> = (0..batch.min(labeled.len()))
                .map(|k| lab_order[(step * batch + k) % labeled.len()])
                .collect();
            let lab_parts = lab_ids
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(config.seed, STREAM_WEAK, (epoch * steps + step) as u64, i as u64);
                    labeled_gradient(&student, labeled[i], config, seed)
                })
                .collect::<Result<Vec<_>>>()?;

            let un_ids: &[usize] = if alpha > 0.0 {
                let lo = (step * batch).min(order.len());
                &order[lo..(lo + batch).min(order.len())]
            } else {
                &[]
            };
            let un_parts = un_ids
                .par_iter()
                .map(|&i| {
                    let key = (epoch * steps + step) as u64;
                    let ws = derive_seed(config.seed, STREAM_WEAK, key, (labeled.len() + i) as u64);
                    let ss = derive_seed(config.seed, STREAM_STRONG, key, i as u64);
                    unlabeled_gradient(&student, &teacher, unlabeled[i], config, ws, ss)
                })
                .collect::<Result<Vec<_>>>()?;

            let mut grad = vec![0.0; student.num_params()];
            accumulate(&mut grad, &lab_parts, (1.0 - alpha) / lab_parts.len() as f64);
            let step_l = lab_parts.iter().map(|p| p.loss.total).sum::<f64>() / lab_parts.len() as f64;
            l_sum += step_l;
            let mut step_u = 0.0;
            if !un_parts.is_empty() {
                accumulate(&mut grad, &un_parts, alpha / un_parts.len() as f64);
                for part in &un_parts {
                    u_sum += part.loss.total;
                    fg_sum += part.loss.foreground_term;
                    bg_sum += part.loss.background_term;
                    pseudo_sum += part.pseudo as f64;
                    step_u += part.loss.total;
                }
                u_count += un_parts.len();
            }
            if !step_l.is_finite() || !step_u.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Ok(TrainOutcome {
                    log,
                    student,
                    teacher,
                    warmup_teacher,
                    abort: Some(AbortRecord {
                        epoch,
                        step,
                        reason: format!("non-finite loss or gradient (labeled {step_l}, unlabeled {step_u})"),
                    }),
                });
            }
            adam_step(student.params_mut(), &grad, &mut adam, config.lr_decoder)?;
            if student.params().iter().any(|v| !v.is_finite()) {
                return Ok(TrainOutcome {
                    log,
                    student,
                    teacher,
                    warmup_teacher,
                    abort: Some(AbortRecord {
                        epoch,
                        step,
                        reason: "non-finite decoder parameters after update".into(),
                    }),
                });
            }
            ema_update(teacher.params_mut(), student.params(), config.ema_momentum)?;
        }

        if epoch + 1 == config.warmup_epochs {
            warmup_teacher = Some(teacher.clone());
        }
        let eval_model = match config.eval_model {
            EvalModel::Teacher => &teacher,
            EvalModel::Student => &student,
        };
        let metrics = evaluate(eval_model, val)?;
        let per_u = |v: f64| if u_count == 0 { 0.0 } else { v / u_count as f64 };
        log.push(EpochRecord {
            epoch,
            alpha,
            labeled_loss: l_sum / steps as f64,
            unlabeled_loss: per_u(u_sum),
            unlabeled_fg: per_u(fg_sum),
            unlabeled_bg: per_u(bg_sum),
            pseudo_points: per_u(pseudo_sum),
            val_mae: metrics.mae,
            val_mse: metrics.mse,
            mean_pred_count: metrics.mean_pred_count,
            mean_true_count: metrics.mean_true_count,
        });
    }
    Ok(TrainOutcome {
        log,
        student,
        teacher,
        warmup_teacher,
        abort: None,
    })
}
