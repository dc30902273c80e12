//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::load_config;
use crate::counter::{decoder_forward, load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::loss::weighted_bce;
use crate::manifest::{unix_now, write_atomic, RunManifest};
use crate::matching::{p2p_objective, p2r_objective, p2r_objective_parallel, MatchParams, ScoreTransform, DEFAULT_MU, DEFAULT_TAU};
use crate::points::load_points;
use crate::psam::{aggregate_psam, all_pixel_psam, AggregateMode, BlockDecoder, FOREGROUND_THRESHOLD};
use crate::semisup::{evaluate, generate_dataset, load_dataset, save_dataset, DatasetSpec, SceneParams, TrainConfig};
use crate::tensor::{load_tensor, save_tensor, DType, Tensor};
use crate::types::{PointAnnotation, ScoreMap};

#[derive(Debug, Parser)]
#[command(name = "p2r", version, about = "Point matching losses, activation maps and desk-scale training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    Gen(GenArgs),
    /// Match a score map against annotated points.
    Match(MatchArgs),
    /// Export point-specific activation maps for one feature map.
    Psam(PsamArgs),
    /// Train a decoder with the mean-teacher loop.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Time the full one-to-one loss against the region loss.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointRange {
    pub min: usize,
    pub max: usize,
}

fn parse_point_range(s: &str) -> std::result::Result<PointRange, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected `a..b`, got `{s}`"))?;
    let min: usize = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
    let max: usize = b.trim().parse().map_err(|_| format!("bad range end `{b}`"))?;
    if min > max {
        return Err(format!("empty range `{s}`"));
    }
    Ok(PointRange { min, max })
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    #[arg(long, default_value_t = 50)]
    pub val_scenes: usize,
    #[arg(long, default_value = "4..12", value_parser = parse_point_range)]
    pub points_range: PointRange,
    /// Grid height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [24, 24])]
    pub size: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.05)]
    pub labeled_frac: f64,
    #[arg(long, default_value_t = SceneParams::default().noise_sigma)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long, value_parser = ["p2p", "p2r"])]
    pub scheme: String,
    /// Score map tensor (`h x w`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Point CSV.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Region radius; only meaningful for p2r (default 64).
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, default_value = "inverse_sigmoid")]
    pub transform: ScoreTransform,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PsamArgs {
    /// Feature map tensor (`c x h x w`).
    #[arg(long)]
    pub features: PathBuf,
    /// Checkpoint metadata file (`*.meta.json`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "mean", value_parser = ["mean", "global"])]
    pub aggregate: String,
    /// Expected receptive field; must match the checkpoint when given.
    #[arg(long)]
    pub receptive_field: Option<usize>,
}

/// Every training key can be given as a flag; flags override the config
/// file, which overrides the built-in defaults.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = ["p2p", "p2r"])]
    pub scheme: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub warmup_epochs: Option<String>,
    #[arg(long)]
    pub alpha_step: Option<String>,
    #[arg(long)]
    pub alpha_cap: Option<String>,
    #[arg(long)]
    pub eta: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub mu: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub ema_momentum: Option<String>,
    #[arg(long)]
    pub lr_decoder: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub score_transform: Option<String>,
    #[arg(long)]
    pub decoder: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub receptive_field: Option<String>,
    #[arg(long)]
    pub eval_model: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 18] = [
            ("matching_scheme", &self.scheme),
            ("epochs", &self.epochs),
            ("warmup_epochs", &self.warmup_epochs),
            ("alpha_step", &self.alpha_step),
            ("alpha_cap", &self.alpha_cap),
            ("eta", &self.eta),
            ("tau", &self.tau),
            ("mu", &self.mu),
            ("lambda", &self.lambda),
            ("ema_momentum", &self.ema_momentum),
            ("lr_decoder", &self.lr_decoder),
            ("batch_size", &self.batch_size),
            ("score_transform", &self.score_transform),
            ("decoder", &self.decoder),
            ("hidden", &self.hidden),
            ("receptive_field", &self.receptive_field),
            ("eval_model", &self.eval_model),
            ("seed", &self.seed),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint metadata file (`*.meta.json`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "val", value_parser = ["val", "train", "all"])]
    pub split: String,
    /// Where to write `eval.json` and the run manifest (defaults to the
    /// checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 8640)]
    pub n: usize,
    #[arg(long, default_value_t = 775)]
    pub m: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spread the region search over all cores.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn csv_file<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<PathBuf> {
    let err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Runs a parsed command. Returns the path of the run manifest.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Match(a) => cmd_match(&a),
        Command::Psam(a) => cmd_psam(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<PathBuf> {
    let started = unix_now();
    let spec = DatasetSpec {
        scenes: args.scenes,
        val_scenes: args.val_scenes,
        points_min: args.points_range.min,
        points_max: args.points_range.max,
        labeled_frac: args.labeled_frac,
        scene: SceneParams {
            height: args.size[0],
            width: args.size[1],
            channels: args.channels,
            noise_sigma: args.noise,
            amplitude: args.amplitude,
            ..SceneParams::default()
        },
        seed: args.seed,
    };
    let dataset = generate_dataset(&spec)?;
    ensure_dir(&args.out)?;
    let files = save_dataset(&dataset, &args.out)?;
    let mut manifest = RunManifest::new("gen", json!(spec), Some(args.seed), started);
    manifest.add_outputs(&args.out, &files)?;
    manifest.finish(&args.out.join("run_gen.json"))
}

#[derive(Serialize)]
struct ChosenRow {
    point: usize,
    pixel: usize,
    row: f64,
    col: f64,
    cost: f64,
}

pub fn cmd_match(args: &MatchArgs) -> Result<PathBuf> {
    let started = unix_now();
    if args.scheme == "p2p" && args.mu.is_some() {
        return Err(Error::InvalidParameter("--mu only applies to the p2r scheme".into()));
    }
    let pred = load_tensor(&args.pred)?.into_score_map()?;
    let gt = load_points(&args.gt, Some(pred.shape()))?;
    let params = MatchParams {
        tau: args.tau,
        mu: args.mu.unwrap_or(DEFAULT_MU),
        transform: args.transform,
    };
    let result = if args.scheme == "p2p" {
        p2p_objective(&pred, &gt, &params)?
    } else {
        p2r_objective(&pred, &gt, &params)?
    };
    let loss = weighted_bce(&pred, &result.objective, args.lambda)?;

    ensure_dir(&args.out)?;
    let objective = Tensor::new(vec![pred.height(), pred.width()], result.objective.clone())?;
    let obj_path = args.out.join("objective.p2rt");
    save_tensor(&obj_path, &objective, DType::F64)?;

    let triplets: Vec<(usize, usize, u8)> = result
        .region
        .rows()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|j| (i, j, 1u8)))
        .collect();
    let region_path = csv_file(&args.out.join("region.csv"), &triplets, &["pixel", "point", "value"])?;

    let shape = pred.shape();
    let chosen: Vec<ChosenRow> = result
        .chosen_pixels
        .iter()
        .zip(&result.chosen_costs)
        .enumerate()
        .map(|(j, (&i, &cost))| {
            let [row, col] = shape.coords_unchecked(i);
            ChosenRow {
                point: j,
                pixel: i,
                row,
                col,
                cost,
            }
        })
        .collect();
    let chosen_path = csv_file(&args.out.join("chosen.csv"), &chosen, &["point", "pixel", "row", "col", "cost"])?;

    let summary = json!({
        "scheme": args.scheme,
        "pixels": pred.len(),
        "points": gt.len(),
        "total_cost": result.total_cost(),
        "foreground_pixels": result.objective.iter().filter(|&&v| v == 1.0).count(),
        "neighborhood_pixels": result.neighborhood.as_ref().map(|b| b.beta.iter().filter(|&&v| v == 1.0).count()),
        "loss": { "total": loss.total, "foreground": loss.foreground_term, "background": loss.background_term },
    });
    let summary_path = write_file(
        &args.out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;

    let config = json!({
        "scheme": args.scheme, "pred": args.pred, "gt": args.gt, "tau": args.tau,
        "mu": args.mu, "transform": args.transform, "lambda": args.lambda,
    });
    let mut manifest = RunManifest::new("match", config, None, started);
    manifest.add_outputs(&args.out, &[obj_path, region_path, chosen_path, summary_path])?;
    manifest.finish(&args.out.join("run_match.json"))
}

#[derive(Serialize)]
struct ForegroundRow {
    index: usize,
    pixel: usize,
    row: f64,
    col: f64,
    score: f64,
    patch_mean: f64,
}

pub fn cmd_psam(args: &PsamArgs) -> Result<PathBuf> {
    let started = unix_now();
    let mode: AggregateMode = args.aggregate.parse()?;
    let decoder = load_checkpoint(&args.checkpoint)?;
    let r = decoder.receptive_field();
    if let Some(req) = args.receptive_field {
        if req != r {
            return Err(Error::shape("receptive field", r, req));
        }
    }
    let features = load_tensor(&args.features)?.into_feature_map()?;
    let scores = decoder_forward(&decoder, &features)?;
    let patches = all_pixel_psam(&features, &decoder)?;
    let shape = features.shape();

    let cells = r * r;
    let mut fg_values = Vec::new();
    let mut rows = Vec::new();
    for (q, &p) in scores.values().iter().enumerate() {
        if p > FOREGROUND_THRESHOLD {
            let patch = patches.patch(q);
            let [row, col] = shape.coords_unchecked(q);
            rows.push(ForegroundRow {
                index: rows.len(),
                pixel: q,
                row,
                col,
                score: p,
                patch_mean: patch.iter().sum::<f64>() / cells as f64,
            });
            fg_values.extend_from_slice(patch);
        }
    }

    ensure_dir(&args.out)?;
    let patches_path = args.out.join("patches.p2rt");
    save_tensor(&patches_path, &Tensor::new(vec![rows.len(), r, r], fg_values)?, DType::F64)?;
    let fg_path = csv_file(
        &args.out.join("foreground.csv"),
        &rows,
        &["index", "pixel", "row", "col", "score", "patch_mean"],
    )?;
    let agg = aggregate_psam(&patches, &scores, mode)?;
    let agg_path = args.out.join("aggregate.p2rt");
    save_tensor(&agg_path, &Tensor::new(vec![agg.height, agg.width], agg.values.clone())?, DType::F64)?;
    let mut sorted = agg.values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let ranked: Vec<(usize, f64)> = sorted.into_iter().enumerate().collect();
    let sorted_path = csv_file(&args.out.join("sorted_values.csv"), &ranked, &["rank", "value"])?;
    let scores_path = args.out.join("scores.p2rt");
    save_tensor(&scores_path, &Tensor::from(&scores), DType::F64)?;

    let config = json!({
        "features": args.features, "checkpoint": args.checkpoint,
        "aggregate": mode, "receptive_field": r, "foreground": rows.len(),
    });
    let mut manifest = RunManifest::new("psam", config, None, started);
    manifest.add_outputs(&args.out, &[patches_path, fg_path, agg_path, sorted_path, scores_path])?;
    manifest.finish(&args.out.join("run_psam.json"))
}

/// Resolves defaults, then the config file, then flags.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = &args.config {
        for (k, v) in load_config(path)? {
            config.set(&k, &v).map_err(|e| match e {
                Error::InvalidParameter(m) => Error::Parse {
                    path: path.clone(),
                    message: m,
                },
                other => other,
            })?;
        }
    }
    for (k, v) in args.overrides() {
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let started = unix_now();
    let config = resolve_train_config(args)?;
    let dataset = load_dataset(&args.data)?;
    let outcome = crate::semisup::train(&dataset, &config)?;

    ensure_dir(&args.out)?;
    let mut files = vec![write_file(&args.out.join(TRAIN_LOG), &outcome.log_jsonl())?];
    files.push(write_file(
        &args.out.join("config.json"),
        &(serde_json::to_string_pretty(&config).expect("config serializes") + "\n"),
    )?);
    files.extend(save_checkpoint(&outcome.student, &args.out, "student")?);
    files.extend(save_checkpoint(&outcome.teacher, &args.out, "teacher")?);
    if let Some(w) = &outcome.warmup_teacher {
        files.extend(save_checkpoint(w, &args.out, "warmup")?);
    }
    let mut manifest = RunManifest::new("train", json!(config), Some(config.seed), started);
    manifest.add_outputs(&args.out, &files)?;
    let path = manifest.finish(&args.out.join("run_train.json"))?;
    if let Some(abort) = &outcome.abort {
        return Err(Error::NumericFailure(format!(
            "training aborted at epoch {} step {}: {}",
            abort.epoch, abort.step, abort.reason
        )));
    }
    Ok(path)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    let started = unix_now();
    let decoder = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let samples = match args.split.as_str() {
        "train" => dataset.train,
        "val" => dataset.val,
        _ => dataset.train.into_iter().chain(dataset.val).collect(),
    };
    let metrics = evaluate(&decoder, &samples)?;
    let report = json!({
        "mae": metrics.mae,
        "mse": metrics.mse,
        "mean_pred_count": metrics.mean_pred_count,
        "mean_true_count": metrics.mean_true_count,
        "scenes": samples.len(),
    });
    let line = report.to_string();
    println!("{line}");
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    ensure_dir(&out)?;
    let eval_path = write_file(&out.join("eval.json"), &(line + "\n"))?;
    let config = json!({ "data": args.data, "checkpoint": args.checkpoint, "split": args.split });
    let mut manifest = RunManifest::new("eval", config, None, started);
    manifest.add_outputs(&out, &[eval_path])?;
    manifest.finish(&out.join("run_eval.json"))
}

/// Grid with `h * w = n`, as square as possible.
pub fn bench_grid(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt().floor() as usize;
    while h > 1 && n % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

/// Random scores and points for a timing run.
pub fn bench_instance(n: usize, m: usize, seed: u64) -> Result<(ScoreMap, PointAnnotation)> {
    if n < m {
        return Err(Error::InvalidParameter(format!("bench needs n >= m, got n={n} m={m}")));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("bench needs n > 0".into()));
    }
    let (h, w) = bench_grid(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    // Distinct pixels, so every point owns at least its own pixel.
    let points: Vec<[f64; 2]> = rand::seq::index::sample(&mut rng, n, m)
        .into_iter()
        .map(|q| [(q / w) as f64, (q % w) as f64])
        .collect();
    Ok((ScoreMap::new(scores, h, w)?, PointAnnotation::new(points)?))
}

/// Full one-to-one loss: cost matrix, assignment and cross-entropy.
pub fn p2p_full_loss(pred: &ScoreMap, gt: &PointAnnotation) -> Result<f64> {
    let res = p2p_objective(pred, gt, &MatchParams::default())?;
    Ok(weighted_bce(pred, &res.objective, 1.0)?.total)
}

/// Full region loss: nearest-point regions, per-region selection and
/// cross-entropy.
pub fn p2r_full_loss(pred: &ScoreMap, gt: &PointAnnotation, parallel: bool) -> Result<f64> {
    let params = MatchParams {
        mu: f64::INFINITY,
        ..MatchParams::default()
    };
    let res = if parallel {
        p2r_objective_parallel(pred, gt, &params)?
    } else {
        p2r_objective(pred, gt, &params)?
    };
    Ok(weighted_bce(pred, &res.objective, 1.0)?.total)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub m: usize,
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
    pub parallel: bool,
    pub p2p_mean_s: f64,
    pub p2p_median_s: f64,
    pub p2r_mean_s: f64,
    pub p2r_median_s: f64,
    /// Ratio of medians, one-to-one over region.
    pub speedup: f64,
    pub p2p_times_s: Vec<f64>,
    pub p2r_times_s: Vec<f64>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

pub fn run_bench(n: usize, m: usize, repeats: usize, seed: u64, parallel: bool) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be positive".into()));
    }
    let (pred, gt) = bench_instance(n, m, seed)?;
    let mut p2p_times = Vec::with_capacity(repeats);
    let mut p2r_times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(p2p_full_loss(std::hint::black_box(&pred), &gt)?);
        p2p_times.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(p2r_full_loss(std::hint::black_box(&pred), &gt, parallel)?);
        p2r_times.push(t.elapsed().as_secs_f64());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p2p_median_s, p2r_median_s) = (median(&p2p_times), median(&p2r_times));
    Ok(BenchReport {
        n,
        m,
        height: pred.height(),
        width: pred.width(),
        repeats,
        parallel,
        p2p_mean_s: mean(&p2p_times),
        p2p_median_s,
        p2r_mean_s: mean(&p2r_times),
        p2r_median_s,
        speedup: p2p_median_s / p2r_median_s,
        p2p_times_s: p2p_times,
        p2r_times_s: p2r_times,
    })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<PathBuf> {
    let started = unix_now();
    let report = run_bench(args.n, args.m, args.repeats, args.seed, args.parallel)?;
    ensure_dir(&args.out)?;
    let rows: Vec<(usize, f64, f64)> = report
        .p2p_times_s
        .iter()
        .zip(&report.p2r_times_s)
        .enumerate()
        .map(|(i, (&a, &b))| (i, a, b))
        .collect();
    let csv_path = csv_file(&args.out.join("bench.csv"), &rows, &["repeat", "p2p_s", "p2r_s"])?;
    let json_path = args.out.join("bench.json");
    write_atomic(
        &json_path,
        (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes(),
    )?;
    println!(
        "p2p median {:.4}s, p2r median {:.4}s, speedup {:.1}x",
        report.p2p_median_s, report.p2r_median_s, report.speedup
    );
    let config = json!({ "n": args.n, "m": args.m, "repeats": args.repeats, "parallel": args.parallel });
    let mut manifest = RunManifest::new("bench", config, Some(args.seed), started);
    manifest.add_outputs(&args.out, &[csv_path, json_path])?;
    manifest.finish(&args.out.join("run_bench.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_range_parsing() {
        assert_eq!(parse_point_range("4..12").unwrap(), PointRange { min: 4, max: 12 });
        assert!(parse_point_range("12..4").is_err());
        assert!(parse_point_range("4-12").is_err());
    }

    #[test]
    fn bench_grid_factors() {
        assert_eq!(bench_grid(8640), (90, 96));
        assert_eq!(bench_grid(1), (1, 1));
        assert_eq!(bench_grid(7), (1, 7));
    }

    #[test]
    fn bench_instance_rules() {
        assert!(bench_instance(3, 4, 0).is_err());
        let (p, g) = bench_instance(20, 5, 1).unwrap();
        assert_eq!((p.len(), g.len()), (20, 5));
        assert_eq!(bench_instance(20, 5, 1).unwrap().0, p);
    }

    #[test]
    fn tiny_bench_reports_ratio() {
        let r = run_bench(1, 1, 3, 0, false).unwrap();
        assert!(r.speedup.is_finite() && r.speedup > 0.0);
        assert_eq!(r.p2p_times_s.len(), 3);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("desk.cfg");
        std::fs::write(&cfg, "epochs = 50\nwarmup_epochs = 10\nmatching_scheme = p2p\n").unwrap();
        let args = Cli::parse_from([
            "p2r", "train", "--data", "d", "--out", "o", "--config", cfg.to_str().unwrap(), "--epochs", "60", "--scheme",
            "p2r",
        ]);
        let Command::Train(t) = args.command else { panic!() };
        let c = resolve_train_config(&t).unwrap();
        assert_eq!((c.epochs, c.warmup_epochs), (60, 10));
        assert_eq!(c.matching_scheme, crate::semisup::MatchingScheme::P2r);

        std::fs::write(&cfg, "epochz = 5\n").unwrap();
        assert!(matches!(resolve_train_config(&t), Err(Error::Parse { .. })));
    }
}
