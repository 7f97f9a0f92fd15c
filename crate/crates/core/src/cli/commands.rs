use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::colormap::write_depth_png;
use super::config::{ExperimentConfig, GridValue, SweepKind};
use super::plot::{line_chart, Series};
use crate::data::{
    load_dataset, load_samples, render_scene, write_dataset, BatchMode, DatasetProfile, DatasetSplit, LabeledSample,
    Manifest, SceneConfig,
};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{evaluate_model, Aggregation, MetricReport, CSV_FIELDS};
use crate::models::checkpoint::load_network;
use crate::models::{Network, NetworkSpec};
use crate::seed;
use crate::trainer::{self, Discriminators, TrainConfig, TrainOptions, TrainOutcome, CURVE_FILE, EPOCHS_FILE, FINAL_FILE};

const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_SUBSET: u64 = 3;
const STREAM_CROP: u64 = 4;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const ADAPT_REPORT: &str = "adapt_report.json";
/// Grid value standing for the adversarial semi-supervised mode in a loss sweep.
pub const SEMI_MODE: &str = "semi";

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Renders a synthetic corpus into `out_dir`.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<Manifest> {
    let s = &cfg.synth;
    let out = &cfg.out_dir;
    if is_nonempty_dir(out) {
        if !s.force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
        for sub in ["images", "depths", "semantic"] {
            let p = out.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(p)?;
            }
        }
    }
    let scene = SceneConfig::preset(&s.scene)?;
    let profile = DatasetProfile::parse(&s.profile)?;
    let size = (s.height, s.width);
    let labeled = (0..s.n_labeled as u64)
        .into_par_iter()
        .map(|i| render_scene(seed::derive(cfg.seed, &[STREAM_LABELED, i]), size, &scene))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = (0..s.n_unlabeled as u64)
        .into_par_iter()
        .map(|i| render_scene(seed::derive(cfg.seed, &[STREAM_UNLABELED, i]), size, &scene).map(|r| r.rgb))
        .collect::<Result<Vec<_>>>()?;
    let scale = s.depth_scale.unwrap_or((scene.far_m / 65_000.0).max(0.001));
    let manifest = write_dataset(out, &labeled, &unlabeled, scale, profile, cfg.seed)?;
    cfg.write_resolved(out)?;
    info!("wrote {} labeled and {} unlabeled scenes to {}", s.n_labeled, s.n_unlabeled, out.display());
    Ok(manifest)
}

fn read_csv_columns(path: &Path, x: &str, ys: &[&str]) -> Result<Vec<Series>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Data(format!("{} has no column {name}", path.display())))
    };
    let xi = col(x)?;
    let yi = ys.iter().map(|y| col(y)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let num = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
    Ok(ys
        .iter()
        .zip(yi)
        .map(|(name, i)| Series {
            name: name.to_string(),
            points: rows.iter().map(|r| (num(r[xi]), num(r[i]))).collect(),
        })
        .collect())
}

/// Convergence plots from the curve files of a run directory.
pub fn plot_run(dir: &Path) -> Result<()> {
    let curve = dir.join(CURVE_FILE);
    if curve.exists() {
        let g = read_csv_columns(&curve, "step", &["loss_g", "loss_l1"])?;
        line_chart(&dir.join("curve_generator.svg"), "generator losses", "step", "loss", &g)?;
        let d = read_csv_columns(&curve, "step", &["loss_pd", "loss_dd"])?;
        line_chart(&dir.join("curve_discriminators.svg"), "discriminator losses", "step", "loss", &d)?;
    }
    let epochs = dir.join(EPOCHS_FILE);
    if epochs.exists() {
        let e = read_csv_columns(&epochs, "epoch", &["l1", "rmse"])?;
        line_chart(&dir.join("curve_epochs.svg"), "per-epoch evaluation", "epoch", "error", &e)?;
    }
    Ok(())
}

fn write_report(dir: &Path, name: &str, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_JSON), report.to_json()?)?;
    fs::write(dir.join(METRICS_CSV), report.csv(name) + "\n")?;
    Ok(())
}

fn test_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    let (labeled, _) = load_samples(path, None)?;
    if labeled.is_empty() {
        return Err(Error::Data(format!("{} has no labeled samples to evaluate", path.display())));
    }
    Ok(labeled)
}

fn run_training(cfg: &TrainConfig, split: &DatasetSplit, dir: &Path, resume: Option<PathBuf>) -> Result<TrainOutcome> {
    let outcome = trainer::train(
        cfg,
        split,
        &TrainOptions {
            out_dir: Some(dir.to_path_buf()),
            resume,
            stop_after_steps: None,
        },
    )?;
    plot_run(dir)?;
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub plateaued: bool,
    pub test: Option<MetricReport>,
}

/// Trains on `data.path`, writes checkpoints, curves and plots into
/// `out_dir`, and reports on `data.test_path` when set.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let split = load_dataset(cfg.data_path()?, cfg.data.manifest.as_deref())?;
    let test = cfg.data.test_path.as_deref().map(test_samples).transpose()?;
    cfg.write_resolved(&cfg.out_dir)?;
    let outcome = run_training(&cfg.train, &split, &cfg.out_dir, cfg.resume.clone())?;
    let report = match &test {
        Some(t) => {
            let r = evaluate_model(&outcome.state.g, t, None, Aggregation::Pixel)?.report;
            write_report(&cfg.out_dir, "test", &r)?;
            Some(r)
        }
        None => None,
    };
    Ok(TrainSummary {
        steps: outcome.state.counters.step,
        epochs: outcome.state.epoch,
        plateaued: outcome.plateaued,
        test: report,
    })
}

fn load_generator(path: &Path) -> Result<Network> {
    let g = load_network(path)?;
    match g.spec() {
        NetworkSpec::Generator(_) => Ok(g),
        other => Err(Error::SpecMismatch(format!("{} holds a {}, not a generator", path.display(), other.role()))),
    }
}

/// Evaluates a generator checkpoint on a labeled dataset.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let e = &cfg.eval;
    let ckpt = e.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(FINAL_FILE));
    let dataset = e
        .dataset
        .clone()
        .or_else(|| cfg.data.test_path.clone())
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| Error::Config("no dataset to evaluate: set eval.dataset".into()))?;
    let g = load_generator(&ckpt)?;
    let samples = test_samples(&dataset)?;
    let bounds = e
        .profile
        .as_deref()
        .map(DatasetProfile::parse)
        .transpose()?
        .map(DatasetProfile::mask_bounds);
    let eval = evaluate_model(&g, &samples, bounds, e.aggregation)?;
    cfg.write_resolved(&cfg.out_dir)?;
    write_report(&cfg.out_dir, "eval", &eval.report)?;
    if e.visualize {
        let viz = cfg.out_dir.join("viz");
        fs::create_dir_all(&viz)?;
        for (i, (s, pred)) in samples.iter().zip(&eval.predictions).take(e.max_visualizations).enumerate() {
            let (h, w) = (s.depth.height(), s.depth.width());
            write_depth_png(&viz.join(format!("{i:04}_pred.png")), h, w, pred, None)?;
            write_depth_png(&viz.join(format!("{i:04}_gt.png")), h, w, s.depth.values(), Some(s.mask.values()))?;
        }
    }
    Ok(eval.report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// `ok`, or the error that stopped this grid point.
    pub status: String,
    pub report: Option<MetricReport>,
}

pub fn sweep_csv_header() -> String {
    format!("kind,value,seed,n_labeled,n_unlabeled,status,{}", CSV_FIELDS.join(","))
}

fn sweep_csv_row(kind: SweepKind, r: &SweepRow) -> String {
    let metrics = match &r.report {
        Some(m) => format!(
            "{},{},{},{},{},{},{},{}",
            m.rel, m.rmse, m.rmse_log, m.log10, m.delta1, m.delta2, m.delta3, m.n_pixels
        ),
        None => vec!["NaN"; CSV_FIELDS.len()].join(","),
    };
    let status = r.status.replace([',', '\n'], ";");
    format!("{},{},{},{},{},{status},{metrics}", kind.name(), r.value, r.seed, r.n_labeled, r.n_unlabeled)
}

/// Seed of one grid point: the master seed hashed with the point label,
/// kept below 2^63 so that it stays representable in config files.
pub fn point_seed(master: u64, kind: SweepKind, label: &str) -> u64 {
    seed::derive_str(master, &format!("{}={label}", kind.name())) >> 1
}

/// The first `k` entries of a fixed permutation, in original order, so that
/// smaller grid points use subsets of larger ones.
fn nested_subset<T: Clone>(items: &[T], k: usize, master: u64, stream: u64) -> Result<Vec<T>> {
    if k > items.len() {
        return Err(Error::Data(format!("requested {k} samples, only {} available", items.len())));
    }
    let mut idx = seed::permutation(items.len(), master, &[STREAM_SUBSET, stream])[..k].to_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}

/// Training configuration and data of one grid point.
pub fn sweep_point(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    value: &GridValue,
) -> Result<(TrainConfig, DatasetSplit)> {
    let kind = cfg.sweep.kind;
    let mut t = cfg.train.clone();
    t.seed = point_seed(cfg.seed, kind, &value.label());
    let mut s = split.clone();
    match kind {
        SweepKind::LabelCount => {
            let k = value.as_count()?;
            if k == 0 {
                return Err(Error::Config("label_count must be positive".into()));
            }
            s.labeled = nested_subset(&split.labeled, k, cfg.seed, 0)?;
        }
        SweepKind::UnlabeledCount => {
            let k = value.as_count()?;
            s.unlabeled = nested_subset(&split.unlabeled, k, cfg.seed, 1)?;
            if k == 0 {
                warn!("no unlabeled images: training supervised only");
                t.batching = BatchMode::Supervised;
            }
        }
        SweepKind::LossKind => {
            let name = value.label();
            if name != SEMI_MODE {
                t.regression_loss = Some(LossKind::parse(&name)?);
                t.batching = BatchMode::Supervised;
                t.warmup_steps = Some(0);
            }
        }
        SweepKind::Lambda => {
            let l = value
                .as_f64()
                .ok_or_else(|| Error::Config(format!("'{}' is not a weight", value.label())))?;
            if l == 0.0 {
                t.discriminators = Discriminators::DdOnly;
            } else {
                t.weights.lambda = l;
            }
        }
    }
    t.validate()?;
    Ok((t, s))
}

fn point_dir(out: &Path, kind: SweepKind, label: &str) -> PathBuf {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    out.join(format!("{}_{safe}", kind.name()))
}

/// One training and evaluation run per grid value, an aggregated CSV and
/// metric-versus-grid plots. A failing point is recorded and skipped.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let kind = cfg.sweep.kind;
    let mut grid = cfg.sweep.grid.clone();
    if grid.is_empty() {
        return Err(Error::Config("sweep.grid is empty".into()));
    }
    if kind == SweepKind::LossKind && !grid.iter().any(|v| v.label() == SEMI_MODE) {
        grid.push(GridValue::Text(SEMI_MODE.into()));
    }
    let test_path = cfg
        .data
        .test_path
        .as_deref()
        .ok_or_else(|| Error::Config("a sweep needs data.test_path".into()))?;
    let split = load_dataset(cfg.data_path()?, cfg.data.manifest.as_deref())?;
    let test = test_samples(test_path)?;
    cfg.write_resolved(&cfg.out_dir)?;

    let mut rows = Vec::new();
    for value in &grid {
        let label = value.label();
        let dir = point_dir(&cfg.out_dir, kind, &label);
        let seed = point_seed(cfg.seed, kind, &label);
        let run = || -> Result<(usize, usize, MetricReport)> {
            let (t, s) = sweep_point(cfg, &split, value)?;
            let mut point_cfg = cfg.clone();
            point_cfg.out_dir = dir.clone();
            point_cfg.train = t.clone();
            point_cfg.seed = t.seed;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("point_config.toml"), point_cfg.to_toml()?)?;
            let out = run_training(&t, &s, &dir, None)?;
            let r = evaluate_model(&out.state.g, &test, None, Aggregation::Pixel)?.report;
            write_report(&dir, &label, &r)?;
            Ok((s.labeled.len(), s.unlabeled.len(), r))
        };
        let row = match run() {
            Ok((n_l, n_u, r)) => {
                info!("{}={label}: rmse {:.4} rel {:.4}", kind.name(), r.rmse, r.rel);
                SweepRow {
                    value: label,
                    seed,
                    n_labeled: n_l,
                    n_unlabeled: n_u,
                    status: "ok".into(),
                    report: Some(r),
                }
            }
            Err(e) => {
                warn!("{}={label} failed: {e}", kind.name());
                SweepRow {
                    value: label,
                    seed,
                    n_labeled: 0,
                    n_unlabeled: 0,
                    status: format!("failed: {e}"),
                    report: None,
                }
            }
        };
        rows.push(row);
        let mut text = vec![sweep_csv_header()];
        text.extend(rows.iter().map(|r| sweep_csv_row(kind, r)));
        fs::write(cfg.out_dir.join(SWEEP_CSV), text.join("\n") + "\n")?;
    }
    plot_sweep(&cfg.out_dir, kind, &rows)?;
    Ok(rows)
}

fn plot_sweep(dir: &Path, kind: SweepKind, rows: &[SweepRow]) -> Result<()> {
    let numeric = kind != SweepKind::LossKind;
    let x = |i: usize, r: &SweepRow| if numeric { r.value.parse().unwrap_or(f64::NAN) } else { i as f64 };
    let x_label = if numeric {
        kind.name().to_string()
    } else {
        let names: Vec<&str> = rows.iter().map(|r| r.value.as_str()).collect();
        format!("grid index ({})", names.join(", "))
    };
    for (metric, pick) in [
        ("rmse", (|m: &MetricReport| m.rmse) as fn(&MetricReport) -> f64),
        ("rel", |m| m.rel),
        ("delta1", |m| m.delta1),
    ] {
        let points = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (x(i, r), r.report.as_ref().map_or(f64::NAN, pick)))
            .collect();
        let s = [Series {
            name: metric.into(),
            points,
        }];
        line_chart(&dir.join(format!("sweep_{metric}.svg")), &format!("{metric} vs {}", kind.name()), &x_label, metric, &s)?;
    }
    Ok(())
}

/// Random `h`×`w` crops of every source sample, `per_sample` each.
pub fn random_crops(samples: &[LabeledSample], (h, w): (usize, usize), per_sample: usize, master: u64) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(samples.len() * per_sample);
    for (i, s) in samples.iter().enumerate() {
        let (sh, sw) = (s.image.height(), s.image.width());
        if sh < h || sw < w {
            return Err(Error::Data(format!("source {sw}x{sh} is smaller than the {w}x{h} target crop")));
        }
        for c in 0..per_sample {
            let mut rng = seed::rng(master, &[STREAM_CROP, i as u64, c as u64]);
            let top = rng.random_range(0..=sh - h);
            let left = rng.random_range(0..=sw - w);
            out.push(s.crop(top, left, h, w)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptReport {
    pub crop: (usize, usize),
    pub n_source: usize,
    pub n_target_unlabeled: usize,
    pub n_target_eval: usize,
    pub adapted: Option<MetricReport>,
    pub source_only: Option<MetricReport>,
}

/// Source-labeled plus target-unlabeled training with source crops aligned
/// to the target resolution, optionally against a source-only baseline.
pub fn cmd_adapt(cfg: &ExperimentConfig) -> Result<AdaptReport> {
    let a = &cfg.adapt;
    let source_path = a.source.as_deref().ok_or_else(|| Error::Config("adapt.source is not set".into()))?;
    let target_path = a.target.as_deref().ok_or_else(|| Error::Config("adapt.target is not set".into()))?;
    if a.crops_per_sample == 0 {
        return Err(Error::Config("adapt.crops_per_sample must be positive".into()));
    }
    let source = load_dataset(source_path, None)?;
    let (target_labeled, target_images) = load_samples(target_path, None)?;
    let eval_set = match &a.target_eval {
        Some(p) => test_samples(p)?,
        None => target_labeled,
    };
    let crop = match a.crop {
        Some(c) => c,
        None => target_images
            .first()
            .map(|u| (u.image.height(), u.image.width()))
            .or_else(|| eval_set.first().map(|s| (s.image.height(), s.image.width())))
            .ok_or_else(|| Error::Config("target has no images; set adapt.crop".into()))?,
    };
    if let Some(u) = target_images.iter().find(|u| (u.image.height(), u.image.width()) != crop) {
        return Err(Error::Data(format!(
            "target image {}x{} does not match the {}x{} crop",
            u.image.width(),
            u.image.height(),
            crop.1,
            crop.0
        )));
    }
    let labeled = random_crops(&source.labeled, crop, a.crops_per_sample, cfg.seed)?;
    let n_source = labeled.len();
    let mut t = cfg.train.clone();
    if target_images.is_empty() {
        warn!("target pool is empty: training on the source alone");
        t.batching = BatchMode::Supervised;
    }
    let split = DatasetSplit::new(labeled, target_images, source.seed)?;
    cfg.write_resolved(&cfg.out_dir)?;

    let evaluate = |g: &Network, name: &str, dir: &Path| -> Result<Option<MetricReport>> {
        if eval_set.is_empty() {
            return Ok(None);
        }
        let r = evaluate_model(g, &eval_set, None, Aggregation::Pixel)?.report;
        write_report(dir, name, &r)?;
        Ok(Some(r))
    };
    let adapt_dir = cfg.out_dir.join("adapt");
    let adapted = run_training(&t, &split, &adapt_dir, None)?;
    let adapted_report = evaluate(&adapted.state.g, "adapt", &adapt_dir)?;
    let source_only = if a.compare_source_only {
        let dir = cfg.out_dir.join("source_only");
        let base = TrainConfig {
            batching: BatchMode::Supervised,
            ..t.clone()
        };
        let only = DatasetSplit {
            unlabeled: Vec::new(),
            ..split.clone()
        };
        let out = run_training(&base, &only, &dir, None)?;
        evaluate(&out.state.g, "source_only", &dir)?
    } else {
        None
    };
    if eval_set.is_empty() {
        warn!("no labeled target samples: skipping the cross-domain report");
    }
    let report = AdaptReport {
        crop,
        n_source,
        n_target_unlabeled: split.unlabeled.len(),
        n_target_eval: eval_set.len(),
        adapted: adapted_report,
        source_only,
    };
    fs::write(cfg.out_dir.join(ADAPT_REPORT), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
