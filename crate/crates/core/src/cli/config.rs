//! Experiment configuration: one TOML file, dotted-key overrides on the
//! command line, and a fully resolved copy written next to every run.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::metrics::Aggregation;
use crate::trainer::TrainConfig;

/// Relative output directories are placed under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "ADVDEPTH_OUTPUT_ROOT";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub height: usize,
    pub width: usize,
    /// `indoor`, `road` or `shifted`.
    pub scene: String,
    /// Profile recorded in the manifest; decides preprocessing and masks on load.
    pub profile: String,
    /// Meters per unit of the 16-bit depth PNGs; defaults to what the
    /// scene's far plane needs, at least 1 mm.
    pub depth_scale: Option<f64>,
    pub force: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_labeled: 32,
            n_unlabeled: 512,
            height: 64,
            width: 64,
            scene: "indoor".into(),
            profile: "synthetic".into(),
            depth_scale: None,
            force: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Training dataset root.
    pub path: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Held-out labeled dataset used for reports.
    pub test_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Defaults to the final generator of `out_dir`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `data.test_path`, then `data.path`.
    pub dataset: Option<PathBuf>,
    /// Mask convention; defaults to the dataset's own profile.
    pub profile: Option<String>,
    pub aggregation: Aggregation,
    pub visualize: bool,
    pub max_visualizations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            profile: None,
            aggregation: Aggregation::Pixel,
            visualize: false,
            max_visualizations: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    LabelCount,
    UnlabeledCount,
    LossKind,
    Lambda,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::LabelCount => "label_count",
            SweepKind::UnlabeledCount => "unlabeled_count",
            SweepKind::LossKind => "loss_kind",
            SweepKind::Lambda => "lambda",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl GridValue {
    pub fn label(&self) -> String {
        match self {
            GridValue::Int(v) => v.to_string(),
            GridValue::Float(v) => v.to_string(),
            GridValue::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            GridValue::Int(v) => Some(*v as f64),
            GridValue::Float(v) => Some(*v),
            GridValue::Text(s) => s.parse().ok(),
        }
    }

    pub fn as_count(&self) -> Result<usize> {
        match self {
            GridValue::Int(v) if *v >= 0 => Ok(*v as usize),
            other => Err(Error::Config(format!("'{}' is not a sample count", other.label()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub grid: Vec<GridValue>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kind: SweepKind::LabelCount,
            grid: vec![GridValue::Int(16), GridValue::Int(32), GridValue::Int(64)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSection {
    /// Labeled source-domain dataset.
    pub source: Option<PathBuf>,
    /// Target-domain dataset: its unlabeled images join training, its
    /// labeled samples (if any) are the evaluation set.
    pub target: Option<PathBuf>,
    /// Separate labeled target set for evaluation.
    pub target_eval: Option<PathBuf>,
    /// `[height, width]`; defaults to the target resolution.
    pub crop: Option<(usize, usize)>,
    pub crops_per_sample: usize,
    /// Also train on the source alone with the same seed and report both.
    pub compare_source_only: bool,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            target_eval: None,
            crop: None,
            crops_per_sample: 1,
            compare_source_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// Master seed; `train.seed` always equals it after resolution.
    pub seed: u64,
    /// Training-state checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub adapt: AdaptSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            resume: None,
            data: DataSection::default(),
            synth: SynthSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            adapt: AdaptSection::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `--key value`, `--key=value` and bare `--flag` tokens.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let tok = args[i]
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, found '{}'", args[i])))?;
        i += 1;
        let (key, value) = match tok.split_once('=') {
            Some((k, v)) => (k.to_string(), parse_value(v)),
            None if i < args.len() && !args[i].starts_with("--") => {
                i += 1;
                (tok.to_string(), parse_value(&args[i - 1]))
            }
            None => (tok.to_string(), Value::Boolean(true)),
        };
        let key = match key.as_str() {
            "force" => "synth.force".to_string(),
            _ => key.replace('-', "_"),
        };
        out.push((key, value));
    }
    Ok(out)
}

/// Key paths present in `given` but absent from `resolved`.
fn unknown_keys(given: &Table, resolved: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, resolved.get(k)) {
            (_, None) => out.push(path),
            (Value::Table(g), Some(Value::Table(r))) => unknown_keys(g, r, &path, out),
            _ => {}
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies overrides in order, places a relative `out_dir`
    /// under the output root and ties `train.seed` to `seed`.
    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, v.clone())?;
        }
        let root = env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        Self::from_table(table, root.as_deref())
    }

    pub fn from_table(table: Table, output_root: Option<&Path>) -> Result<Self> {
        let train_seed = table
            .get("train")
            .and_then(|t| t.get("seed"))
            .and_then(Value::as_integer);
        let mut cfg: Self = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if train_seed.is_some_and(|s| s as u64 != cfg.seed) {
            return Err(Error::Config("train.seed must equal the top-level seed".into()));
        }
        cfg.train.seed = cfg.seed;
        let resolved = cfg.to_table()?;
        let mut unknown = Vec::new();
        unknown_keys(&table, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        if let Some(root) = output_root {
            if cfg.out_dir.is_relative() {
                cfg.out_dir = root.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }

    fn to_table(&self) -> Result<Table> {
        Table::try_from(self).map_err(|e| Error::Config(format!("config is not representable: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config is not representable: {e}")))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let p = dir.join(RESOLVED_CONFIG);
        fs::write(&p, self.to_toml()?)?;
        Ok(p)
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("data.path is not set".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BatchMode;
    use crate::trainer::Convergence;

    fn load_str(text: &str, overrides: &[&str], root: Option<&Path>) -> Result<ExperimentConfig> {
        let mut table: Table = toml::from_str(text).unwrap();
        let args: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        for (k, v) in parse_overrides(&args)? {
            set_dotted(&mut table, &k, v)?;
        }
        ExperimentConfig::from_table(table, root)
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load_str(
            "seed = 3\n[train]\nepochs = 5\n",
            &[
                "--train.epochs",
                "7",
                "--train.weights.lambda=0.5",
                "--train.batching",
                "supervised",
                "--train.generator.base_channels",
                "8",
                "--sweep.grid",
                "[1, 2.5, \"x\"]",
                "--force",
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.weights.lambda, 0.5);
        assert_eq!(cfg.train.batching, BatchMode::Supervised);
        assert_eq!(cfg.train.generator.base_channels, 8);
        assert_eq!(cfg.train.seed, 3);
        assert!(cfg.synth.force);
        assert_eq!(
            cfg.sweep.grid,
            vec![GridValue::Int(1), GridValue::Float(2.5), GridValue::Text("x".into())]
        );
    }

    #[test]
    fn unknown_and_bad_keys_are_config_errors() {
        for (text, args) in [
            ("", vec!["--train.epoch", "3"]),
            ("[train]\nepohcs = 1\n", vec![]),
            ("", vec!["--train.epochs", "many"]),
            ("seed = 1\n[train]\nseed = 2\n", vec![]),
            ("", vec!["stray"]),
        ] {
            assert!(matches!(load_str(text, &args, None), Err(Error::Config(_))), "{text} {args:?}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = load_str(
            "out_dir = \"x\"\n[train.convergence]\nkind = \"plateau\"\nwindow = 3\ntolerance = 0.01\n",
            &["--train.regression_loss", "berhu", "--adapt.crop", "[240, 320]"],
            Some(Path::new("/tmp/root")),
        )
        .unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/root/x"));
        assert_eq!(cfg.train.convergence, Convergence::Plateau { window: 3, tolerance: 0.01 });
        let again = ExperimentConfig::from_table(toml::from_str(&cfg.to_toml().unwrap()).unwrap(), Some(Path::new("/elsewhere"))).unwrap();
        assert_eq!(again, cfg);
    }
}
