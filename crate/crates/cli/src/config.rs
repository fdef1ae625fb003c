use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use vpr_augment::dataset::Split;
use vpr_augment::pipeline::{PipelineConfig, ToySceneConfig};
use vpr_augment::{Error, Result};

/// Environment variable that replaces `paths.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "VPR_AUGMENT_OUTPUT_DIR";

/// Keys that are valid even though the default config leaves them unset.
const OPTIONAL_KEYS: &[&str] = &[
    "paths.manifest",
    "paths.vpr_checkpoint",
    "paths.ue_checkpoint",
    "paths.exchange_dir",
    "pipeline.augment.translation_radius",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub renderer: RendererConfig,
    /// Scene used by the oracle renderer and, without a manifest, to generate data.
    pub toy: ToySceneConfig,
    pub pipeline: PipelineConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            renderer: RendererConfig::default(),
            toy: ToySceneConfig::default(),
            pipeline: PipelineConfig::toy(),
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Dataset manifest; the toy scene is generated when unset.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/vpr.ckpt`.
    pub vpr_checkpoint: Option<PathBuf>,
    /// Defaults to `<output_dir>/ue.ckpt`.
    pub ue_checkpoint: Option<PathBuf>,
    /// Directory shared with an external view synthesizer.
    pub exchange_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: PathBuf::from("runs/default"),
            vpr_checkpoint: None,
            ue_checkpoint: None,
            exchange_dir: None,
        }
    }
}

impl PathsConfig {
    pub fn vpr_checkpoint(&self) -> PathBuf {
        self.vpr_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("vpr.ckpt"))
    }

    pub fn ue_checkpoint(&self) -> PathBuf {
        self.ue_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("ue.ckpt"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RendererKind {
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererConfig {
    pub kind: RendererKind,
    /// Additive noise of the oracle renderer.
    pub noise_level: f64,
    pub timeout_secs: f64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            kind: RendererKind::Oracle,
            noise_level: 0.0,
            timeout_secs: 600.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    None,
    Comparison,
    M,
    Ablation,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mode: SweepMode::None,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: Split,
    pub label: String,
    pub curve_plot: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            label: "model".into(),
            curve_plot: true,
        }
    }
}

impl RunConfig {
    /// Defaults, then the config file, then `--a.b=value` overrides, then the
    /// output directory environment variable.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let defaults = to_value(&RunConfig::default())?;
        let mut merged = defaults.clone();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            let user: Table = text
                .parse()
                .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
            let user = Value::Table(user);
            check_keys(&user, &defaults, "")?;
            merge(&mut merged, user);
        }
        for (key, value) in parse_overrides(overrides)? {
            if !key_exists(&defaults, &key) {
                return Err(Error::Config(format!("unknown config key --{key}")));
            }
            set_path(&mut merged, &key, value)?;
        }
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.paths.output_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    /// Checks everything that can be checked without touching the outputs.
    pub fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        self.pipeline.validate()?;
        if let Some(m) = &self.paths.manifest {
            if !m.is_file() {
                return Err(Error::Config(format!(
                    "manifest {} does not exist",
                    m.display()
                )));
            }
        }
        if self.renderer.kind == RendererKind::External && self.paths.exchange_dir.is_none() {
            return Err(Error::Config(
                "renderer.kind = \"external\" needs paths.exchange_dir".into(),
            ));
        }
        if !(self.renderer.noise_level >= 0.0 && self.renderer.noise_level.is_finite()) {
            return Err(Error::Config(
                "renderer.noise_level must be non-negative".into(),
            ));
        }
        if !(self.renderer.timeout_secs > 0.0 && self.renderer.timeout_secs.is_finite()) {
            return Err(Error::Config(
                "renderer.timeout_secs must be positive".into(),
            ));
        }
        if self.paths.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("paths.output_dir is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn to_value(cfg: &RunConfig) -> Result<Value> {
    Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Splits `--a.b=value` and `--a.b value` into key/value pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!(
                "unexpected argument {arg:?}; overrides look like --section.key=value"
            )));
        };
        let (key, raw) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override --{body} has no value")))?;
                (body.to_string(), v.clone())
            }
        };
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("malformed override key {key:?}")));
        }
        out.push((key, parse_value(&raw)));
    }
    Ok(out)
}

/// TOML literal if it parses as one, bare string otherwise.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn key_exists(defaults: &Value, key: &str) -> bool {
    if OPTIONAL_KEYS.contains(&key) {
        return true;
    }
    let mut node = defaults;
    for part in key.split('.') {
        match node.get(part) {
            Some(next) => node = next,
            None => return false,
        }
    }
    true
}

/// Every key in `user` must name a field of the config.
fn check_keys(user: &Value, defaults: &Value, prefix: &str) -> Result<()> {
    let Value::Table(table) = user else {
        return Ok(());
    };
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if !key_exists(defaults, &key) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        check_keys(v, defaults, &key)?;
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--{key}: {part} is not a section")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("--{key}: parent is not a section")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_parse_both_forms() {
        let args: Vec<String> = [
            "--seed=7",
            "--pipeline.train.vpr.lr",
            "0.01",
            "--paths.output_dir=out",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let pairs = parse_overrides(&args).unwrap();
        assert_eq!(pairs[0], ("seed".into(), Value::Integer(7)));
        assert_eq!(
            pairs[1],
            ("pipeline.train.vpr.lr".into(), Value::Float(0.01))
        );
        assert_eq!(
            pairs[2],
            ("paths.output_dir".into(), Value::String("out".into()))
        );
    }

    #[test]
    fn override_applies_to_nested_key() {
        let cfg = RunConfig::resolve(None, &["--pipeline.augment.top_k=2".into()]).unwrap();
        assert_eq!(cfg.pipeline.augment.top_k, 2);
        let cfg = RunConfig::resolve(None, &["--paths.manifest=m.json".into()]).unwrap();
        assert_eq!(cfg.paths.manifest, Some(PathBuf::from("m.json")));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::resolve(None, &["--pipeline.nope=1".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(parse_overrides(&["seed=1".into()]).is_err());
        assert!(parse_overrides(&["--seed".into()]).is_err());
    }

    #[test]
    fn config_file_keys_are_checked_at_depth() {
        let dir = tempfile::TempDir::new().unwrap();
        let good = dir.path().join("good.toml");
        fs::write(
            &good,
            "[paths]\noutput_dir = \"o\"\n[pipeline.augment]\ntop_k = 2\n",
        )
        .unwrap();
        let cfg = RunConfig::resolve(Some(&good), &[]).unwrap();
        assert_eq!(cfg.pipeline.augment.top_k, 2);
        let bad = dir.path().join("bad.toml");
        fs::write(&bad, "[pipeline.augment]\ntopk = 2\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(Some(&bad), &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn wrong_type_is_config_error() {
        let err = RunConfig::resolve(None, &["--pipeline.epochs=many".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn checkpoint_paths_default_under_output_dir() {
        let p = PathsConfig {
            output_dir: "x".into(),
            ..PathsConfig::default()
        };
        assert_eq!(p.vpr_checkpoint(), PathBuf::from("x/vpr.ckpt"));
        assert_eq!(p.ue_checkpoint(), PathBuf::from("x/ue.ckpt"));
    }
}
