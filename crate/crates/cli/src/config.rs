//! Run configuration: a TOML file with `[data]`, `[model]`, `[eval]` and
//! `[output]` sections. `--set section.key=value` overrides file keys.

use std::path::{Path, PathBuf};

use dhnn_core::dhnn::ModelConfig;
use dhnn_core::eval::MetricsOn;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub target_column: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_true")]
    pub has_header: bool,
    #[serde(default = "default_true")]
    pub log_returns: bool,
    /// Rolling normalisation window; defaults to the model window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_window_w: Option<usize>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_delimiter() -> String {
    ",".into()
}

fn default_true() -> bool {
    true
}

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_metrics_on")]
    pub metrics_on: String,
    #[serde(default = "default_tag")]
    pub dataset_tag: String,
}

fn default_metrics_on() -> String {
    "normalized".into()
}

fn default_tag() -> String {
    "dataset".into()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics_on: default_metrics_on(),
            dataset_tag: default_tag(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub dump_spectrum: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

fn toml_scalar(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, value) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {item:?} is not section.key=value")))?;
    let (section, key) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| CliError::Usage(format!("override key {key:?} needs a section prefix")))?;
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(CliError::Config(format!("{section} is not a section")));
    };
    sec.insert(key.to_string(), parse_override_value(value.trim()));
    Ok(())
}

fn model_from_table(table: Option<&toml::Value>) -> Result<ModelConfig, CliError> {
    let Some(value) = table else {
        return Ok(ModelConfig::default());
    };
    let toml::Value::Table(t) = value else {
        return Err(CliError::Config("[model] must be a table".into()));
    };
    let mut model = match t.get("preset") {
        Some(toml::Value::String(name)) => ModelConfig::preset(name)
            .ok_or_else(|| CliError::Config(format!("unknown preset {name:?} (stock, energy or air)")))?,
        Some(_) => return Err(CliError::Config("model.preset must be a string".into())),
        None => ModelConfig::default(),
    };
    for (k, v) in t.iter().filter(|(k, _)| k.as_str() != "preset") {
        let text = toml_scalar(v).ok_or_else(|| CliError::Config(format!("model.{k} must be a scalar")))?;
        model.set(k, &text).map_err(|e| CliError::Config(format!("model.{k}: {e}")))?;
    }
    Ok(model)
}

fn section<T: for<'de> Deserialize<'de>>(table: &toml::Table, name: &str) -> Result<T, CliError> {
    let value = table
        .get(name)
        .cloned()
        .unwrap_or_else(|| toml::Value::Table(toml::Table::new()));
    value
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("[{name}]: {}", e.message())))
}

impl RunConfig {
    /// Parse TOML text with overrides applied on top.
    pub fn parse(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self, CliError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        if let Some(unknown) = table
            .keys()
            .find(|k| !["data", "model", "eval", "output"].contains(&k.as_str()))
        {
            return Err(CliError::Config(format!("unknown section {unknown:?}")));
        }
        for required in ["data", "output"] {
            if !table.contains_key(required) {
                return Err(CliError::Config(format!("missing [{required}] section")));
            }
        }
        let cfg = Self {
            data: section(&table, "data")?,
            model: model_from_table(table.get("model"))?,
            eval: section(&table, "eval")?,
            output: section(&table, "output")?,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.check_static()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput(path.to_path_buf()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, overrides, &base)
    }

    /// Checks that need no data.
    fn check_static(&self) -> Result<(), CliError> {
        if self.data.delimiter.len() != 1 {
            return Err(CliError::Config(format!(
                "data.delimiter must be one byte, got {:?}",
                self.data.delimiter
            )));
        }
        self.metrics_on()?;
        Ok(())
    }

    pub fn metrics_on(&self) -> Result<MetricsOn, CliError> {
        self.eval.metrics_on.parse().map_err(CliError::Config)
    }

    pub fn norm_window(&self) -> usize {
        self.data.norm_window_w.unwrap_or(self.model.window_m)
    }

    pub fn split(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.data.split;
        (a, b, c)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.resolve(&self.data.path)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    /// Canonical TOML text; parsing it yields the same configuration.
    pub fn render(&self) -> String {
        let mut out = String::from("[data]\n");
        out.push_str(&toml::to_string(&self.data).expect("data section serialises"));
        out.push_str("\n[model]\n");
        for line in self.model.render().lines() {
            let (k, v) = line.split_once(" = ").expect("key = value");
            if k == "attention_null_model" {
                out.push_str(&format!("{k} = \"{v}\"\n"));
            } else {
                out.push_str(&format!("{k} = {}\n", toml_number(v)));
            }
        }
        out.push_str("\n[eval]\n");
        out.push_str(&toml::to_string(&self.eval).expect("eval section serialises"));
        out.push_str("\n[output]\n");
        out.push_str(&toml::to_string(&self.output).expect("output section serialises"));
        out
    }
}

/// Rust float formatting can print integers without a decimal point and
/// large values without an exponent; both stay valid TOML numbers here as
/// long as they fit an `i64` when no point is present.
fn toml_number(v: &str) -> String {
    if v.contains(['.', 'e', 'E']) || v.parse::<i64>().is_ok() {
        v.to_string()
    } else {
        format!("{v}.0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[data]
path = "data.csv"
target_column = "target"
log_returns = false

[model]
preset = "air"
window_m = 30
attention_null_model = "none"

[output]
dir = "out"
"#;

    #[test]
    fn preset_then_overrides() {
        let c = RunConfig::parse(SAMPLE, &["model.lr=0.01".into()], Path::new("/tmp")).unwrap();
        assert_eq!(c.model.window_m, 30);
        assert_eq!(c.model.hgnn_units, 35);
        assert_eq!(c.model.lr, 0.01);
        assert_eq!(c.norm_window(), 30);
        assert_eq!(c.data_path(), PathBuf::from("/tmp/data.csv"));
        assert_eq!(c.eval, EvalConfig::default());
    }

    #[test]
    fn render_parse_fixpoint() {
        let c = RunConfig::parse(SAMPLE, &["model.dropout=0".into()], Path::new("/x")).unwrap();
        let text = c.render();
        let back = RunConfig::parse(&text, &[], Path::new("/x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), text);
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = SAMPLE.replace("log_returns", "log_return");
        assert!(matches!(RunConfig::parse(&bad, &[], Path::new(".")), Err(CliError::Config(_))));
        let bad = format!("{SAMPLE}\n[extra]\nx = 1\n");
        assert!(RunConfig::parse(&bad, &[], Path::new(".")).is_err());
        assert!(RunConfig::parse(SAMPLE, &["model.bogus=1".into()], Path::new(".")).is_err());
        assert!(RunConfig::parse(SAMPLE, &["nosection=1".into()], Path::new(".")).is_err());
        assert!(RunConfig::parse(SAMPLE, &["eval.metrics_on=pretty".into()], Path::new(".")).is_err());
    }

    #[test]
    fn string_overrides_need_no_quotes() {
        let c = RunConfig::parse(SAMPLE, &["data.target_column=c1_s0".into()], Path::new(".")).unwrap();
        assert_eq!(c.data.target_column, "c1_s0");
    }
}
