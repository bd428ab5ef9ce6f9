//! Run configuration, read from a TOML file.
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys are rejected. A minimal file:
//!
//! ```toml
//! seed = 7
//! output = "runs/seasonal"
//!
//! [data.synthetic]
//! kind = "seasonal"
//!
//! [stage3.bank]
//! k = 4
//! ```
//!
//! Any key can be overridden with a dotted `path=value` pair, for example
//! `stage2.rl.controller=random` or `window.width=32`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundary_rl::RlConfig;
use crate::data::{AnomalyKind, BaseSignal, BenchmarkSpec, CsvSchema};
use crate::encoder::EncoderTrainConfig;
use crate::error::{Error, Result};
use crate::prototypes::{BankConfig, Stage3TrainConfig};
use crate::recon::PretrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub window: WindowConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            window: WindowConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Exactly one of `synthetic` or `csv`. A missing `[data]` section means
/// the default synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticConfig>,
    pub csv: Option<CsvConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticConfig::default()),
            csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub kind: AnomalyKind,
    pub train_len: usize,
    pub test_windows: usize,
    pub base: BaseSignal,
    pub magnitude: Option<f64>,
    pub count: Option<usize>,
    pub interval_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let spec = BenchmarkSpec::new(AnomalyKind::Seasonal, 1);
        Self {
            kind: spec.kind,
            train_len: spec.train_len,
            test_windows: spec.test_windows,
            base: spec.base,
            magnitude: spec.magnitude,
            count: spec.count,
            interval_len: spec.interval_len,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self, window: usize) -> BenchmarkSpec {
        BenchmarkSpec {
            kind: self.kind,
            train_len: self.train_len,
            test_windows: self.test_windows,
            window,
            base: self.base.clone(),
            magnitude: self.magnitude,
            count: self.count,
            interval_len: self.interval_len,
        }
    }
}

/// Training split must be anomaly-free; the test split carries labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub width: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            width: 20,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub train: PretrainConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            hidden: 16,
            layers: 2,
            heads: 2,
            ff_hidden: 32,
            train: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub rl: RlConfig,
    pub encoder_hidden: usize,
    pub embed_dim: usize,
    pub encoder: EncoderTrainConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            rl: RlConfig::default(),
            encoder_hidden: 64,
            embed_dim: 16,
            encoder: EncoderTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Config {
    pub bank: BankConfig,
    pub train: Stage3TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub quantile: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { quantile: 0.99 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies dotted `path=value` overrides. Values are parsed as TOML
    /// literals and fall back to plain strings. Overriding a `data.csv` key
    /// replaces a synthetic source and vice versa.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root: toml::Table =
            toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{o}` is not of the form key=value"))
            })?;
            let value = parse_literal(raw.trim());
            let keys: Vec<&str> = path.trim().split('.').collect();
            if let ["data", source, ..] = keys.as_slice() {
                let other = match *source {
                    "csv" => Some("synthetic"),
                    "synthetic" => Some("csv"),
                    _ => None,
                };
                if let (Some(other), Some(toml::Value::Table(data))) = (other, root.get_mut("data"))
                {
                    data.remove(other);
                }
            }
            let (last, parents) = keys.split_last().expect("split yields one item");
            let mut table = &mut root;
            for k in parents {
                let entry = table
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.data.synthetic, &self.data.csv) {
            (Some(_), Some(_)) => return bad("set only one of data.synthetic and data.csv".into()),
            (None, None) => return bad("no data source configured".into()),
            _ => {}
        }
        if self.window.width == 0 || self.window.stride == 0 {
            return bad("window width and stride must be positive".into());
        }
        if self.stage1.hidden == 0
            || self.stage1.heads == 0
            || !self.stage1.hidden.is_multiple_of(self.stage1.heads)
        {
            return bad("stage1.hidden must be a positive multiple of stage1.heads".into());
        }
        let rl = &self.stage2.rl;
        if !(rl.band_low > 0.0 && rl.band_low < rl.band_up) {
            return bad("stage2.rl needs 0 < band_low < band_up".into());
        }
        if rl.epochs == 0 {
            return bad("stage2.rl.epochs must be positive to produce pseudo-anomalies".into());
        }
        self.stage3
            .bank
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.eval.quantile > 0.0 && self.eval.quantile <= 1.0) {
            return bad("eval.quantile must lie in (0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, excluding the output path.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[stage3.bank]\nkk = 4").is_err());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml(
            "seed = 5\n[data.synthetic]\nkind = \"global\"\n[stage3.bank]\nk = 4\n",
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.stage3.bank.k, 4);
        assert_eq!(c.data.synthetic.unwrap().kind, AnomalyKind::Global);
        assert_eq!(c.window.width, 20);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                "stage3.bank.k=4".into(),
                "stage2.rl.controller=random".into(),
                "output=/tmp/x".into(),
            ])
            .unwrap();
        assert_eq!(c.stage3.bank.k, 4);
        assert_eq!(
            c.stage2.rl.controller,
            crate::boundary_rl::ControllerKind::Random
        );
        assert_eq!(c.output, PathBuf::from("/tmp/x"));
        assert!(RunConfig::default()
            .with_overrides(&["stage3.bank.k=1".into()])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides(&["nokey".into()])
            .is_err());
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            output: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn two_sources_rejected() {
        let mut c = RunConfig::default();
        c.data.csv = Some(CsvConfig {
            train: "a.csv".into(),
            test: "b.csv".into(),
            schema: CsvSchema::default(),
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_section_replaces_synthetic_default() {
        let c = RunConfig::from_toml("[data.csv]\ntrain = \"a.csv\"\ntest = \"b.csv\"\n").unwrap();
        assert!(c.data.synthetic.is_none());
        let o = RunConfig::default()
            .with_overrides(&["data.csv.train=a.csv".into(), "data.csv.test=b.csv".into()])
            .unwrap();
        assert!(o.data.synthetic.is_none());
        assert_eq!(o.data.csv.unwrap().test, PathBuf::from("b.csv"));
    }
}
