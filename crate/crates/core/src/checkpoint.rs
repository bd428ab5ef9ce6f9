//! Versioned checkpoint container shared by every stage.
//!
//! A checkpoint is a JSON document:
//!
//! ```json
//! { "format": "tsad-checkpoint", "version": 1, "kind": "recon",
//!   "hyper": { ...architecture hyperparameters... },
//!   "tensors": [ { "name": "...", "shape": [..], "data": [..] } ] }
//! ```
//!
//! Values are stored as `f64` and parsed with exact float round-tripping, so
//! save followed by load reproduces every parameter bit-for-bit. Readers
//! reject a different `format`, a newer major `version`, or a wrong `kind`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, TensorRecord};
use crate::scalar::Scalar;

pub const FORMAT: &str = "tsad-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub hyper: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new<H: Serialize, T: Scalar>(
        kind: &str,
        hyper: &H,
        params: &ParamSet<T>,
    ) -> Result<Self> {
        Ok(Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            hyper: serde_json::to_value(hyper)?,
            tensors: params.to_records(),
        })
    }

    pub fn hyper<H: DeserializeOwned>(&self) -> Result<H> {
        serde_json::from_value(self.hyper.clone())
            .map_err(|e| Error::Checkpoint(format!("bad hyperparameters: {e}")))
    }

    pub fn params<T: Scalar>(&self) -> Result<ParamSet<T>> {
        ParamSet::from_records(&self.tensors)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "{} is not a {FORMAT} file",
                path.display()
            )));
        }
        if ck.version > VERSION {
            return Err(Error::Checkpoint(format!(
                "{} has version {}, this build reads up to {VERSION}",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut p = ParamSet::<f64>::new();
        p.register("a.w", Tensor::from_vec(vec![0.1, 1.0 / 3.0, -7e-17]))
            .unwrap();
        Checkpoint::new("recon", &serde_json::json!({"h": 4}), &p)
            .unwrap()
            .save(&path)
            .unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.params::<f64>().unwrap(), p);
        assert!(ck.clone().expect_kind("recon").is_ok());
        assert!(ck.expect_kind("bank").is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let err = Checkpoint::load("/nonexistent/ck.json").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ck.json"));
    }
}
