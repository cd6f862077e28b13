//! Named, shaped parameter collections and their on-disk container.
//!
//! The container is a JSON document:
//!
//! ```text
//! {
//!   "format": "morphlab-weights",
//!   "version": 1,
//!   "tag": "fr-white",
//!   "seed": 42,
//!   "hyperparameters": { "alpha": "0.0001", ... },
//!   "params": [
//!     { "name": "conv1.kernel", "shape": [8, 1, 5, 5],
//!       "data": "<base64 of little-endian f64 values>" },
//!     ...
//!   ]
//! }
//! ```
//!
//! Parameters are kept sorted by name so files are byte-stable.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_FORMAT: &str = "morphlab-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tag: String,
    pub seed: u64,
    pub hyperparameters: BTreeMap<String, String>,
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    tag: String,
    seed: u64,
    hyperparameters: BTreeMap<String, String>,
    params: Vec<ParamRecord>,
}

impl ModelWeights {
    pub fn new(tag: impl Into<String>, seed: u64) -> Self {
        ModelWeights {
            tag: tag.into(),
            seed,
            hyperparameters: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::format(format!("weights '{}'", self.tag), format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let tag = self.tag.clone();
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::format(format!("weights '{tag}'"), format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_hyper(&mut self, key: &str, value: impl ToString) {
        self.hyperparameters.insert(key.to_string(), value.to_string());
    }

    pub fn hyper(&self, key: &str) -> Option<&str> {
        self.hyperparameters.get(key).map(String::as_str)
    }

    /// Moves every parameter of `other` in under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ModelWeights) {
        for (k, v) in other.params {
            self.params.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Extracts the parameters named `prefix*`, stripping the prefix.
    pub fn extract(&self, prefix: &str, tag: &str) -> ModelWeights {
        let mut out = ModelWeights::new(tag, self.seed);
        for (k, v) in &self.params {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.params.insert(rest.to_string(), v.clone());
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let container = Container {
            format: WEIGHTS_FORMAT.to_string(),
            version: WEIGHTS_VERSION,
            tag: self.tag.clone(),
            seed: self.seed,
            hyperparameters: self.hyperparameters.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| {
                    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                    ParamRecord {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        data: B64.encode(bytes),
                    }
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&container).expect("weights serialise");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ctx = "weights container";
        let c: Container = serde_json::from_str(text).map_err(|e| Error::format(ctx, e.to_string()))?;
        if c.format != WEIGHTS_FORMAT {
            return Err(Error::format(ctx, format!("unknown format '{}'", c.format)));
        }
        if c.version != WEIGHTS_VERSION {
            return Err(Error::format(
                ctx,
                format!("version {} not supported (expected {WEIGHTS_VERSION})", c.version),
            ));
        }
        let mut params = BTreeMap::new();
        for rec in c.params {
            let bytes = B64
                .decode(rec.data.as_bytes())
                .map_err(|e| Error::format(ctx, format!("{}: {e}", rec.name)))?;
            let n = rec
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::format(ctx, format!("{}: bad shape {:?}", rec.name, rec.shape)))?;
            if bytes.len() != n.saturating_mul(8) {
                return Err(Error::format(
                    ctx,
                    format!("{}: {} bytes for {n} values", rec.name, bytes.len()),
                ));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&rec.shape, data).map_err(|e| Error::format(ctx, format!("{}: {e}", rec.name)))?;
            if params.insert(rec.name.clone(), t).is_some() {
                return Err(Error::format(ctx, format!("duplicate parameter {}", rec.name)));
            }
        }
        Ok(ModelWeights {
            tag: c.tag,
            seed: c.seed,
            hyperparameters: c.hyperparameters,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ModelWeights {
        let mut w = ModelWeights::new("demo", 9);
        w.insert("b", Tensor::vector(vec![1.5, -2.25]));
        w.insert(
            "a.kernel",
            Tensor::new(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 1e-300]).unwrap(),
        );
        w.set_hyper("alpha", 1e-4);
        w
    }

    #[test]
    fn text_round_trip_is_exact() {
        let w = sample();
        let text = w.to_text();
        let back = ModelWeights::parse(&text).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.names().collect::<Vec<_>>(), ["a.kernel", "b"]);
    }

    #[test]
    fn version_and_format_are_checked() {
        let text = sample().to_text();
        let bumped = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(ModelWeights::parse(&bumped), Err(Error::Format { .. })));
        let renamed = text.replace(WEIGHTS_FORMAT, "other");
        assert!(matches!(ModelWeights::parse(&renamed), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut w = ModelWeights::new("x", 0);
        w.insert("p", Tensor::vector(vec![1.0, 2.0]));
        let text = w.to_text();
        let short = B64.encode(1.0f64.to_le_bytes());
        let full = B64.encode([1.0f64.to_le_bytes(), 2.0f64.to_le_bytes()].concat());
        let bad = text.replace(&full, &short);
        assert!(matches!(ModelWeights::parse(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn prefixes_split_and_merge() {
        let mut all = ModelWeights::new("morpher", 1);
        all.absorb("enc.", sample());
        assert!(all.contains("enc.b"));
        let back = all.extract("enc.", "demo");
        assert_eq!(back.get("b").unwrap(), sample().get("b").unwrap());
    }

    proptest! {
        #[test]
        fn arbitrary_finite_values_survive(values in proptest::collection::vec(-1e300f64..1e300, 1..40)) {
            let mut w = ModelWeights::new("p", 3);
            w.insert("v", Tensor::vector(values.clone()));
            let back = ModelWeights::parse(&w.to_text()).unwrap();
            prop_assert_eq!(back.get("v").unwrap().data(), &values[..]);
        }
    }
}
