use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Pooling;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    #[default]
    OodGmixup,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Self::Erm),
            "oodgmixup" | "ood_gmixup" | "ood-gmixup" => Ok(Self::OodGmixup),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected erm or oodgmixup)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Erm => "erm",
            Self::OodGmixup => "oodgmixup",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub embed_dim: usize,
    /// Width of the node projection used by the structure mask.
    pub mask_dim: usize,
    pub pooling: Pooling,
    pub alpha: f64,
    pub beta: f64,
    pub tail_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Virtual samples per epoch; the training-set size when unset.
    pub virtual_count: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::OodGmixup,
            epochs: 200,
            lr: 0.001,
            batch_size: 32,
            hidden_dim: 64,
            layers: 2,
            embed_dim: 64,
            mask_dim: 16,
            pooling: Pooling::Mean,
            alpha: 2.0,
            beta: 2.0,
            tail_size: 20,
            patience: 20,
            seed: 0,
            virtual_count: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch", self.batch_size),
            ("hidden", self.hidden_dim),
            ("layers", self.layers),
            ("embed-dim", self.embed_dim),
            ("mask-dim", self.mask_dim),
            ("tail", self.tail_size),
            ("patience", self.patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("--{name} must be positive")));
            }
        }
        for (name, v) in [("lr", self.lr), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("--{name} must be a positive number, got {v}")));
            }
        }
        if self.virtual_count == Some(0) {
            return Err(Error::Config("--virtual-count must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.epochs, c.lr, c.batch_size, c.patience), (200, 0.001, 32, 20));
        assert_eq!(c.alpha, 2.0);
    }

    #[test]
    fn rejects_zero_and_negative() {
        let c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("--batch"));
        let c = TrainConfig { beta: -1.0, ..TrainConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("--beta"));
    }

    #[test]
    fn method_names() {
        assert_eq!("erm".parse::<Method>().unwrap(), Method::Erm);
        assert_eq!("oodgmixup".parse::<Method>().unwrap(), Method::OodGmixup);
        assert!("sgd".parse::<Method>().is_err());
        assert_eq!(Method::OodGmixup.to_string(), "oodgmixup");
    }

    #[test]
    fn partial_document_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"method":"erm","epochs":5}"#).unwrap();
        assert_eq!(c.method, Method::Erm);
        assert_eq!(c.epochs, 5);
        assert_eq!(c.batch_size, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch":5}"#).is_err());
    }
}
