//! Run configuration shared by every command, and its content hash.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frn::{FormulationChoice, LearnableMask};
use crate::heads::HeadKind;
use crate::linalg::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub head: HeadKind,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub trials: usize,
    pub r: usize,
    pub d: usize,
    pub precision: Precision,
    pub seed: u64,
    pub formulation: FormulationChoice,
    pub learnable: LearnableMask,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub from: Option<PathBuf>,
    /// Command-specific settings, already validated by the command.
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        RunConfig {
            command: command.into(),
            head: HeadKind::Frn,
            way: 5,
            shot: 1,
            query: crate::episode::TEST_QUERIES,
            trials: 1000,
            r: 25,
            d: 64,
            precision: Precision::F64,
            seed: 0,
            formulation: FormulationChoice::Auto,
            learnable: LearnableMask::default(),
            data: None,
            out: None,
            from: None,
            extra: Default::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Config(format!("--way must be at least 2, got {}", self.way)));
        }
        if self.shot == 0 || self.query == 0 {
            return Err(Error::Config("--shot and --query must be positive".into()));
        }
        if self.r == 0 || self.d == 0 {
            return Err(Error::Config("--r and --d must be positive".into()));
        }
        if self.trials < 2 {
            return Err(Error::Config(format!("--trials must be at least 2, got {}", self.trials)));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form. The
    /// output directory is left out: it names where results go, not what
    /// they are.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (f32, f64)"))),
        }
    }
}

impl FromStr for FormulationChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(FormulationChoice::Auto),
            "direct" => Ok(FormulationChoice::Direct),
            "woodbury" => Ok(FormulationChoice::Woodbury),
            other => Err(Error::Config(format!("unknown formulation `{other}` (auto, direct, woodbury)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::new("eval");
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn parses_enums() {
        assert_eq!("f32".parse::<Precision>().unwrap(), Precision::F32);
        assert_eq!("woodbury".parse::<FormulationChoice>().unwrap(), FormulationChoice::Woodbury);
        assert!("f16".parse::<Precision>().is_err());
    }

    #[test]
    fn rejects_degenerate_settings() {
        let mut c = RunConfig::new("eval");
        c.way = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::new("eval");
        c.trials = 1;
        assert!(c.validate().is_err());
    }
}
