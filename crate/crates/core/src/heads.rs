//! [`Head`] implementations over raw (already embedded) feature maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{ctx_score_queries, dsn_score_queries, proto_score_queries};
use crate::baselines::{CtxParams, ProjectionConfig};
use crate::episode::Head;
use crate::error::{Error, Result};
use crate::frn::{score_queries, ClassScores, FeatureMap, FormulationChoice, HeadParams, SupportPool};
use crate::linalg::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Frn,
    Proto,
    Dsn,
    Ctx,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Frn, HeadKind::Proto, HeadKind::Dsn, HeadKind::Ctx];

    pub fn tag(self) -> u32 {
        match self {
            HeadKind::Frn => 1,
            HeadKind::Proto => 2,
            HeadKind::Dsn => 3,
            HeadKind::Ctx => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        HeadKind::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Frn => "frn",
            HeadKind::Proto => "proto",
            HeadKind::Dsn => "dsn",
            HeadKind::Ctx => "ctx",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frn" => Ok(HeadKind::Frn),
            "proto" => Ok(HeadKind::Proto),
            "dsn" => Ok(HeadKind::Dsn),
            "ctx" => Ok(HeadKind::Ctx),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrnHead {
    pub params: HeadParams,
    pub formulation: FormulationChoice,
    pub precision: Precision,
}

impl FrnHead {
    pub fn new(params: HeadParams) -> Self {
        FrnHead {
            params,
            formulation: FormulationChoice::Auto,
            precision: Precision::F64,
        }
    }
}

impl Head for FrnHead {
    fn name(&self) -> String {
        "frn".into()
    }

    fn score(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<Vec<ClassScores>> {
        match self.precision {
            Precision::F64 => score_queries(queries, support, &self.params, self.formulation),
            Precision::F32 => {
                let s: Vec<SupportPool<f32>> = support.iter().map(SupportPool::cast).collect();
                let q: Vec<FeatureMap<f32>> = queries.iter().map(FeatureMap::cast).collect();
                score_queries(&q, &s, &self.params, self.formulation)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoHead {
    pub gamma: f64,
}

impl Head for ProtoHead {
    fn name(&self) -> String {
        "proto".into()
    }

    fn score(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<Vec<ClassScores>> {
        proto_score_queries(queries, support, self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsnHead {
    pub cfg: ProjectionConfig,
    pub gamma: f64,
}

impl Head for DsnHead {
    fn name(&self) -> String {
        "dsn".into()
    }

    fn score(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<Vec<ClassScores>> {
        dsn_score_queries(queries, support, &self.cfg, self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtxHead {
    pub params: CtxParams,
    pub gamma: f64,
}

impl Head for CtxHead {
    fn name(&self) -> String {
        "ctx".into()
    }

    fn score(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<Vec<ClassScores>> {
        ctx_score_queries(queries, support, &self.params, self.gamma)
    }
}

/// An untrained head of the given kind with temperature `1/d`.
pub fn default_head(kind: HeadKind, d: usize) -> Box<dyn Head> {
    let gamma = 1.0 / d as f64;
    match kind {
        HeadKind::Frn => Box::new(FrnHead::new(HeadParams::initial(d))),
        HeadKind::Proto => Box::new(ProtoHead { gamma }),
        HeadKind::Dsn => Box::new(DsnHead {
            cfg: ProjectionConfig::default(),
            gamma,
        }),
        HeadKind::Ctx => Box::new(CtxHead {
            params: CtxParams::identity(d),
            gamma,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_kind_round_trips() {
        for k in HeadKind::ALL {
            assert_eq!(k.to_string().parse::<HeadKind>().unwrap(), k);
            assert_eq!(HeadKind::from_tag(k.tag()), Some(k));
        }
        assert!("emd".parse::<HeadKind>().is_err());
    }
}
