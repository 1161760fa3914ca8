//! Small, fixed training protocols comparing FRN regimes on synthetic
//! pose-permutation data: pre-training vs episodic training, training shot,
//! frozen vs learned λ/ρ, and the orthogonality term.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episode::{evaluate, Dataset, EvalSpec};
use crate::error::{Error, Result};
use crate::frn::LearnableMask;
use crate::heads::HeadKind;
use crate::synth::{generate, GenKind, GenSpec};
use crate::training::{meta_train, pretrain, PretrainConfig, TrainConfig, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    /// pre-trained only, episodic from scratch, pre-trained then fine-tuned
    Pretrain,
    /// trained on 1-shot vs 5-shot episodes, both evaluated 1-shot
    Shot,
    /// learned λ and ρ vs both frozen at their initial values
    Fixed,
    /// with and without the orthogonality term
    Aux,
}

impl Study {
    pub const ALL: [Study; 4] = [Study::Pretrain, Study::Shot, Study::Fixed, Study::Aux];
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::Pretrain => "pretrain",
            Study::Shot => "shot",
            Study::Fixed => "fixed",
            Study::Aux => "aux",
        })
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown study `{s}` (pretrain, shot, fixed, aux)")))
    }
}

/// Base classes train, val classes select checkpoints, test classes are
/// never seen during training.
#[derive(Clone, Debug)]
pub struct Splits {
    pub base: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// 32 base, 16 val and 16 test classes of 30 items with `r = 4`, unit
    /// noise and `d/2` nuisance channels of deviation 2.
    pub fn pose_permutation(d: usize, seed: u64) -> Result<Self> {
        let split = |classes: usize, salt: u64| {
            let spec = GenSpec::new(GenKind::PosePermutation, classes, 30, 4, d)
                .with_noise(1.0)
                .with_seed(salt + seed)
                .with_nuisance(d / 2, 2.0);
            generate(&spec).map(|g| g.dataset)
        };
        Ok(Splits {
            base: split(32, 100)?,
            val: split(16, 200)?,
            test: split(16, 300)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    /// Episodes per episodic run; the learning rate drops tenfold after
    /// two thirds of them.
    pub episodes: usize,
    pub pretrain_steps: usize,
    pub lr: f64,
    pub val_every: usize,
    pub val_trials: usize,
    /// Trials for the final 5-way 1-shot measurement.
    pub eval_trials: usize,
    pub seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            episodes: 300,
            pretrain_steps: 300,
            lr: 0.02,
            val_every: 60,
            val_trials: 100,
            eval_trials: 500,
            seed: 0,
        }
    }
}

impl AblationSettings {
    fn train_config(&self, way: usize, shot: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(HeadKind::Frn, way, shot);
        cfg.episodes = self.episodes;
        cfg.optim.lr = self.lr;
        cfg.optim.milestones = vec![self.episodes * 2 / 3];
        cfg.val_every = self.val_every;
        cfg.val_trials = self.val_trials;
        cfg.val_way = 5;
        cfg.val_shot = 1;
        cfg.seed = self.seed;
        cfg
    }

    fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            way: 5,
            shot: 1,
            query: 16,
            trials: self.eval_trials,
            // Away from the training and validation streams.
            seed: self.seed.wrapping_add(0x0e7a1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: String,
    pub val_accuracy: f64,
    pub val_ci95: f64,
    pub test_accuracy: f64,
    pub test_ci95: f64,
    /// Set when training stopped early on a non-finite loss.
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub study: Study,
    pub settings: AblationSettings,
    /// In the order the study lists them, expected best last.
    pub regimes: Vec<RegimeResult>,
}

impl AblationReport {
    pub fn regime(&self, name: &str) -> Option<&RegimeResult> {
        self.regimes.iter().find(|r| r.regime == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "study {} (seed {})", self.study, self.settings.seed);
        let _ = writeln!(s, "{:<22} {:>16} {:>16}", "regime", "val 5w1s %", "test 5w1s %");
        for r in &self.regimes {
            let _ = writeln!(
                s,
                "{:<22} {:>8.2} +- {:<5.2} {:>8.2} +- {:<5.2}{}",
                r.regime,
                100.0 * r.val_accuracy,
                100.0 * r.val_ci95,
                100.0 * r.test_accuracy,
                100.0 * r.test_ci95,
                r.diverged_at.map(|s| format!(" (diverged at step {s})")).unwrap_or_default()
            );
        }
        s
    }
}

fn measure(regime: &str, model: &TrainedModel, splits: &Splits, settings: &AblationSettings, diverged_at: Option<usize>) -> Result<RegimeResult> {
    let spec = settings.eval_spec();
    let val = evaluate(&splits.val, model, &spec)?;
    let test = evaluate(&splits.test, model, &spec)?;
    Ok(RegimeResult {
        regime: regime.into(),
        val_accuracy: val.accuracy_mean,
        val_ci95: val.ci95_halfwidth,
        test_accuracy: test.accuracy_mean,
        test_ci95: test.ci95_halfwidth,
        diverged_at,
    })
}

fn episodic(regime: &str, splits: &Splits, settings: &AblationSettings, cfg: &TrainConfig, init: Option<TrainedModel>) -> Result<RegimeResult> {
    log::info!("ablation: training `{regime}`");
    let out = meta_train(&splits.base, &splits.val, cfg, init)?;
    measure(regime, &out.model, splits, settings, out.diverged.map(|d| d.step))
}

pub fn run_study(study: Study, splits: &Splits, settings: &AblationSettings) -> Result<AblationReport> {
    let regimes = match study {
        Study::Pretrain => {
            let pcfg = PretrainConfig {
                steps: settings.pretrain_steps,
                seed: settings.seed,
                optim: {
                    let mut o = PretrainConfig::default().optim;
                    o.lr = settings.lr;
                    o.milestones = vec![settings.pretrain_steps * 2 / 3];
                    o
                },
                ..PretrainConfig::default()
            };
            log::info!("ablation: pre-training");
            let pre = pretrain(&splits.base, &pcfg)?;
            let pre_model = pre.state.into_model();
            let cfg = settings.train_config(5, 1);
            vec![
                measure("pretrain-only", &pre_model, splits, settings, pre.diverged.map(|d| d.step))?,
                episodic("scratch", splits, settings, &cfg, None)?,
                episodic("pretrain+finetune", splits, settings, &cfg, Some(pre_model))?,
            ]
        }
        // 1-shot episodes carry fewer supports, so they get more classes,
        // 15-way against 10-way.
        Study::Shot => vec![
            episodic("1-shot-trained", splits, settings, &settings.train_config(15, 1), None)?,
            episodic("5-shot-trained", splits, settings, &settings.train_config(10, 5), None)?,
        ],
        Study::Fixed => {
            let mut fixed = settings.train_config(5, 1);
            fixed.learnable = LearnableMask {
                alpha: false,
                beta: false,
                gamma: true,
            };
            vec![
                episodic("fixed-lambda-rho", splits, settings, &fixed, None)?,
                episodic("learned-lambda-rho", splits, settings, &settings.train_config(5, 1), None)?,
            ]
        }
        Study::Aux => {
            let mut off = settings.train_config(5, 1);
            off.aux_scale = None;
            vec![
                episodic("no-aux", splits, settings, &off, None)?,
                episodic("aux", splits, settings, &settings.train_config(5, 1), None)?,
            ]
        }
    };
    Ok(AblationReport {
        study,
        settings: settings.clone(),
        regimes,
    })
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
