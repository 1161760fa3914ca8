use std::fs;
use std::path::Path;

use frn_core::ablation::{median, run_study, AblationSettings, Splits};
use frn_core::bench::{run_bench, BenchSpec};
use frn_core::config::RunConfig;
use frn_core::container::{export, ingest};
use frn_core::episode::{evaluate, stream_rng, Dataset, EvalSpec, TEST_QUERIES, TRAIN_QUERIES};
use frn_core::frn::LearnableMask;
use frn_core::heads::HeadKind;
use frn_core::synth::{generate, GenSpec};
use frn_core::training::checkpoint::{load, save};
use frn_core::training::{
    meta_train, EmbedInit, EmbeddingModel, HeadState, HistoryEntry, OptimConfig, PretrainConfig, RngState, TrainConfig, TrainedModel,
};
use frn_core::training::Checkpoint;
use frn_core::{Error, Precision, Result};
use serde_json::{json, Value};

use crate::{AblateArgs, BenchArgs, Common, EvalArgs, GenArgs, OptimArgs, PretrainArgs, TrainArgs};

const SPLITS: [&str; 3] = ["base", "val", "test"];

fn run_config(command: &str, c: &Common) -> RunConfig {
    let mut cfg = RunConfig::new(command);
    cfg.head = c.head;
    cfg.way = c.way;
    cfg.shot = c.shot;
    cfg.query = c.query.unwrap_or(if command == "eval" { TEST_QUERIES } else { TRAIN_QUERIES });
    cfg.trials = c.trials;
    cfg.r = c.r.unwrap_or(cfg.r);
    cfg.d = c.d.unwrap_or(cfg.d);
    cfg.precision = c.precision.unwrap_or_default();
    cfg.seed = c.seed;
    cfg.formulation = c.formulation.unwrap_or_default();
    cfg.learnable = LearnableMask {
        alpha: !c.fix_alpha,
        beta: !c.fix_beta,
        gamma: !c.fix_gamma,
    };
    cfg.data = c.data.clone();
    cfg.out = Some(c.out.clone());
    cfg.from = c.from.clone();
    cfg
}

fn set_extra(cfg: &mut RunConfig, key: &str, value: Value) {
    cfg.extra.insert(key.into(), value);
}

fn write_outputs(cfg: &RunConfig, text: &str, json: Value) -> Result<()> {
    let out = cfg.out.as_deref().expect("out is always set");
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    // Same content as the hash, so reruns elsewhere stay byte-identical.
    let mut recorded = cfg.clone();
    recorded.out = None;
    let body = json!({
        "config_hash": hash,
        "seed": cfg.seed,
        "config": recorded,
        "result": json,
    });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&body)? + "\n")?;
    let text = format!("{text}config {hash} seed {}\n", cfg.seed);
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn write_history(cfg: &RunConfig, history: &[HistoryEntry]) -> Result<()> {
    let path = cfg.out.as_deref().expect("out is always set").join("history.jsonl");
    let hash = cfg.hash();
    let mut s = String::new();
    for h in history {
        let mut line = serde_json::to_value(h)?;
        line["config_hash"] = json!(hash);
        line["seed"] = json!(cfg.seed);
        s.push_str(&serde_json::to_string(&line)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_checkpoint(cfg: &RunConfig, model: TrainedModel, steps: usize) -> Result<()> {
    let path = cfg.out.as_deref().expect("out is always set").join("checkpoint.bin");
    let ck = Checkpoint {
        model,
        config_hash: cfg.hash(),
        // Next unused training stream, for resumption.
        rng: RngState::capture(&stream_rng(cfg.seed, steps as u64)),
        step: steps as u64,
        seed: cfg.seed,
    };
    save(&path, &ck)
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Error::Config("--data is required for this command".into()))
}

/// A split from a directory written by `gen`, or the file itself.
fn load_split(path: &Path, split: &str) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join(format!("{split}.bin"))
    } else {
        path.to_path_buf()
    };
    ingest(&file).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", file.display()))),
        other => other,
    })
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = run_config("gen", &a.common);
    cfg.r = a.common.r.unwrap_or(4);
    cfg.d = a.common.d.unwrap_or(16);
    for (k, v) in [
        ("kind", json!(a.kind.to_string())),
        ("classes", json!([a.classes, a.val_classes, a.test_classes])),
        ("items", json!(a.items)),
        ("noise", json!(a.noise)),
        ("nuisance_dims", json!(a.nuisance_dims)),
        ("nuisance_sigma", json!(a.nuisance_sigma)),
        ("delta", json!(a.delta)),
    ] {
        set_extra(&mut cfg, k, v);
    }
    let out = cfg.out.clone().expect("out is always set");
    fs::create_dir_all(&out)?;
    let mut text = String::new();
    let mut splits = Vec::new();
    for (i, (name, classes)) in SPLITS.iter().zip([a.classes, a.val_classes, a.test_classes]).enumerate() {
        let mut spec = GenSpec::new(a.kind, classes, a.items, cfg.r, cfg.d)
            .with_noise(a.noise)
            .with_seed(cfg.seed.wrapping_mul(3).wrapping_add(i as u64))
            .with_nuisance(a.nuisance_dims, a.nuisance_sigma);
        spec.delta = a.delta;
        let ds = generate(&spec)?.dataset;
        let path = out.join(format!("{name}.bin"));
        export(&ds, &path, cfg.precision)?;
        text += &format!("{name:<5} {classes} classes x {} items, r={} d={} -> {}\n", a.items, cfg.r, cfg.d, path.display());
        splits.push(json!({ "split": name, "classes": classes, "items": ds.len(), "seed": spec.seed }));
    }
    write_outputs(&cfg, &text, json!({ "splits": splits }))
}

fn head_model(cfg: &RunConfig, d: usize) -> Result<TrainedModel> {
    let mut model = match &cfg.from {
        Some(path) => {
            let ck = load(path)?;
            if ck.model.embedding.d_in() != d {
                return Err(Error::Config(format!(
                    "checkpoint expects d = {}, data has d = {d}",
                    ck.model.embedding.d_in()
                )));
            }
            ck.model
        }
        None => TrainedModel::new(EmbeddingModel::identity(d, d), HeadState::initial(cfg.head, d)),
    };
    model.precision = cfg.precision;
    model.formulation = cfg.formulation;
    if model.precision == Precision::F32 && model.kind() != HeadKind::Frn {
        return Err(Error::Config(format!("--precision f32 is only supported by the frn head, not {}", model.kind())));
    }
    Ok(model)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = run_config("eval", &a.common);
    cfg.validate()?;
    let ds = load_split(data_path(&cfg)?, "test")?;
    cfg.r = ds.r();
    cfg.d = ds.d();
    let model = head_model(&cfg, ds.d())?;
    let spec = EvalSpec {
        way: cfg.way,
        shot: cfg.shot,
        query: cfg.query,
        trials: cfg.trials,
        seed: cfg.seed,
    };
    let report = evaluate(&ds, &model, &spec)?;
    write_outputs(&cfg, &report.to_text(), serde_json::to_value(&report)?)
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = run_config("bench", &a.common);
    cfg.precision = Precision::F32;
    set_extra(&mut cfg, "batch", json!(a.batch));
    set_extra(&mut cfg, "iterations", json!(a.iterations));
    set_extra(&mut cfg, "warmup", json!(a.warmup));
    let spec = BenchSpec {
        b: a.batch,
        k: cfg.shot,
        r: cfg.r,
        d: cfg.d,
        iterations: a.iterations,
        warmup: a.warmup,
        seed: cfg.seed,
    };
    let report = run_bench(&spec)?;
    write_outputs(&cfg, &report.to_text(), serde_json::to_value(&report)?)
}

fn optim_config(o: &OptimArgs, cfg: &mut RunConfig) -> OptimConfig {
    let mut optim = OptimConfig::default();
    if let Some(lr) = o.lr {
        optim.lr = lr;
    }
    if let Some(wd) = o.weight_decay {
        optim.weight_decay = wd;
    }
    optim.milestones = o.milestones.clone();
    set_extra(cfg, "optim", serde_json::to_value(&optim).expect("serializable"));
    set_extra(cfg, "embed_dim", json!(o.embed_dim));
    set_extra(cfg, "identity_init", json!(o.identity_init));
    set_extra(cfg, "downscale", json!(o.downscale));
    optim
}

fn embed_init(o: &OptimArgs) -> EmbedInit {
    if o.identity_init {
        EmbedInit::Identity
    } else {
        EmbedInit::Random
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = run_config("train", &a.common);
    cfg.validate()?;
    let optim = optim_config(&a.optim, &mut cfg);
    let data = data_path(&cfg)?.to_path_buf();
    let base = load_split(&data, "base")?;
    let val = load_split(&data, "val")?;
    if !data.is_dir() {
        log::warn!("single dataset file: validating on the training classes");
    }
    cfg.r = base.r();
    cfg.d = base.d();

    let mut tc = TrainConfig::new(cfg.head, cfg.way, cfg.shot);
    tc.query = cfg.query;
    tc.episodes = a.episodes;
    tc.optim = optim;
    tc.val_every = a.val_every;
    tc.val_trials = a.val_trials;
    tc.val_shot = a.val_shot.unwrap_or(cfg.shot);
    tc.val_way = cfg.way;
    if a.no_aux {
        tc.aux_scale = None;
    } else if a.aux_scale.is_some() {
        tc.aux_scale = a.aux_scale;
    }
    tc.learnable = cfg.learnable;
    tc.train_embedding = !a.freeze_embedding;
    tc.embed_dim = a.optim.embed_dim;
    tc.embed_init = embed_init(&a.optim);
    tc.downscale = a.optim.downscale;
    tc.formulation = cfg.formulation;
    tc.seed = cfg.seed;
    set_extra(&mut cfg, "train", serde_json::to_value(&tc)?);

    let init = match &cfg.from {
        Some(path) => {
            let m = load(path)?.model;
            Some(if m.kind() == cfg.head {
                m
            } else {
                let d = m.embedding.d_out();
                TrainedModel::new(m.embedding, HeadState::initial(cfg.head, d))
            })
        }
        None => None,
    };
    let outcome = meta_train(&base, &val, &tc, init)?;
    let mut model = outcome.model.clone();
    model.precision = cfg.precision;
    fs::create_dir_all(cfg.out.as_deref().expect("out is always set"))?;
    write_checkpoint(&cfg, model, outcome.steps)?;
    write_history(&cfg, &outcome.history)?;
    let final_loss = outcome.history.last().map(|h| h.loss);
    let mut text = format!(
        "trained {} {}-way {}-shot for {} episodes\n",
        cfg.head, cfg.way, cfg.shot, outcome.steps
    );
    if let Some(v) = outcome.best_val {
        text += &format!("best val accuracy {:.2} %\n", 100.0 * v);
    }
    if let Some(l) = final_loss {
        text += &format!("final loss {l:.4}\n");
    }
    write_outputs(
        &cfg,
        &text,
        json!({
            "steps": outcome.steps,
            "best_val_accuracy": outcome.best_val,
            "final_loss": final_loss,
            "diverged": outcome.diverged,
        }),
    )?;
    outcome.into_result().map(|_| ())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = run_config("pretrain", &a.common);
    cfg.head = HeadKind::Frn;
    let optim = optim_config(&a.optim, &mut cfg);
    let base = load_split(data_path(&cfg)?, "base")?;
    cfg.r = base.r();
    cfg.d = base.d();
    let pc = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        optim,
        embed_dim: a.optim.embed_dim,
        embed_init: embed_init(&a.optim),
        downscale: a.optim.downscale,
        learn_gamma: !a.common.fix_gamma,
        seed: cfg.seed,
        ..PretrainConfig::default()
    };
    set_extra(&mut cfg, "pretrain", json!({ "steps": pc.steps, "batch_size": pc.batch_size, "dummy_sigma": pc.dummy_sigma }));
    let outcome = frn_core::training::pretrain(&base, &pc)?;
    let steps = outcome.history.len();
    let mut model = outcome.state.into_model();
    model.precision = cfg.precision;
    fs::create_dir_all(cfg.out.as_deref().expect("out is always set"))?;
    write_checkpoint(&cfg, model, steps)?;
    write_history(&cfg, &outcome.history)?;
    let text = format!(
        "pre-trained for {steps} steps on {} classes\ntraining accuracy {:.2} %\n",
        base.num_classes(),
        100.0 * outcome.train_accuracy
    );
    write_outputs(
        &cfg,
        &text,
        json!({
            "steps": steps,
            "train_accuracy": outcome.train_accuracy,
            "diverged": outcome.diverged,
        }),
    )?;
    match outcome.diverged {
        Some(d) => Err(Error::Divergence { step: d.step, loss: d.loss }),
        None => Ok(()),
    }
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = run_config("ablate", &a.common);
    cfg.head = HeadKind::Frn;
    cfg.d = a.common.d.unwrap_or(64);
    let mut settings = AblationSettings::default();
    if let Some(e) = a.episodes {
        settings.episodes = e;
        settings.pretrain_steps = e;
    }
    if let Some(lr) = a.lr {
        settings.lr = lr;
    }
    if let Some(t) = a.eval_trials {
        settings.eval_trials = t;
    }
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    set_extra(&mut cfg, "study", json!(a.study.to_string()));
    set_extra(&mut cfg, "seeds", json!(a.seeds));
    set_extra(&mut cfg, "settings", serde_json::to_value(&settings)?);

    let loaded = match &cfg.data {
        Some(dir) => Some(load_splits(dir)?),
        None => None,
    };
    let mut reports = Vec::new();
    let mut text = String::new();
    for s in 0..a.seeds {
        let seed = cfg.seed.wrapping_add(s);
        let splits = match &loaded {
            Some(sp) => sp.clone(),
            None => Splits::pose_permutation(cfg.d, seed)?,
        };
        let rep = run_study(a.study, &splits, &AblationSettings { seed, ..settings.clone() })?;
        text += &rep.to_text();
        reports.push(rep);
    }
    let mut medians = Vec::new();
    text += "median over seeds\n";
    for (i, r) in reports[0].regimes.iter().enumerate() {
        let val: Vec<f64> = reports.iter().map(|rep| rep.regimes[i].val_accuracy).collect();
        let test: Vec<f64> = reports.iter().map(|rep| rep.regimes[i].test_accuracy).collect();
        let (mv, mt) = (median(&val), median(&test));
        text += &format!("{:<22} val {:>6.2} %  test {:>6.2} %\n", r.regime, 100.0 * mv, 100.0 * mt);
        medians.push(json!({ "regime": r.regime, "val_accuracy": mv, "test_accuracy": mt }));
    }
    write_outputs(&cfg, &text, json!({ "per_seed": reports, "median": medians }))
}

fn load_splits(dir: &Path) -> Result<Splits> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory of base/val/test splits", dir.display())));
    }
    Ok(Splits {
        base: load_split(dir, "base")?,
        val: load_split(dir, "val")?,
        test: load_split(dir, "test")?,
    })
}
