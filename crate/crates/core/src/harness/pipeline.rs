use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    self, evaluate, init_run, pretrain_baseline, train, Assets, BaselineKind, Controls, DiscInit, EvalSet, Generator, Head,
    InitMode, RunState, TrainData, TrainOptions,
};
use crate::autodiff::Tensor;
use crate::degradation::{degrade, fit_preremoval_encoder, gen_dataset, pretrain_autoencoder, DatasetSpec};
use crate::diffusion::{pretrain_dsm, NoiseSchedule};
use crate::metrics::Partition;
use crate::models::{Adam, Architecture, EmaState, LoraAdapter, LoraPair, ModelParams, TensorMap};
use crate::rng;

use super::checkpoint::{from_f64, to_f64};
use super::{
    load_params, read_data_file, save_params, write_data_file, Checkpoint, DataFile, ExperimentConfig, HarnessError, JsonlSink,
    RunLock,
};

/// Data in the space the generator works in, plus what is needed to leave it.
pub struct Prepared {
    pub train: TrainData<f64>,
    pub eval: EvalSet<f64>,
    pub sched: NoiseSchedule,
    /// Mean and standard deviation used to standardize the richness channel.
    pub cond_stats: Option<(f64, f64)>,
    pub autoencoder: Option<ModelParams<f64>>,
    /// Encoder applied to degraded inputs (the pre-removal one when configured).
    pub input_encoder: Option<ModelParams<f64>>,
}

struct Raw {
    x: Tensor<f64>,
    y: Tensor<f64>,
    richness: Option<Vec<f64>>,
}

fn raw_data(cfg: &ExperimentConfig) -> Result<Raw, HarnessError> {
    let n = cfg.data.n_train + cfg.data.n_eval;
    let ds = gen_dataset::<f64>(&cfg.data.spec, n, cfg.data.seed)?;
    let y = degrade(&ds.x, &cfg.degradation, cfg.data.seed.wrapping_add(1))?;
    Ok(Raw { x: ds.x, y, richness: ds.richness })
}

fn asset_path<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, HarnessError> {
    p.as_deref().ok_or_else(|| HarnessError::Config(vec![format!("assets.{name}: required for this command")]))
}

fn encoded(ae: &ModelParams<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>, HarnessError> {
    let tape = crate::autodiff::Tape::new();
    let p = ae.bind_frozen(&tape);
    Ok(crate::models::encode(&p, ae.arch(), tape.constant(x.clone()))?.tensor())
}

fn decoded(ae: &ModelParams<f64>, z: &Tensor<f64>) -> Result<Tensor<f64>, HarnessError> {
    let tape = crate::autodiff::Tape::new();
    let p = ae.bind_frozen(&tape);
    Ok(crate::models::decode(&p, ae.arch(), tape.constant(z.clone()))?.tensor())
}

/// Generates the paired data, splits off the eval rows and moves both into the working space.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    let raw = raw_data(cfg)?;
    let sched = cfg.schedule.build()?;
    let (autoencoder, input_encoder) = match &cfg.models.autoencoder {
        None => (None, None),
        Some(_) => {
            let ae = load_params::<f64>(asset_path(&cfg.assets.autoencoder, "autoencoder")?)?;
            let enc = match &cfg.assets.preremoval {
                Some(p) => load_params::<f64>(p)?,
                None => ae.clone(),
            };
            (Some(ae), Some(enc))
        }
    };
    let (x, y) = match (&autoencoder, &input_encoder) {
        (Some(ae), Some(enc)) => (encoded(ae, &raw.x)?, encoded(enc, &raw.y)?),
        _ => (raw.x, raw.y),
    };
    let nt = cfg.data.n_train;
    let mut cond_stats = None;
    let cond = match (&raw.richness, cfg.models.generator.cond_dim()) {
        (_, 0) => None,
        (Some(r), _) => {
            let m = r[..nt].iter().sum::<f64>() / nt as f64;
            let sd = (r[..nt].iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nt as f64).sqrt().max(1e-12);
            cond_stats = Some((m, sd));
            Some(Tensor::new(vec![r.len(), 1], r.iter().map(|v| (v - m) / sd).collect())?)
        }
        (None, _) => return Err(HarnessError::Config(vec!["models.generator.cond_dim: conditioning needs texture data".into()])),
    };
    let split = |t: &Tensor<f64>| (t.slice_rows(0, nt), t.slice_rows(nt, nt + cfg.data.n_eval));
    let (xt, xe) = split(&x);
    let (yt, ye) = split(&y);
    let (ct, ce) = match &cond {
        Some(c) => {
            let (a, b) = split(c);
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let partition = match &cfg.data.spec {
        DatasetSpec::Gmm { gmm } if autoencoder.is_none() => Partition::Voronoi { centers: gmm.means.clone() },
        _ => {
            let d = xt.numel() / nt;
            Partition::quantiles(&xt, vec![1.0 / (d as f64).sqrt(); d], cfg.eval.quantile_cells)?
        }
    };
    let tv = cfg.eval.tv && xt.numel() / nt <= 2;
    Ok(Prepared {
        train: TrainData { x: xt, y: yt, cond: ct },
        eval: EvalSet { x: xe, y: ye, cond: ce, partition, tv },
        sched,
        cond_stats,
        autoencoder,
        input_encoder,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainKind {
    Diffusion,
    Mse,
    Dae,
    Ae,
    Disc,
}

impl FromStr for PretrainKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "mse" => Ok(Self::Mse),
            "dae" => Ok(Self::Dae),
            "ae" => Ok(Self::Ae),
            "disc" => Ok(Self::Disc),
            _ => Err(format!("unknown pretraining kind `{s}` (expected diffusion, mse, dae, ae or disc)")),
        }
    }
}

/// Trains one kind of asset and writes it under `out_dir` (or `out`); returns the files written.
///
/// `ae` writes the autoencoder and, fitted on top of it, the pre-removal encoder.
pub fn pretrain(cfg: &ExperimentConfig, kind: PretrainKind, out: Option<&Path>) -> Result<Vec<PathBuf>, HarnessError> {
    let target = |name: &str| out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(format!("{name}.ckpt")));
    let p = &cfg.pretrain;
    if kind == PretrainKind::Ae {
        let arch = cfg.models.autoencoder.clone().ok_or_else(|| HarnessError::Config(vec!["models.autoencoder: required for `pretrain ae`".into()]))?;
        let raw = raw_data(cfg)?;
        let nt = cfg.data.n_train;
        let init = ModelParams::init(arch, &mut rng::derive(p.autoencoder.seed, "ae-init"))?;
        let (ae, _) = pretrain_autoencoder(init, &raw.x.slice_rows(0, nt), &p.autoencoder)?;
        let pre = fit_preremoval_encoder(&ae, &raw.x.slice_rows(0, nt), &raw.y.slice_rows(0, nt), &p.preremoval)?;
        let (a, b) = (target("autoencoder"), cfg.out_dir.join("preremoval.ckpt"));
        save_params(&ae, "autoencoder", &a)?;
        save_params(&pre, "preremoval", &b)?;
        return Ok(vec![a, b]);
    }
    let prep = prepare(cfg)?;
    let d = &prep.train;
    let gen_arch = &cfg.models.generator;
    let mut baseline = p.baseline.clone();
    baseline.t_star = prep.sched.time_for_alpha_bar(cfg.train.t_star_alpha_bar);
    let (params, name) = match kind {
        PretrainKind::Diffusion => {
            let init = ModelParams::init(gen_arch.clone(), &mut rng::derive(p.dsm.seed, "dsm-init"))?;
            (pretrain_dsm(init, &d.x, d.cond.as_ref(), &prep.sched, &p.dsm)?.0, "diffusion")
        }
        PretrainKind::Mse => (pretrain_baseline(BaselineKind::Mse, gen_arch, &d.x, &d.y, d.cond.as_ref(), &baseline)?.0, "mse"),
        PretrainKind::Dae => (pretrain_baseline(BaselineKind::Dae, gen_arch, &d.x, &d.y, d.cond.as_ref(), &baseline)?.0, "dae"),
        PretrainKind::Disc => {
            (pretrain_baseline(BaselineKind::DiscClassifier, &cfg.models.critic, &d.x, &d.y, None, &baseline)?.0, "disc")
        }
        PretrainKind::Ae => unreachable!(),
    };
    let path = target(name);
    save_params(&params, name, &path)?;
    Ok(vec![path])
}

fn load_assets(cfg: &ExperimentConfig) -> Result<Assets<f64>, HarnessError> {
    let a = &cfg.assets;
    let mut out = Assets::default();
    match cfg.train.init_mode {
        InitMode::Diffusion => out.diffusion = Some(load_params(asset_path(&a.diffusion, "diffusion")?)?),
        InitMode::Mse => out.mse = Some(load_params(asset_path(&a.mse, "mse")?)?),
        InitMode::Dae => out.dae = Some(load_params(asset_path(&a.dae, "dae")?)?),
        InitMode::Scratch => {}
    }
    if cfg.train.disc_init == DiscInit::Pretrained {
        out.disc = Some(load_params(asset_path(&a.disc, "disc")?)?);
    }
    Ok(out)
}

fn prefixed<'a>(prefix: &'a str, map: &'a TensorMap<f64>) -> impl Iterator<Item = (String, Tensor<f64>)> + 'a {
    let prefix = prefix.to_string();
    map.iter().map(move |(k, t)| (format!("{prefix}{k}"), to_f64(t)))
}

fn strip(tensors: &IndexMap<String, Tensor<f64>>, prefix: &str) -> TensorMap<f64> {
    tensors.iter().filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), from_f64(t)))).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunMeta {
    kind: String,
    config: ExperimentConfig,
    head: Head,
    lora_rank: usize,
    lora_alpha: f64,
    lora_targets: Vec<String>,
    unfrozen: Vec<String>,
    critic: Architecture,
    opt_g_steps: u64,
    opt_d_steps: u64,
    cond_stats: Option<(f64, f64)>,
}

/// Everything in `state` as one checkpoint, stamped with the configuration that produced it.
pub fn save_run(cfg: &ExperimentConfig, state: &RunState<f64>, cond_stats: Option<(f64, f64)>, path: &Path) -> Result<(), HarnessError> {
    let g = &state.gen;
    let meta = RunMeta {
        kind: "run".into(),
        config: cfg.clone(),
        head: g.head,
        lora_rank: g.lora.rank(),
        lora_alpha: g.lora.alpha(),
        lora_targets: g.lora.targets().map(String::from).collect(),
        unfrozen: g.unfrozen.clone(),
        critic: state.disc.arch().clone(),
        opt_g_steps: state.opt_g.steps_taken(),
        opt_d_steps: state.opt_d.steps_taken(),
        cond_stats,
    };
    let (gm, gv) = state.opt_g.moments();
    let (dm, dv) = state.opt_d.moments();
    let mut tensors = IndexMap::new();
    tensors.extend(prefixed("gen.base.", g.base.tensors()));
    tensors.extend(prefixed("gen.lora.", &g.lora.to_map()));
    tensors.extend(prefixed("disc.", state.disc.tensors()));
    tensors.extend(prefixed("ema.", state.ema.shadow()));
    tensors.extend(prefixed("opt_g.m.", gm));
    tensors.extend(prefixed("opt_g.v.", gv));
    tensors.extend(prefixed("opt_d.m.", dm));
    tensors.extend(prefixed("opt_d.v.", dv));
    Checkpoint {
        arch: g.base.arch().clone(),
        meta: serde_json::to_value(meta).expect("meta serializes"),
        tensors,
        rng: Some(rng::RngState::capture(&state.rng)),
        step: state.step,
    }
    .save(path)
}

/// Inverse of [`save_run`]: the stored configuration, the resumable state and the conditioning statistics.
pub fn load_run(path: &Path) -> Result<(ExperimentConfig, RunState<f64>, Option<(f64, f64)>), HarnessError> {
    let ck = Checkpoint::load(path)?;
    let bad = |detail: String| HarnessError::Checkpoint { path: path.to_path_buf(), detail };
    if ck.kind() != Some("run") {
        return Err(bad(format!("expected a training-run checkpoint, found {:?}", ck.kind())));
    }
    let meta: RunMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| bad(format!("run metadata: {e}")))?;
    let t = &ck.tensors;
    let base = ModelParams::new(ck.arch.clone(), strip(t, "gen.base."))?;
    let lora_map = strip(t, "gen.lora.");
    let mut pairs = IndexMap::new();
    for name in &meta.lora_targets {
        let get = |s: &str| lora_map.get(&format!("{name}.{s}")).cloned().ok_or_else(|| bad(format!("missing factor {name}.{s}")));
        pairs.insert(name.clone(), LoraPair { a: get("lora_a")?, b: get("lora_b")? });
    }
    let lora = LoraAdapter::from_pairs(&base, meta.lora_rank, meta.lora_alpha, pairs)?;
    let gen = Generator { base, lora, head: meta.head, unfrozen: meta.unfrozen };
    let disc = ModelParams::new(meta.critic, strip(t, "disc."))?;
    let tc = &meta.config.train;
    let ema = EmaState::new(&strip(t, "ema."), tc.ema_decay)?;
    let mut opt_g = Adam::new(tc.lr_g, &gen.trainable());
    opt_g.restore(meta.opt_g_steps, strip(t, "opt_g.m."), strip(t, "opt_g.v."))?;
    let mut opt_d = Adam::new(tc.lr_d, disc.tensors());
    opt_d.restore(meta.opt_d_steps, strip(t, "opt_d.m."), strip(t, "opt_d.v."))?;
    let rng = ck.rng.as_ref().and_then(|r| r.restore()).ok_or_else(|| bad("missing or invalid rng state".into()))?;
    let state = RunState { gen, disc, ema, opt_g, opt_d, step: ck.step, rng };
    Ok((meta.config, state, meta.cond_stats))
}

fn same_experiment(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let mut b = b.clone();
    b.train.steps = a.train.steps;
    *a == b
}

/// Runs (or resumes) adversarial fine-tuning; returns the final checkpoint path.
///
/// Writes `config.json`, `metrics.jsonl`, `final.ckpt` and, with
/// `eval.checkpoint_every`, intermediate `step_<n>.ckpt` files into `out_dir`.
pub fn finetune(cfg: &ExperimentConfig, resume: Option<&Path>, timed: bool) -> Result<PathBuf, HarnessError> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let _lock = RunLock::acquire(dir)?;
    let prep = prepare(cfg)?;
    let metrics = dir.join("metrics.jsonl");
    let (mut state, mut sink) = match resume {
        Some(path) => {
            let (stored, state, _) = load_run(path)?;
            if !same_experiment(cfg, &stored) {
                return Err(HarnessError::Input(format!("{} was produced by a different configuration", path.display())));
            }
            let sink = JsonlSink::resume(&metrics, state.step)?;
            (state, sink)
        }
        None => {
            let assets = load_assets(cfg)?;
            let state = init_run(&cfg.train, &cfg.models.generator, &cfg.models.critic, &assets, &prep.sched)?;
            (state, JsonlSink::create(&metrics)?)
        }
    };
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(dir.join("config.json"), text + "\n").map_err(HarnessError::io(dir.join("config.json")))?;
    let every = cfg.eval.checkpoint_every;
    loop {
        let stop = state.step.checked_div(every).map_or(cfg.train.steps, |k| ((k + 1) * every).min(cfg.train.steps));
        train(&cfg.train, &mut state, &prep.train, &prep.eval, &mut sink, TrainOptions { stop_at: Some(stop), timed })?;
        if state.step >= cfg.train.steps {
            break;
        }
        save_run(cfg, &state, prep.cond_stats, &dir.join(format!("step_{}.ckpt", state.step)))?;
    }
    let path = dir.join("final.ckpt");
    save_run(cfg, &state, prep.cond_stats, &path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_mass_gap: Option<f64>,
}

/// Scores a run checkpoint on its own experiment's eval split. `metrics` ⊆ {w2, tv, modes}.
pub fn evaluate_checkpoint(path: &Path, metrics: &[&str]) -> Result<EvalReport, HarnessError> {
    if let Some(m) = metrics.iter().find(|m| !matches!(**m, "w2" | "tv" | "modes")) {
        return Err(HarnessError::Input(format!("unknown metric `{m}` (expected w2, tv or modes)")));
    }
    let (cfg, state, _) = load_run(path)?;
    let mut prep = prepare(&cfg)?;
    let want = |m: &str| metrics.contains(&m);
    prep.eval.tv = want("tv");
    if prep.eval.tv && prep.eval.x.numel() / prep.eval.x.shape()[0] > 2 {
        return Err(HarnessError::Input("tv is only available for data of dimension ≤ 2".into()));
    }
    let (w2, gap, tv) = evaluate(&state.gen, &prep.eval)?;
    Ok(EvalReport { step: state.step, w2: want("w2").then_some(w2), tv, mode_mass_gap: want("modes").then_some(gap) })
}

/// Restores every row of the data file at `input` and writes the result to `output`.
///
/// `controls.texture` is in standardized units of the training richness.
pub fn restore_file(ckpt: &Path, input: &Path, output: &Path, controls: Controls) -> Result<(), HarnessError> {
    let (cfg, state, _) = load_run(ckpt)?;
    let y = read_data_file(input)?.tensor()?;
    let want = cfg.data.spec.sample_shape();
    if y.shape()[1..] != want[..] {
        return Err(HarnessError::Input(format!("input rows have shape {:?}, the model expects {want:?}", &y.shape()[1..])));
    }
    let x = match &cfg.models.autoencoder {
        None => adversarial::restore(&state.gen, &y, controls)?,
        Some(_) => {
            let ae = load_params::<f64>(asset_path(&cfg.assets.autoencoder, "autoencoder")?)?;
            let enc = match &cfg.assets.preremoval {
                Some(p) => load_params::<f64>(p)?,
                None => ae.clone(),
            };
            let z = adversarial::restore(&state.gen, &encoded(&enc, &y)?, controls)?;
            decoded(&ae, &z)?
        }
    };
    write_data_file(output, &DataFile::from_tensor(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::tests::ring_json;
    use crate::harness::read_metrics;

    fn config(dir: &Path, steps: usize) -> ExperimentConfig {
        let mut v = ring_json();
        v["out_dir"] = dir.join("run").to_string_lossy().into_owned().into();
        v["train"] = serde_json::json!({"init_mode": "scratch", "steps": steps, "batch": 16, "eval_every": 4, "lora_rank": 4});
        ExperimentConfig::from_json(&v.to_string()).unwrap()
    }

    #[test]
    fn zero_steps_checkpoint_is_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), 0);
        let path = finetune(&cfg, None, false).unwrap();
        let (_, state, _) = load_run(&path).unwrap();
        let prep = prepare(&cfg).unwrap();
        let init = init_run(&cfg.train, &cfg.models.generator, &cfg.models.critic, &Assets::default(), &prep.sched).unwrap();
        assert_eq!(state.gen, init.gen);
        assert_eq!(state.disc, init.disc);
        assert_eq!(read_metrics(&cfg.out_dir.join("metrics.jsonl")).unwrap().len(), 1);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), 6);
        let path = finetune(&cfg, None, false).unwrap();
        let (stored, state, stats) = load_run(&path).unwrap();
        let again = dir.path().join("again.ckpt");
        save_run(&stored, &state, stats, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let straight = config(dir.path(), 12);
        finetune(&straight, None, false).unwrap();
        let expected = std::fs::read(straight.out_dir.join("metrics.jsonl")).unwrap();

        let mut split = straight.clone();
        split.out_dir = dir.path().join("split");
        split.eval.checkpoint_every = 5;
        finetune(&split, None, false).unwrap();
        // damage the tail of the log, then resume from the step-5 checkpoint
        let mid = split.out_dir.join("step_5.ckpt");
        finetune(&split, Some(&mid), false).unwrap();
        assert_eq!(std::fs::read(split.out_dir.join("metrics.jsonl")).unwrap(), expected);
        let a = Checkpoint::load(&straight.out_dir.join("final.ckpt")).unwrap();
        let b = Checkpoint::load(&split.out_dir.join("final.ckpt")).unwrap();
        assert_eq!(a.tensors, b.tensors);
    }

    #[test]
    fn missing_asset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), 1);
        cfg.train.init_mode = InitMode::Diffusion;
        let err = finetune(&cfg, None, false).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
        assert!(err.to_string().contains("assets.diffusion"));
    }

    #[test]
    fn restore_file_writes_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), 2);
        let ckpt = finetune(&cfg, None, false).unwrap();
        let input = dir.path().join("y.json");
        write_data_file(&input, &DataFile::from_tensor(&Tensor::from_fn(vec![5, 2], |i| i as f64 * 0.1))).unwrap();
        let out = dir.path().join("x.json");
        restore_file(&ckpt, &input, &out, Controls { rho: 0.0, texture: None, seed: 0 }).unwrap();
        assert_eq!(read_data_file(&out).unwrap().shape, vec![5, 2]);
        let report = evaluate_checkpoint(&ckpt, &["w2", "modes"]).unwrap();
        assert!(report.w2.is_some() && report.tv.is_none() && report.mode_mass_gap.is_some());
    }
}
