use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::diffusion::NoiseSchedule;
use crate::metrics::{grad_norm, mode_mass_gap, tv_hist, w2_exact, HistGrid, Partition};
use crate::models::{Adam, Architecture, EmaState, ModelError, ModelParams, TensorMap};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

use super::losses::{d_loss_graph, g_loss_graph};
use super::{init_generator, AdversarialError, Assets, DiscInit, Generator, TrainConfig};

/// Pool of paired training samples, drawn with replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub cond: Option<Tensor<T>>,
}

/// Fixed held-out pairs the generator is scored on.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub cond: Option<Tensor<T>>,
    pub partition: Partition,
    /// Histogram TV is only meaningful in very low dimension.
    pub tv: bool,
}

/// One line of training telemetry. Training fields are absent on the
/// step-0 record, which only scores the initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_d: Option<f64>,
    pub loss_g_adv: Option<f64>,
    pub loss_g_mse: Option<f64>,
    pub loss_g_perc: Option<f64>,
    pub d_logit_real_mean: Option<f64>,
    pub d_logit_fake_mean: Option<f64>,
    pub grad_norm_g: Option<f64>,
    pub grad_norm_d: Option<f64>,
    pub w2_eval: f64,
    pub mode_mass_gap: f64,
    pub tv_eval: Option<f64>,
    pub wall_ms: Option<f64>,
}

pub trait MetricsSink {
    fn emit(&mut self, record: &MetricsRecord) -> Result<(), String>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn emit(&mut self, record: &MetricsRecord) -> Result<(), String> {
        self.push(record.clone());
        Ok(())
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct RunState<T> {
    pub gen: Generator<T>,
    pub disc: ModelParams<T>,
    pub ema: EmaState<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub step: usize,
    pub rng: Rng,
}

/// Step-0 state: initialized generator, fresh or pretrained critic, zeroed optimizers.
pub fn init_run<T: Scalar>(
    cfg: &TrainConfig,
    gen_arch: &Architecture,
    disc_arch: &Architecture,
    assets: &Assets<T>,
    sched: &NoiseSchedule,
) -> Result<RunState<T>, AdversarialError> {
    let gen = init_generator(cfg, gen_arch, assets, sched)?;
    if gen_arch.input_shape() != disc_arch.input_shape() {
        return Err(AdversarialError::Config("generator and critic disagree on the sample shape".into()));
    }
    let mut disc = ModelParams::init(disc_arch.clone(), &mut rng::derive(cfg.seed, "disc"))?;
    if cfg.disc_init == DiscInit::Pretrained {
        let trunk = assets.disc.as_ref().ok_or(AdversarialError::MissingAsset("disc"))?;
        if trunk.arch() != disc_arch {
            return Err(AdversarialError::ArchMismatch {
                name: "disc",
                expected: Box::new(disc_arch.clone()),
                got: Box::new(trunk.arch().clone()),
            });
        }
        for (name, t) in trunk.tensors() {
            if !name.starts_with("head.") {
                disc.set(name, t.clone())?;
            }
        }
    }
    let trainable = gen.trainable();
    Ok(RunState {
        ema: EmaState::new(&trainable, T::of(cfg.ema_decay))?,
        opt_g: Adam::new(T::of(cfg.lr_g), &trainable),
        opt_d: Adam::new(T::of(cfg.lr_d), disc.tensors()),
        gen,
        disc,
        step: 0,
        rng: rng::derive(cfg.seed, "train"),
    })
}

/// Scores the live generator: `(W2, mode-mass gap, TV)`.
pub fn evaluate<T: Scalar>(gen: &Generator<T>, eval: &EvalSet<T>) -> Result<(f64, f64, Option<f64>), AdversarialError> {
    let out = gen.forward(&eval.y, eval.cond.as_ref())?;
    let w2 = w2_exact(&out, &eval.x)?.f64();
    let gap = mode_mass_gap(&out, &eval.x, &eval.partition)?.f64();
    let tv = if eval.tv {
        let grid = HistGrid::pooled(&out, &eval.x, 100, 3.0)?;
        Some(tv_hist(&out, &eval.x, &grid)?.f64())
    } else {
        None
    };
    Ok((w2, gap, tv))
}

fn diverged(step: usize) -> impl Fn(AdversarialError) -> AdversarialError {
    move |e| match e {
        AdversarialError::Model(ModelError::Autodiff(AutodiffError::NonFinite { op })) => {
            AdversarialError::Diverged { step, detail: format!("non-finite value produced by {op}") }
        }
        other => other,
    }
}

struct StepStats {
    loss_d: f64,
    adv: f64,
    mse: f64,
    perc: f64,
    logit_real: f64,
    logit_fake: f64,
    grad_g: f64,
    grad_d: f64,
}

fn mean<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.f64()).sum::<f64>() / v.len() as f64
}

fn one_step<T: Scalar>(cfg: &TrainConfig, state: &mut RunState<T>, data: &TrainData<T>) -> Result<StepStats, AdversarialError> {
    let r = &mut state.rng;
    let n = data.x.shape()[0];
    let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..n)).collect();
    let x = data.x.select_rows(&idx);
    let mut y = data.y.select_rows(&idx);
    let cond = data.cond.as_ref().map(|c| c.select_rows(&idx));
    if cfg.inject_noise > 0.0 {
        let row = y.numel() / cfg.batch;
        let scales: Vec<T> = (0..cfg.batch).map(|_| rng::uniform(T::zero(), T::of(cfg.inject_noise), r)).collect();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += scales[i / row] * rng::normal::<T>(r);
        }
    }
    let cond = cond.as_ref();

    // critic update against detached generator output
    let fake = state.gen.forward(&y, cond)?;
    let (loss_d, logit_real, logit_fake, d_grads) = {
        let tape = Tape::new();
        let d = state.disc.bind(&tape, |_| true);
        let (loss, lr, lf) = d_loss_graph(&d, &state.disc, tape.constant(x.clone()), tape.constant(fake))?;
        tape.backward(loss)?;
        let names: Vec<&str> = state.disc.names().collect();
        (loss.item().f64(), mean(&lr.data()), mean(&lf.data()), d.grads(names)?)
    };
    let grad_d = grad_norm(&d_grads)?.f64();
    state.disc.step(&mut state.opt_d, &d_grads)?;

    // generator update through the refreshed critic
    let tape = Tape::new();
    let g = state.gen.bind(&tape, true);
    let d = state.disc.bind_frozen(&tape);
    let out = state.gen.graph(&g, tape.constant(y), cond)?;
    let [total, adv, mse, perc, _] = g_loss_graph(&d, &state.disc, out, tape.constant(x), cfg)?;
    let mut grad_g = 0.0;
    let mut params = state.gen.trainable();
    if !params.is_empty() {
        tape.backward(total)?;
        let grads: TensorMap<T> = state.gen.grads(&g)?;
        grad_g = grad_norm(&grads)?.f64();
        state.opt_g.step(&mut params, &grads)?;
        state.gen.set_trainable(&params)?;
        state.ema.update(&params)?;
    }
    Ok(StepStats {
        loss_d,
        adv: adv.item().f64(),
        mse: mse.item().f64(),
        perc: perc.item().f64(),
        logit_real,
        logit_fake,
        grad_g,
        grad_d,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Pause after this step; a later call continues exactly where this one stopped.
    pub stop_at: Option<usize>,
    /// Put elapsed milliseconds in records. Off, logs of identical runs are byte-identical.
    pub timed: bool,
}

/// Alternating critic and generator updates from `state.step` up to `cfg.steps`.
///
/// A record is emitted for the initialization (when starting at step 0), every
/// `eval_every` steps and at step `cfg.steps`.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    state: &mut RunState<T>,
    data: &TrainData<T>,
    eval: &EvalSet<T>,
    sink: &mut dyn MetricsSink,
    opts: TrainOptions,
) -> Result<(), AdversarialError> {
    cfg.validate()?;
    if data.x.shape()[0] != data.y.shape()[0] || data.x.shape()[0] == 0 {
        return Err(AdversarialError::Shape(format!("training pool {:?} vs {:?}", data.x.shape(), data.y.shape())));
    }
    let clock = Instant::now();
    let wall = |timed: bool| timed.then(|| clock.elapsed().as_secs_f64() * 1e3);
    let timed = opts.timed;
    let end = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    if state.step == 0 {
        let (w2, gap, tv) = evaluate(&state.gen, eval)?;
        let rec = MetricsRecord {
            step: 0,
            loss_d: None,
            loss_g_adv: None,
            loss_g_mse: None,
            loss_g_perc: None,
            d_logit_real_mean: None,
            d_logit_fake_mean: None,
            grad_norm_g: None,
            grad_norm_d: None,
            w2_eval: w2,
            mode_mass_gap: gap,
            tv_eval: tv,
            wall_ms: wall(timed),
        };
        sink.emit(&rec).map_err(AdversarialError::Sink)?;
    }
    while state.step < end {
        let step = state.step + 1;
        let s = one_step(cfg, state, data).map_err(diverged(step))?;
        for (name, v) in [("loss_d", s.loss_d), ("loss_g_adv", s.adv), ("loss_g_mse", s.mse), ("loss_g_perc", s.perc)] {
            if !v.is_finite() {
                return Err(AdversarialError::Diverged { step, detail: format!("{name} = {v}") });
            }
        }
        state.step = step;
        if step.is_multiple_of(cfg.eval_every) || step == cfg.steps {
            let (w2, gap, tv) = evaluate(&state.gen, eval)?;
            let rec = MetricsRecord {
                step,
                loss_d: Some(s.loss_d),
                loss_g_adv: Some(s.adv),
                loss_g_mse: Some(s.mse),
                loss_g_perc: Some(s.perc),
                d_logit_real_mean: Some(s.logit_real),
                d_logit_fake_mean: Some(s.logit_fake),
                grad_norm_g: Some(s.grad_g),
                grad_norm_d: Some(s.grad_d),
                w2_eval: w2,
                mode_mass_gap: gap,
                tv_eval: tv,
                wall_ms: wall(timed),
            };
            sink.emit(&rec).map_err(AdversarialError::Sink)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{degrade, DegradationSpec};
    use crate::diffusion::{make_schedule, GmmSpec};
    use crate::models::ModelParams;

    fn setup(seed: u64) -> (TrainConfig, RunState<f64>, TrainData<f64>, EvalSet<f64>) {
        let gmm = GmmSpec::ring(4, 2.0, 0.3);
        let (x, _) = gmm.sample::<f64>(128, &mut rng::seeded(1));
        let spec = DegradationSpec::contraction(2, 0.5, 0.1);
        let y = degrade(&x, &spec, 2).unwrap();
        let sched = make_schedule(200, 1e-4, 0.04).unwrap();
        let arch = Architecture::MlpDenoiser { data_dim: 2, hidden: vec![16, 16], time_dim: 8, cond_dim: 0 };
        let disc_arch = Architecture::MlpCritic { data_dim: 2, hidden: vec![16] };
        let assets = Assets { diffusion: Some(ModelParams::init(arch.clone(), &mut rng::seeded(3)).unwrap()), ..Default::default() };
        let cfg = TrainConfig { steps: 10, batch: 16, eval_every: 5, seed, lora_rank: 4, ..Default::default() };
        let state = init_run(&cfg, &arch, &disc_arch, &assets, &sched).unwrap();
        let centers = gmm.means.clone();
        let eval = EvalSet { x: x.slice_rows(0, 64), y: y.slice_rows(0, 64), cond: None, partition: Partition::Voronoi { centers }, tv: true };
        (cfg, state, TrainData { x, y, cond: None }, eval)
    }

    #[test]
    fn records_at_schedule() {
        let (cfg, mut state, data, eval) = setup(0);
        let mut log = Vec::new();
        train(&cfg, &mut state, &data, &eval, &mut log, TrainOptions::default()).unwrap();
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 5, 10]);
        assert!(log[0].loss_d.is_none() && log[0].grad_norm_g.is_none());
        assert!(log[2].loss_d.unwrap().is_finite() && log[2].grad_norm_g.unwrap() > 0.0);
        assert!(log.iter().all(|r| r.wall_ms.is_none() && r.tv_eval.is_some()));
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let run = |seed| {
            let (cfg, mut state, data, eval) = setup(seed);
            let mut log = Vec::new();
            train(&cfg, &mut state, &data, &eval, &mut log, TrainOptions::default()).unwrap();
            serde_json::to_string(&log).unwrap()
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn split_run_matches_straight_run() {
        let (cfg, mut a, data, eval) = setup(0);
        let mut straight = Vec::new();
        train(&cfg, &mut a, &data, &eval, &mut straight, TrainOptions::default()).unwrap();

        let (_, mut b, _, _) = setup(0);
        let mut split = Vec::new();
        train(&cfg, &mut b, &data, &eval, &mut split, TrainOptions { stop_at: Some(3), timed: false }).unwrap();
        train(&cfg, &mut b, &data, &eval, &mut split, TrainOptions::default()).unwrap();
        assert_eq!(straight, split);
        assert_eq!(a.gen, b.gen);
    }

    #[test]
    fn zero_rank_leaves_generator_untouched() {
        let (cfg, mut state, data, eval) = setup(0);
        let cfg = TrainConfig { lora_rank: 0, ..cfg };
        let before = state.gen.clone();
        let mut log = Vec::new();
        state.gen.lora = crate::models::LoraAdapter::new(&before.base, &[], 0, 1.0, &mut rng::seeded(0)).unwrap();
        let before = state.gen.clone();
        state.opt_g = Adam::new(1e-3, &state.gen.trainable());
        state.ema = EmaState::new(&state.gen.trainable(), 0.999).unwrap();
        train(&cfg, &mut state, &data, &eval, &mut log, TrainOptions::default()).unwrap();
        assert_eq!(state.gen, before);
        assert_eq!(log.last().unwrap().grad_norm_g, Some(0.0));
    }

    #[test]
    fn overflow_is_reported_as_divergence() {
        let (cfg, mut state, data, eval) = setup(0);
        let w = state.disc.get("l0.weight").unwrap().map(|_| 1e300);
        state.disc.set("l0.weight", w).unwrap();
        let err = train(&cfg, &mut state, &data, &eval, &mut Vec::new(), TrainOptions::default()).unwrap_err();
        assert!(matches!(err, AdversarialError::Diverged { step: 1, .. }), "{err}");
    }
}
