use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{BaselineConfig, TrainConfig};
use crate::degradation::{DatasetSpec, DegradationSpec, FitConfig, Operator};
use crate::diffusion::{make_schedule, DsmConfig, NoiseSchedule};
use crate::metrics::W2_EXACT_CAP;
use crate::models::Architecture;

use super::HarnessError;

/// Overrides `train.seed` when set.
pub const SEED_ENV: &str = "HYPIRB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub spec: DatasetSpec,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 200, beta_start: 1e-4, beta_end: 0.04 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, HarnessError> {
        make_schedule(self.steps, self.beta_start, self.beta_end).map_err(|e| HarnessError::Config(vec![format!("schedule: {e}")]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub generator: Architecture,
    pub critic: Architecture,
    /// When set, the generator works on codes of this autoencoder.
    #[serde(default)]
    pub autoencoder: Option<Architecture>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub dsm: DsmConfig,
    pub baseline: BaselineConfig,
    pub autoencoder: FitConfig,
    pub preremoval: FitConfig,
}

/// Checkpoint locations of pretrained networks. Relative paths resolve against the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetPaths {
    pub diffusion: Option<PathBuf>,
    pub mse: Option<PathBuf>,
    pub dae: Option<PathBuf>,
    pub disc: Option<PathBuf>,
    pub autoencoder: Option<PathBuf>,
    /// Encoder fitted for degradation pre-removal; applied to degraded inputs only.
    pub preremoval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Histogram TV, only honoured for data of dimension ≤ 2.
    pub tv: bool,
    /// Cells of the quantile partition used for patch data.
    pub quantile_cells: usize,
    /// Save a resumable checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tv: true, quantile_cells: 8, checkpoint_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub degradation: DegradationSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub models: ModelsConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub assets: AssetPaths,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn is_denoiser(a: &Architecture) -> bool {
    matches!(a, Architecture::MlpDenoiser { .. } | Architecture::ConvDenoiser { .. })
}

fn is_critic(a: &Architecture) -> bool {
    matches!(a, Architecture::MlpCritic { .. } | Architecture::ConvCritic { .. })
}

fn latent_shape(ae: &Architecture) -> Vec<usize> {
    match ae {
        Architecture::ConvAutoencoder { latent_channels, height, width, .. } => vec![*latent_channels, *height, *width],
        other => other.input_shape(),
    }
}

impl ExperimentConfig {
    /// Parses JSON, rejecting unknown keys and naming the path of the first malformed field.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.into_inner().to_string();
            HarnessError::Config(vec![if path == "." { msg } else { format!("{path}: {msg}") }])
        })
    }

    /// Reads, applies the seed override and validates; relative paths become relative to the file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.train.seed = v.trim().parse().map_err(|_| HarnessError::Config(vec![format!("{SEED_ENV}: `{v}` is not an unsigned integer")]))?;
        }
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let a = &mut self.assets;
        for p in [&mut a.diffusion, &mut a.mse, &mut a.dae, &mut a.disc, &mut a.autoencoder, &mut a.preremoval].into_iter().flatten() {
            fix(p);
        }
    }

    /// Shape of the rows the generator consumes and produces.
    pub fn working_shape(&self) -> Vec<usize> {
        match &self.models.autoencoder {
            Some(ae) => latent_shape(ae),
            None => self.data.spec.sample_shape(),
        }
    }

    /// Every problem with the configuration, each prefixed by its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, path: &str, msg: String| {
            if !ok {
                out.push(format!("{path}: {msg}"));
            }
        };
        need(!self.name.trim().is_empty(), "name", "must not be empty".into());
        need(self.data.n_train >= 1, "data.n_train", "must be at least 1".into());
        need(
            (2..=W2_EXACT_CAP).contains(&self.data.n_eval),
            "data.n_eval",
            format!("must lie in [2, {W2_EXACT_CAP}] (exact transport cap)"),
        );
        if let Err(e) = self.data.spec.validate() {
            need(false, "data.spec", e.to_string());
        }
        if let Err(e) = self.degradation.validate() {
            need(false, "degradation", e.to_string());
        }
        let sample = self.data.spec.sample_shape();
        match (&self.degradation.operator, &self.data.spec) {
            (Operator::Linear { dim, .. }, DatasetSpec::Gmm { .. }) => {
                need(sample == [*dim], "degradation.operator.dim", format!("{dim} does not match data dimension {}", sample[0]));
            }
            (Operator::Blur { .. }, DatasetSpec::Textures { .. }) => {}
            _ => need(false, "degradation.operator", "linear maps apply to point data, blur kernels to patches".into()),
        }
        if let Err(HarnessError::Config(m)) = self.schedule.build() {
            out.extend(m);
        }
        let mut need = |ok: bool, path: &str, msg: String| {
            if !ok {
                out.push(format!("{path}: {msg}"));
            }
        };
        let m = &self.models;
        for (path, arch, want) in [("models.generator", &m.generator, "denoiser"), ("models.critic", &m.critic, "critic")] {
            match arch.validate() {
                Err(e) => need(false, path, e.to_string()),
                Ok(()) => need(if want == "denoiser" { is_denoiser(arch) } else { is_critic(arch) }, path, format!("must be a {want} architecture")),
            }
        }
        if let Some(ae) = &m.autoencoder {
            match ae.validate() {
                Err(e) => need(false, "models.autoencoder", e.to_string()),
                Ok(()) => need(
                    matches!(ae, Architecture::ConvAutoencoder { .. }) && ae.input_shape() == sample,
                    "models.autoencoder",
                    format!("must be an autoencoder over samples of shape {sample:?}"),
                ),
            }
        }
        let work = self.working_shape();
        need(m.generator.input_shape() == work, "models.generator", format!("input shape {:?} != working shape {work:?}", m.generator.input_shape()));
        need(m.critic.input_shape() == work, "models.critic", format!("input shape {:?} != working shape {work:?}", m.critic.input_shape()));
        if m.generator.cond_dim() > 0 {
            need(matches!(self.data.spec, DatasetSpec::Textures { .. }), "models.generator.cond_dim", "conditioning needs texture data".into());
        }
        if self.train.texture_cond {
            need(matches!(self.data.spec, DatasetSpec::Textures { .. }), "train.texture_cond", "needs texture data".into());
            need(m.generator.cond_dim() == 1, "train.texture_cond", "generator needs cond_dim = 1".into());
        }
        need(
            self.train.t_star_alpha_bar > 0.0 && self.train.t_star_alpha_bar < 1.0,
            "train.t_star_alpha_bar",
            "must lie in (0, 1)".into(),
        );
        for p in self.train.problems() {
            if !p.starts_with("t_star_alpha_bar") {
                out.push(format!("train.{p}"));
            }
        }
        let mut need = |ok: bool, path: &str, msg: &str| {
            if !ok {
                out.push(format!("{path}: {msg}"));
            }
        };
        let p = &self.pretrain;
        for (path, batch, lr) in [
            ("pretrain.dsm", p.dsm.batch, p.dsm.lr),
            ("pretrain.baseline", p.baseline.batch, p.baseline.lr),
            ("pretrain.autoencoder", p.autoencoder.batch, p.autoencoder.lr),
            ("pretrain.preremoval", p.preremoval.batch, p.preremoval.lr),
        ] {
            need(batch >= 1, &format!("{path}.batch"), "must be at least 1");
            need(lr > 0.0 && lr.is_finite(), &format!("{path}.lr"), "must be positive");
        }
        need(p.baseline.dae_noise >= 0.0, "pretrain.baseline.dae_noise", "must be non-negative");
        need(self.eval.quantile_cells >= 1, "eval.quantile_cells", "must be at least 1");
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match self.problems() {
            p if p.is_empty() => Ok(()),
            p => Err(HarnessError::Config(p)),
        }
    }
}
