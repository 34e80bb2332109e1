use serde::{Deserialize, Serialize};

use super::AdversarialError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Diffusion,
    Mse,
    Dae,
    Scratch,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Diffusion => "diffusion",
            Self::Mse => "mse",
            Self::Dae => "dae",
            Self::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscInit {
    Scratch,
    Pretrained,
}

/// Hyperparameters of one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub init_mode: InitMode,
    pub disc_init: DiscInit,
    pub lora_rank: usize,
    /// LoRA numerator; `None` means equal to the rank (unit scale).
    pub lora_alpha: Option<f64>,
    pub lambda_adv: f64,
    pub lambda_perc: f64,
    pub lambda_mse: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch: usize,
    pub steps: usize,
    /// Upper end of the per-sample input noise scale used during training.
    pub inject_noise: f64,
    pub texture_cond: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub ema_decay: f64,
    /// Injection time is the index whose ᾱ is closest to this value.
    pub t_star_alpha_bar: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init_mode: InitMode::Diffusion,
            disc_init: DiscInit::Scratch,
            lora_rank: 8,
            lora_alpha: None,
            lambda_adv: 0.5,
            lambda_perc: 5.0,
            lambda_mse: 1.0,
            lr_g: 1e-3,
            lr_d: 1e-3,
            batch: 64,
            steps: 3000,
            inject_noise: 0.1,
            texture_cond: false,
            seed: 0,
            eval_every: 25,
            ema_decay: 0.999,
            t_star_alpha_bar: 0.5,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, each prefixed with its field name.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, field: &str, msg: &str| {
            if !ok {
                out.push(format!("{field}: {msg}"));
            }
        };
        for (field, v) in [("lambda_adv", self.lambda_adv), ("lambda_perc", self.lambda_perc), ("lambda_mse", self.lambda_mse)] {
            need(v >= 0.0 && v.is_finite(), field, "must be a finite non-negative number");
        }
        need(self.lr_g > 0.0 && self.lr_g.is_finite(), "lr_g", "must be positive");
        need(self.lr_d > 0.0 && self.lr_d.is_finite(), "lr_d", "must be positive");
        need(self.batch >= 1, "batch", "must be at least 1");
        need(self.inject_noise >= 0.0 && self.inject_noise.is_finite(), "inject_noise", "must be non-negative");
        need(self.eval_every >= 1, "eval_every", "must be at least 1");
        need((0.0..=1.0).contains(&self.ema_decay), "ema_decay", "must lie in [0, 1]");
        need(self.t_star_alpha_bar > 0.0 && self.t_star_alpha_bar < 1.0, "t_star_alpha_bar", "must lie in (0, 1)");
        if let Some(a) = self.lora_alpha {
            need(a > 0.0 && a.is_finite(), "lora_alpha", "must be positive");
        }
        out
    }

    pub fn validate(&self) -> Result<(), AdversarialError> {
        match self.problems().as_slice() {
            [] => Ok(()),
            p => Err(AdversarialError::Config(p.join("; "))),
        }
    }
}
