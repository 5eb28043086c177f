//! Model and training configuration.
//!
//! Config files are JSON with every field explicit; unknown or missing
//! fields are errors, so a stored manifest always pins the full
//! architecture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    /// One gating vector drives expert choice in both scan directions.
    Unified,
    /// Separate projections and choices per direction.
    Independent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    // Architecture.
    pub d_model: usize,
    pub n_state: usize,
    pub conv_width: usize,
    pub k_blocks: usize,
    /// Blocks `0..k_static` are plain bidirectional blocks without a router.
    pub k_static: usize,
    pub n_experts: usize,
    pub router_mode: RouterMode,
    pub n_classes: usize,
    pub n_feat: usize,

    // Mixture behaviour.
    pub lambda_lb: f64,
    pub straight_through: bool,
    /// Replace the exact zero-order-hold input discretization with the
    /// Euler simplification `B̄ = Δ·B`.
    pub euler_discretization: bool,

    // Diffusion.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,

    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Observation/anticipation ratios sampled per sequence during training.
    pub train_alphas: Vec<f64>,
    pub train_betas: Vec<f64>,
}

impl Default for ModelConfig {
    /// Full-scale defaults: 15 blocks with 3 static, 5 experts, unified
    /// routing, 1000 training diffusion steps with 50 DDIM steps, AdamW at
    /// 5e-4 for 90 epochs.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_state: 16,
            conv_width: 4,
            k_blocks: 15,
            k_static: 3,
            n_experts: 5,
            router_mode: RouterMode::Unified,
            n_classes: 8,
            n_feat: 16,
            lambda_lb: 0.15,
            straight_through: false,
            euler_discretization: false,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
            epochs: 90,
            batch_size: 8,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 0.0,
            seed: 0,
            train_alphas: vec![0.2, 0.3],
            train_betas: vec![0.1, 0.2, 0.3, 0.5],
        }
    }
}

impl ModelConfig {
    /// Reduced preset sized so that a full train/eval cycle fits in CPU
    /// minutes rather than GPU hours.
    pub fn desk_default() -> Self {
        ModelConfig {
            k_blocks: 6,
            ddim_steps: 8,
            epochs: 30,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_static > self.k_blocks {
            return Err(Error::InvalidConfig(format!(
                "k_static {} > k_blocks {}",
                self.k_static, self.k_blocks
            )));
        }
        if self.n_experts == 0 {
            return Err(Error::InvalidConfig("n_experts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.lambda_lb) {
            return Err(Error::InvalidConfig(format!(
                "lambda_lb must lie in [0,1), got {}",
                self.lambda_lb
            )));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::InvalidConfig(
                "d_model must be positive and even".into(),
            ));
        }
        if self.n_state == 0 || self.conv_width == 0 || self.k_blocks == 0 {
            return Err(Error::InvalidConfig(
                "n_state, conv_width and k_blocks must be positive".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.n_feat == 0 {
            return Err(Error::InvalidConfig("n_feat must be positive".into()));
        }
        if self.diffusion_steps == 0 || self.ddim_steps == 0 {
            return Err(Error::InvalidConfig(
                "diffusion_steps and ddim_steps must be positive".into(),
            ));
        }
        if self.ddim_steps > self.diffusion_steps {
            return Err(Error::InvalidConfig(format!(
                "ddim_steps {} exceeds diffusion_steps {}",
                self.ddim_steps, self.diffusion_steps
            )));
        }
        if !(self.beta_start > 0.0 && self.beta_end > self.beta_start && self.beta_end < 1.0) {
            return Err(Error::InvalidConfig("need 0 < beta_start < beta_end < 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.train_alphas.is_empty() || self.train_betas.is_empty() {
            return Err(Error::InvalidConfig(
                "train_alphas and train_betas must be non-empty".into(),
            ));
        }
        for &a in self.train_alphas.iter().chain(&self.train_betas) {
            if !(0.0 < a && a < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "ratios must lie in (0,1), got {a}"
                )));
            }
        }
        Ok(())
    }

    /// Inner channel width of the bidirectional units (expansion factor 2).
    pub fn d_inner(&self) -> usize {
        2 * self.d_model
    }

    /// Rank of the low-rank Δ projection.
    pub fn dt_rank(&self) -> usize {
        (self.d_inner() + 15) / 16
    }

    /// Number of mixture blocks `K_E = K − K₀`.
    pub fn k_mixture(&self) -> usize {
        self.k_blocks - self.k_static
    }

    pub fn is_mixture_block(&self, k: usize) -> bool {
        k >= self.k_static
    }

    /// Bank size for block `k`: static blocks hold a single transition
    /// matrix, mixture blocks hold `n_experts`.
    pub fn experts_in_block(&self, k: usize) -> usize {
        if self.is_mixture_block(k) {
            self.n_experts
        } else {
            1
        }
    }

    /// Canonical parameter names in checkpoint order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = vec![
            "embed.w".to_string(),
            "embed.b".to_string(),
            "t_embed.w".to_string(),
            "t_embed.b".to_string(),
        ];
        for k in 0..self.k_blocks {
            let p = format!("block{k}");
            for suffix in ["ln.gain", "ln.bias", "in.w", "in.b", "gate.w", "gate.b"] {
                names.push(format!("{p}.{suffix}"));
            }
            for dir in ["fwd", "bwd"] {
                for suffix in ["conv", "w_b", "w_c", "dt_down", "dt_up", "dt_bias", "a_log"] {
                    names.push(format!("{p}.{dir}.{suffix}"));
                }
            }
            if self.is_mixture_block(k) {
                match self.router_mode {
                    RouterMode::Unified => names.push(format!("{p}.router.w_g")),
                    RouterMode::Independent => {
                        names.push(format!("{p}.router.w_g_fwd"));
                        names.push(format!("{p}.router.w_g_bwd"));
                    }
                }
            }
            for suffix in ["out.w", "out.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"] {
                names.push(format!("{p}.{suffix}"));
            }
        }
        names.push("head.w".to_string());
        names.push("head.b".to_string());
        names
    }
}

/// Evaluation protocol parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Observation ratio α: the model sees the first ⌊α·n_v⌋ frames.
    pub alpha: f64,
    /// Anticipation ratio β: labels are scored on the following ⌊β·n_v⌋ frames.
    pub beta: f64,
    /// Number of prediction samples per video.
    pub samples: usize,
    pub ddim_steps: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        EvalConfig {
            alpha,
            beta,
            samples: 25,
            ddim_steps: 50,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0 && 0.0 < self.beta && self.beta < 1.0) {
            return Err(Error::InvalidConfig(
                "alpha and beta must lie in (0,1)".into(),
            ));
        }
        if self.alpha + self.beta > 1.0 {
            return Err(Error::InvalidConfig(
                "alpha + beta must not exceed 1".into(),
            ));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be positive".into()));
        }
        Ok(())
    }

    /// Per-video window sizes `(P, F)` from its own frame count.
    pub fn window(&self, n_frames: usize) -> Result<(usize, usize)> {
        let p = (self.alpha * n_frames as f64).floor() as usize;
        let f = (self.beta * n_frames as f64).floor() as usize;
        if p < 1 || f < 1 || p + f > n_frames {
            return Err(Error::Dataset(format!(
                "video with {} frames too short for alpha={} beta={}",
                n_frames, self.alpha, self.beta
            )));
        }
        Ok((p, f))
    }
}
