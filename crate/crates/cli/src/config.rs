//! Flat run configuration read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use embedkit::checkpoint::ModelConfig;
use embedkit::curation::MiningConfig;
use embedkit::encoder::{EncoderConfig, MaskMode};
use embedkit::pooling::{PoolingConfig, PoolingKind};
use embedkit::trainer::StageConfig;
use serde::Deserialize;

/// Every key is optional; unknown keys are rejected. Relative paths are
/// resolved against the directory holding the config file.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub mask_mode: MaskMode,
    pub layer_norm_eps: f64,

    pub pooling: PoolingKind,
    pub latents: usize,
    pub pool_heads: usize,
    pub pool_mlp_hidden: Option<usize>,
    pub pool_residual: bool,
    pub pool_unscaled_scores: bool,

    pub stage1_datasets: Vec<PathBuf>,
    pub stage1_steps: usize,
    pub stage1_warmup_steps: usize,
    pub stage1_learning_rate: f64,
    pub stage1_batch_size: usize,
    pub stage1_hard_negatives: usize,
    pub stage1_temperature: f64,
    pub stage1_weight_decay: f64,
    pub stage1_in_batch_negatives: bool,
    pub stage1_cross_batch_negatives: bool,

    pub stage2_datasets: Vec<PathBuf>,
    pub stage2_steps: usize,
    pub stage2_warmup_steps: usize,
    pub stage2_learning_rate: f64,
    pub stage2_batch_size: usize,
    pub stage2_hard_negatives: usize,
    pub stage2_temperature: f64,
    pub stage2_weight_decay: f64,
    pub stage2_in_batch_negatives: bool,
    pub stage2_cross_batch_negatives: bool,

    pub mining_top_k: usize,
    pub mining_margin: f64,

    pub eval_k: usize,

    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
    /// Only parameters whose names start with one of these are checked.
    pub gradcheck_params: Option<Vec<String>>,

    pub sweep_pairs: usize,
    pub sweep_negatives: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (enc, pool) = (EncoderConfig::default(), PoolingConfig::default());
        let (s1, s2) = (StageConfig::stage1(), StageConfig::stage2());
        let mining = MiningConfig::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            d_model: enc.d_model,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            d_ff: enc.d_ff,
            max_len: enc.max_len,
            mask_mode: enc.mask_mode,
            layer_norm_eps: enc.layer_norm_eps,
            pooling: pool.kind,
            latents: pool.latents,
            pool_heads: pool.n_heads,
            pool_mlp_hidden: pool.mlp_hidden,
            pool_residual: pool.residual,
            pool_unscaled_scores: pool.unscaled_scores,
            stage1_datasets: Vec::new(),
            stage1_steps: s1.steps,
            stage1_warmup_steps: s1.warmup_steps,
            stage1_learning_rate: s1.learning_rate,
            stage1_batch_size: s1.batch_size,
            stage1_hard_negatives: s1.n_hard_negatives,
            stage1_temperature: s1.temperature,
            stage1_weight_decay: s1.weight_decay,
            stage1_in_batch_negatives: s1.in_batch_negatives,
            stage1_cross_batch_negatives: s1.cross_batch_negatives,
            stage2_datasets: Vec::new(),
            stage2_steps: s2.steps,
            stage2_warmup_steps: s2.warmup_steps,
            stage2_learning_rate: s2.learning_rate,
            stage2_batch_size: s2.batch_size,
            stage2_hard_negatives: s2.n_hard_negatives,
            stage2_temperature: s2.temperature,
            stage2_weight_decay: s2.weight_decay,
            stage2_in_batch_negatives: s2.in_batch_negatives,
            stage2_cross_batch_negatives: s2.cross_batch_negatives,
            mining_top_k: mining.top_k,
            mining_margin: mining.percentage_margin,
            eval_k: 10,
            gradcheck_step: 1e-5,
            gradcheck_tolerance: 1e-4,
            gradcheck_params: None,
            sweep_pairs: 200,
            sweep_negatives: 3,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        cfg.stage1_datasets.iter_mut().for_each(resolve);
        cfg.stage2_datasets.iter_mut().for_each(resolve);
        cfg.model()?.validate()?;
        cfg.stage(1).validate()?;
        cfg.stage(2).validate()?;
        cfg.mining().validate()?;
        if cfg.eval_k == 0 {
            bail!("eval_k must be positive");
        }
        Ok(cfg)
    }

    pub fn model(&self) -> anyhow::Result<ModelConfig> {
        let encoder = EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            mask_mode: self.mask_mode,
            layer_norm_eps: self.layer_norm_eps,
            ..EncoderConfig::default()
        };
        let pooling = PoolingConfig {
            kind: self.pooling,
            latents: self.latents,
            n_heads: self.pool_heads,
            mlp_hidden: self.pool_mlp_hidden,
            residual: self.pool_residual,
            unscaled_scores: self.pool_unscaled_scores,
        };
        Ok(ModelConfig { encoder, pooling, lora: Vec::new() })
    }

    pub fn stage(&self, stage: u8) -> StageConfig {
        let base = StageConfig { stage, seed: self.seed.wrapping_add(u64::from(stage)), ..StageConfig::stage1() };
        if stage == 1 {
            StageConfig {
                datasets: self.stage1_datasets.clone(),
                steps: self.stage1_steps,
                warmup_steps: self.stage1_warmup_steps,
                learning_rate: self.stage1_learning_rate,
                batch_size: self.stage1_batch_size,
                n_hard_negatives: self.stage1_hard_negatives,
                temperature: self.stage1_temperature,
                weight_decay: self.stage1_weight_decay,
                in_batch_negatives: self.stage1_in_batch_negatives,
                cross_batch_negatives: self.stage1_cross_batch_negatives,
                ..base
            }
        } else {
            StageConfig {
                datasets: self.stage2_datasets.clone(),
                steps: self.stage2_steps,
                warmup_steps: self.stage2_warmup_steps,
                learning_rate: self.stage2_learning_rate,
                batch_size: self.stage2_batch_size,
                n_hard_negatives: self.stage2_hard_negatives,
                temperature: self.stage2_temperature,
                weight_decay: self.stage2_weight_decay,
                in_batch_negatives: self.stage2_in_batch_negatives,
                cross_batch_negatives: self.stage2_cross_batch_negatives,
                ..base
            }
        }
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig { top_k: self.mining_top_k, percentage_margin: self.mining_margin }
    }
}
