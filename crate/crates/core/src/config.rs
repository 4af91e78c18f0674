//! Flat run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PrepareOptions;
use crate::error::{Error, Result};
use crate::eval::{KalmanConfig, DEFAULT_EVAL_SEED};
use crate::losses::{LossWeights, SparsityKernels};
use crate::nets::{ModelConfig, Variant};
use crate::synth::BenchConfig;
use crate::train::TrainConfig;

/// Environment variable overriding `data_root`.
pub const DATA_ENV: &str = "CONTEXT_MAPS_DATA";

/// Name of the snapshot written beside every run's outputs.
pub const RESOLVED_NAME: &str = "resolved-config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Empty means every scene found.
    pub scenes: Vec<String>,
    pub variant: String,
    /// Checkpoint for `eval`, `export-maps` and `plot`; defaults to
    /// `out_dir/best.cmar`.
    pub checkpoint: Option<PathBuf>,

    pub obs_len: usize,
    pub pred_len: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub ucy_frame_stride: usize,
    /// Scene family to generate instead of reading raw data in `prepare`.
    pub synthetic: Option<String>,

    pub d_e: usize,
    pub d_h: usize,
    pub d_m: usize,
    pub noise_dim: usize,
    pub f_map: usize,
    pub patch_size: usize,
    pub encoder_width: usize,

    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub aux_patch_count: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub clip_norm: f64,
    pub normalize_labels: bool,
    pub sparsity_epsilon: f64,

    pub weight_image: f64,
    pub weight_labels: f64,
    pub weight_sparsity: f64,
    pub weight_score: f64,
    pub weight_traj: f64,

    pub kalman_em_iterations: usize,

    pub bench_family: String,
    pub bench_agents: usize,
    pub bench_frames: usize,
    pub bench_sigma: f64,
    pub bench_variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let w = LossWeights::default();
        let p = PrepareOptions::default();
        let b = BenchConfig::default();
        Self {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            scenes: Vec::new(),
            variant: Variant::Ours.name().into(),
            checkpoint: None,
            obs_len: m.obs_len,
            pred_len: m.pred_len,
            split_train: p.fractions.0,
            split_val: p.fractions.1,
            split_test: p.fractions.2,
            ucy_frame_stride: p.ucy_frame_stride,
            synthetic: None,
            d_e: m.d_e,
            d_h: m.d_h,
            d_m: m.d_m,
            noise_dim: m.noise_dim,
            f_map: m.f_map,
            patch_size: m.patch_size,
            encoder_width: m.encoder_width,
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            aux_patch_count: t.aux_patch_count,
            seed: t.seed,
            eval_seed: DEFAULT_EVAL_SEED,
            clip_norm: t.clip_norm,
            normalize_labels: t.normalize_labels,
            sparsity_epsilon: t.sparsity.epsilon,
            weight_image: w.image,
            weight_labels: w.labels,
            weight_sparsity: w.sparsity,
            weight_score: w.score,
            weight_traj: w.traj,
            kalman_em_iterations: KalmanConfig::default().em_iterations,
            bench_family: "mirror".into(),
            bench_agents: b.agents,
            bench_frames: b.frames,
            bench_sigma: b.sigma,
            bench_variants: vec![Variant::Ours.name().into(), Variant::SganP.name().into(), Variant::Linear.name().into()],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved snapshot into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    /// Model settings with the configured variant's switches applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = self.variant()?.apply(ModelConfig {
            obs_len: self.obs_len,
            pred_len: self.pred_len,
            d_e: self.d_e,
            d_h: self.d_h,
            d_m: self.d_m,
            noise_dim: self.noise_dim,
            f_map: self.f_map,
            patch_size: self.patch_size,
            encoder_width: self.encoder_width,
            ..ModelConfig::default()
        });
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            aux_patch_count: self.aux_patch_count,
            seed: self.seed,
            eval_seed: self.eval_seed,
            weights: LossWeights {
                image: self.weight_image,
                labels: self.weight_labels,
                sparsity: self.weight_sparsity,
                score: self.weight_score,
                traj: self.weight_traj,
            },
            sparsity: SparsityKernels {
                epsilon: self.sparsity_epsilon,
            },
            normalize_labels: self.normalize_labels,
            clip_norm: self.clip_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            obs_len: self.obs_len,
            pred_len: self.pred_len,
            fractions: (self.split_train, self.split_val, self.split_test),
            ucy_frame_stride: self.ucy_frame_stride,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            agents: self.bench_agents,
            frames: self.bench_frames,
            sigma: self.bench_sigma,
            obs_len: self.obs_len,
            pred_len: self.pred_len,
            fractions: (self.split_train, self.split_val, self.split_test),
        }
    }

    pub fn kalman_config(&self) -> KalmanConfig {
        KalmanConfig {
            em_iterations: self.kalman_em_iterations,
            ..KalmanConfig::default()
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("best.cmar"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.model_config().unwrap(), ModelConfig::default());
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c = RunConfig::from_toml("epochs = 3\nvariant = \"sgan\"\nscenes = [\"a\", \"b\"]\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.model_config().unwrap().use_maps);
        assert_eq!(c.scenes.len(), 2);
        assert!(RunConfig::from_toml("epoch = 3\n").is_err());
        assert!(RunConfig::from_toml("variant = \"nope\"\n").unwrap().model_config().is_err());
    }

    #[test]
    fn resolved_snapshot_written() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig { seed: 9, ..RunConfig::default() };
        let p = c.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
    }
}
