use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::generator::EMBED_HIDDEN;
use super::{query_patches, Batch, ModelConfig, PatchDecoder};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LstmCell, Mlp};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Scores full `O + P` trajectories; maps are only ever read.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    embed: Mlp,
    patch: Option<PatchDecoder>,
    lstm: LstmCell,
    classifier: Mlp,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let embed = Mlp::new(&mut ps, "embed", &[2, EMBED_HIDDEN, cfg.d_e], &mut rng);
        let patch = cfg
            .use_maps
            .then(|| PatchDecoder::new(&mut ps, "patch", cfg, &mut rng));
        let input = cfg.d_e + if cfg.use_maps { cfg.d_m } else { 0 };
        let lstm = LstmCell::new(&mut ps, "lstm", input, cfg.d_h, &mut rng);
        let classifier = Mlp::new(&mut ps, "classifier", &[cfg.d_h, 64, 1], &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            embed,
            patch,
            lstm,
            classifier,
        })
    }

    /// `positions` holds one `(N, 2)` entry per time step; returns `(N, 1)` logits.
    pub fn forward<'g>(&self, p: &Bound<'g>, maps: &[Var<'g>], batch: &Batch, positions: &[Var<'g>]) -> Result<Var<'g>> {
        let len = self.cfg.obs_len + self.cfg.pred_len;
        if positions.len() != len {
            return Err(Error::Shape(format!(
                "discriminator expects {len} steps, got {}",
                positions.len()
            )));
        }
        let n = batch.len();
        let graph: &'g Graph = positions[0].graph();
        let zeros = graph.constant(Tensor::zeros(&[n, self.cfg.d_h]));
        let (mut h, mut c) = (zeros, zeros);
        for t in 0..len {
            let disp = if t == 0 {
                graph.constant(Tensor::zeros(&[n, 2]))
            } else {
                positions[t].sub(positions[t - 1])
            };
            let mut x = self.embed.forward(p, disp);
            if let Some(dec) = &self.patch {
                let patches = query_patches(maps, &batch.scene_slot, &positions[t].value(), self.cfg.patch_size);
                x = Var::concat_cols(&[x, dec.forward(p, patches)?]);
            }
            (h, c) = self.lstm.step(p, x, h, c);
        }
        Ok(self.classifier.forward(p, h))
    }

    /// Ground-truth trajectories as constants on `graph`.
    pub fn real_positions<'g>(graph: &'g Graph, batch: &Batch) -> Vec<Var<'g>> {
        (0..batch.obs_len() + batch.pred_len())
            .map(|t| graph.constant(batch.positions_at(t)))
            .collect()
    }

    /// Observed steps as constants followed by the predicted steps.
    pub fn fake_positions<'g>(graph: &'g Graph, batch: &Batch, predicted: &[Var<'g>]) -> Vec<Var<'g>> {
        (0..batch.obs_len())
            .map(|t| graph.constant(batch.positions_at(t)))
            .chain(predicted.iter().copied())
            .collect()
    }
}
