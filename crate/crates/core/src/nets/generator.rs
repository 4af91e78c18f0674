use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{query_patches, Batch, ModelConfig, PatchDecoder, SocialPool};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, LstmCell, Mlp};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Encoder-decoder trajectory generator.
///
/// Each step embeds the displacement since the previous position and, when
/// maps are enabled, the decoded map patch around the current position. The
/// encoder state (optionally pooled across the group) is compressed, joined
/// with Gaussian noise and unrolled by a separate decoder LSTM that emits
/// displacements.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    embed: Mlp,
    patch: Option<PatchDecoder>,
    encoder: LstmCell,
    pool: Option<SocialPool>,
    context: Linear,
    decoder: LstmCell,
    head: Linear,
}

pub const EMBED_HIDDEN: usize = 64;

/// Predicted futures of one forward pass.
pub struct Prediction<'g> {
    /// `(N, 2)` absolute position per future step.
    pub steps: Vec<Var<'g>>,
    /// `(N, 2P)`, the steps side by side.
    pub joined: Var<'g>,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let embed = Mlp::new(&mut ps, "embed", &[2, EMBED_HIDDEN, cfg.d_e], &mut rng);
        let patch = cfg
            .use_maps
            .then(|| PatchDecoder::new(&mut ps, "patch", cfg, &mut rng));
        let input = cfg.d_e + if cfg.use_maps { cfg.d_m } else { 0 };
        let encoder = LstmCell::new(&mut ps, "encoder", input, cfg.d_h, &mut rng);
        let pool = cfg.pooling.then(|| SocialPool::new(&mut ps, "pool", cfg.d_h, &mut rng));
        let ctx_in = if cfg.pooling { 2 * cfg.d_h } else { cfg.d_h };
        let context = Linear::new(&mut ps, "context", ctx_in, cfg.d_h - cfg.noise_dim, &mut rng);
        let decoder = LstmCell::new(&mut ps, "decoder", input, cfg.d_h, &mut rng);
        let head = Linear::new(&mut ps, "head", cfg.d_h, 2, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            embed,
            patch,
            encoder,
            pool,
            context,
            decoder,
            head,
        })
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let data = (0..n * self.cfg.noise_dim).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_vec(&[n, self.cfg.noise_dim], data).expect("noise")
    }

    pub fn embed_coords<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.embed.forward(p, x)
    }

    fn step_input<'g>(
        &self,
        p: &Bound<'g>,
        maps: &[Var<'g>],
        batch: &Batch,
        displacement: Var<'g>,
        position: &Tensor,
    ) -> Result<Var<'g>> {
        let e = self.embed.forward(p, displacement);
        match &self.patch {
            Some(dec) => {
                let patches = query_patches(maps, &batch.scene_slot, position, self.cfg.patch_size);
                Ok(Var::concat_cols(&[e, dec.forward(p, patches)?]))
            }
            None => Ok(e),
        }
    }

    /// Predicts `P` future positions per sample. `maps` is indexed by
    /// `batch.scene_slot` and ignored when maps are disabled.
    pub fn forward<'g>(&self, p: &Bound<'g>, maps: &[Var<'g>], batch: &Batch, noise: &Tensor) -> Result<Prediction<'g>> {
        let cfg = &self.cfg;
        if batch.is_empty() {
            return Err(Error::Empty("generator batch is empty".into()));
        }
        if batch.obs_len() != cfg.obs_len || batch.pred_len() != cfg.pred_len {
            return Err(Error::Shape(format!(
                "batch has O={} P={}, model expects O={} P={}",
                batch.obs_len(),
                batch.pred_len(),
                cfg.obs_len,
                cfg.pred_len
            )));
        }
        if cfg.use_maps && maps.len() < batch.scenes.len() {
            return Err(Error::MissingMap(format!(
                "{} maps supplied for {} scenes",
                maps.len(),
                batch.scenes.len()
            )));
        }
        let n = batch.len();
        let graph: &'g Graph = p[self.head.b].graph();
        let zeros = graph.constant(Tensor::zeros(&[n, cfg.d_h]));
        let (mut h, mut c) = (zeros, zeros);
        let mut prev = batch.positions_at(0);
        for t in 0..cfg.obs_len {
            let pos = batch.positions_at(t);
            let disp = graph.constant(pos.zip_map(&prev, |a, b| a - b));
            let x = self.step_input(p, maps, batch, disp, &pos)?;
            (h, c) = self.encoder.step(p, x, h, c);
            prev = pos;
        }
        let last = batch.positions_at(cfg.obs_len - 1);
        let mut ctx = h;
        if let Some(pool) = &self.pool {
            ctx = Var::concat_cols(&[h, pool.forward(p, h, &last, &batch.groups)]);
        }
        let ctx = self.context.forward(p, ctx).relu();
        let mut h = Var::concat_cols(&[ctx, graph.constant(noise.clone())]);
        let mut c = zeros;
        let before_last = batch.positions_at(cfg.obs_len.saturating_sub(2));
        let mut disp = graph.constant(last.zip_map(&before_last, |a, b| a - b));
        let mut pos = graph.constant(last);
        let mut steps = Vec::with_capacity(cfg.pred_len);
        for _ in 0..cfg.pred_len {
            let x = self.step_input(p, maps, batch, disp, &pos.value())?;
            (h, c) = self.decoder.step(p, x, h, c);
            disp = self.head.forward(p, h);
            pos = pos.add(disp);
            steps.push(pos);
        }
        let joined = Var::concat_cols(&steps);
        Ok(Prediction { steps, joined })
    }

    /// Untracked forward returning `(N, 2P)` predictions.
    pub fn predict(&self, maps: &[Tensor], batch: &Batch, noise: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let m: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&p, &m, batch, noise)?;
        let value = (*out.joined.value()).clone();
        Ok(value)
    }
}
