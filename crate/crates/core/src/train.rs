//! Alternating discriminator/generator optimization and model selection.
//!
//! Training log schema, one record per line, `key=value` fields separated by
//! single spaces:
//!
//! ```text
//! step epoch=1 batch=0 agents=31 d_loss=0.69 image=0.2 labels=0.9 sparsity=120.5 score=0.7 traj=310.2 total=44.3 grad_norm=8.1 clipped=0
//! epoch epoch=1 val_ade=3.21 val_fde=5.80
//! best epoch=4 val_ade=2.95
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::autodiff::{Graph, PatchRequest, Var};
use crate::data::{SceneAssets, WindowGroup};
use crate::error::{Error, Result};
use crate::eval::evaluate_groups;
use crate::losses::{self, LossBundle, LossWeights, SparsityKernels};
use crate::maps::{clamp_origin, crop, label_targets, patch_origin, sample_aux_centers, MapStore};
use crate::nets::{Batch, Discriminator, Model, ModelConfig};
use crate::optim::{clip_global_norm, window_mask, Adam, AdamConfig, SparseAdam};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub aux_patch_count: usize,
    pub seed: u64,
    /// Seed of the single generator sample drawn during validation.
    pub eval_seed: u64,
    pub weights: LossWeights,
    pub sparsity: SparsityKernels,
    /// Divide the label loss by the number of labeled entries.
    pub normalize_labels: bool,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 200,
            learning_rate: 5e-3,
            aux_patch_count: 16,
            seed: 0,
            eval_seed: crate::eval::DEFAULT_EVAL_SEED,
            weights: LossWeights::default(),
            sparsity: SparsityKernels::default(),
            normalize_labels: true,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.aux_patch_count == 0 {
            return Err(Error::Config("aux_patch_count must be at least 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Packs shuffled window-groups into batches of about `batch_size` agents
/// without splitting a group.
pub fn make_batches<R: rand::Rng + ?Sized>(
    groups: &[WindowGroup],
    batch_size: usize,
    rng: Option<&mut R>,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut agents = 0;
    for i in order {
        let n = groups[i].samples.len();
        if !current.is_empty() && agents + n > batch_size {
            batches.push(std::mem::take(&mut current));
            agents = 0;
        }
        current.push(i);
        agents += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Argmin of the validation metric; ties go to the earliest epoch.
pub fn select_best(val_ade: &[f64]) -> Option<usize> {
    val_ade
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Model parameters and maps, as saved every epoch.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub maps: MapStore,
    pub epoch: usize,
    pub val_ade: f64,
    pub val_fde: f64,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("checkpoint");
        a.set_meta("epoch", self.epoch);
        a.set_meta("val_ade", self.val_ade);
        a.set_meta("val_fde", self.val_fde);
        self.model.write_into(&mut a);
        self.maps.write_into(&mut a);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("checkpoint")?;
        let model = Model::read_from(a)?;
        let maps = MapStore::read_from(a, Some(model.cfg.f_map))?;
        Ok(Self {
            model,
            maps,
            epoch: a.meta_parse("epoch")?,
            val_ade: a.meta_parse("val_ade")?,
            val_fde: a.meta_parse("val_fde")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Diagnostics of one generator step.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorStep {
    pub losses: LossBundle,
    pub grad_norm: f64,
    pub clipped: bool,
    /// Origins of the patches fed to the auxiliary losses, by scene.
    pub aux_origins: Vec<(String, [i64; 2])>,
    /// Predicted positions `(N, 2P)` of this step's forward pass.
    pub predicted: Tensor,
}

struct SceneTargets {
    /// `(1, H, W, 3)` in `[0, 1]`.
    image: Tensor,
    labels: Tensor,
    mask: Tensor,
}

pub struct Trainer {
    pub model: Model,
    pub maps: MapStore,
    pub cfg: TrainConfig,
    targets: BTreeMap<String, SceneTargets>,
    gen_opt: Adam,
    disc_opt: Adam,
    codec_opt: Adam,
    map_opt: BTreeMap<String, SparseAdam>,
    rng: ChaCha8Rng,
    batch_index: usize,
}

fn stack(parts: Vec<Tensor>) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_vec(&shape, data).expect("stack")
}

fn require_finite(value: f64, batch: usize, component: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            batch,
            component: component.to_string(),
        })
    }
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, assets: &[SceneAssets]) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        let maps = if model.cfg.use_maps {
            for a in assets {
                if a.height() < model.cfg.patch_size || a.width() < model.cfg.patch_size {
                    return Err(Error::Shape(format!(
                        "scene {} ({}x{}) is smaller than a map patch",
                        a.scene_id,
                        a.height(),
                        a.width()
                    )));
                }
            }
            MapStore::init(assets, model.cfg.f_map, cfg.seed)?
        } else {
            MapStore::new(model.cfg.f_map)
        };
        Ok(Self::from_parts(model, maps, cfg, assets))
    }

    /// Resumes from existing parameters and maps with fresh optimizer state.
    pub fn from_parts(model: Model, maps: MapStore, cfg: TrainConfig, assets: &[SceneAssets]) -> Self {
        let adam = AdamConfig::with_lr(cfg.learning_rate);
        let targets = assets
            .iter()
            .map(|a| {
                let (labels, mask) = label_targets(a);
                let img = a.reference_image.to_unit_tensor();
                let shape = [1, a.height(), a.width(), 3];
                let image = img.reshape(&shape).expect("image");
                (a.scene_id.clone(), SceneTargets { image, labels, mask })
            })
            .collect();
        let map_opt = maps
            .maps
            .iter()
            .map(|(id, m)| (id.clone(), SparseAdam::new(adam, m.tensor.shape())))
            .collect();
        Self {
            gen_opt: Adam::new(adam, &model.generator.params),
            disc_opt: Adam::new(adam, &model.discriminator.params),
            codec_opt: Adam::new(adam, &model.codecs.params),
            map_opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)),
            targets,
            model,
            maps,
            cfg,
            batch_index: 0,
        }
    }

    fn map_tensors(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        if !self.model.cfg.use_maps {
            return Ok(Vec::new());
        }
        batch
            .scenes
            .iter()
            .map(|s| self.maps.get(s).map(|m| m.tensor.clone()))
            .collect()
    }

    /// One discriminator update on `batch`; maps are constants throughout.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<f64> {
        let maps = self.map_tensors(batch)?;
        let noise = self.model.generator.sample_noise(batch.len(), &mut self.rng);
        let g = Graph::new();
        let gp = self.model.generator.params.bind(&g, false);
        let dp = self.model.discriminator.params.bind(&g, true);
        let map_vars: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();
        let pred = self.model.generator.forward(&gp, &map_vars, batch, &noise)?;
        let disc = &self.model.discriminator;
        let real = disc.forward(&dp, &map_vars, batch, &Discriminator::real_positions(&g, batch))?;
        let fake_pos = Discriminator::fake_positions(&g, batch, &pred.steps);
        let fake = disc.forward(&dp, &map_vars, batch, &fake_pos)?;
        let loss = losses::d_loss(real, fake);
        let value = loss.value().item();
        require_finite(value, self.batch_index, "d_loss")?;
        let grads = g.backward(loss);
        let mut dg = dp.grads(&grads);
        clip_global_norm(&mut dg.iter_mut().collect::<Vec<_>>(), self.cfg.clip_norm);
        self.disc_opt.step(&mut self.model.discriminator.params, &dg);
        Ok(value)
    }

    /// Patch requests for the auxiliary losses: random fully-inside patches
    /// per scene plus one at each sample's last observed position.
    fn aux_requests(&mut self, batch: &Batch) -> Result<Vec<PatchRequest>> {
        let size = self.model.cfg.patch_size;
        let mut requests = Vec::new();
        for (slot, scene) in batch.scenes.iter().enumerate() {
            let map = self.maps.get(scene)?;
            let (h, w) = (map.height(), map.width());
            for [x, y] in sample_aux_centers(h, w, size, self.cfg.aux_patch_count, &mut self.rng)? {
                let [top, left] = patch_origin([x as f64, y as f64], size);
                requests.push(PatchRequest { source: slot, top, left });
            }
            for (i, s) in batch.samples.iter().enumerate() {
                if batch.scene_slot[i] != slot {
                    continue;
                }
                let last = *s.observed.last().expect("observed");
                let [top, left] = clamp_origin(patch_origin(last, size), h, w, size);
                requests.push(PatchRequest { source: slot, top, left });
            }
        }
        Ok(requests)
    }

    /// One generator update: generator, codecs and maps move; the
    /// discriminator is fixed.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<GeneratorStep> {
        let cfg = self.model.cfg.clone();
        let w = self.cfg.weights;
        let maps = self.map_tensors(batch)?;
        let noise = self.model.generator.sample_noise(batch.len(), &mut self.rng);
        let requests = if cfg.use_maps { self.aux_requests(batch)? } else { Vec::new() };

        let g = Graph::new();
        let gp = self.model.generator.params.bind(&g, true);
        let cp = self.model.codecs.params.bind(&g, cfg.use_maps);
        let dp = self.model.discriminator.params.bind(&g, false);
        let map_vars: Vec<Var> = maps.iter().map(|t| g.leaf(t.clone())).collect();
        let map_consts: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();

        let pred = self.model.generator.forward(&gp, &map_vars, batch, &noise)?;
        let predicted = (*pred.joined.value()).clone();
        let traj = losses::traj_loss(pred.joined, &batch.future_tensor())?;
        let fake_pos = Discriminator::fake_positions(&g, batch, &pred.steps);
        let logits = self.model.discriminator.forward(&dp, &map_consts, batch, &fake_pos)?;
        let score = losses::g_adversarial_loss(logits);
        let mut total = traj.scale(w.traj).add(score.scale(w.score));
        let (mut image, mut labels, mut sparsity) = (0.0, 0.0, 0.0);

        if cfg.use_maps {
            let size = cfg.patch_size;
            let codecs = &self.model.codecs;
            let patches = Var::patches(&map_vars, &requests, size, size);
            let mut encoded = Vec::new();
            for scene in &batch.scenes {
                let t = &self.targets[scene];
                let e = codecs.encode_image(&cp, g.constant(t.image.clone()))?;
                let s = e.shape();
                encoded.push(e.reshape(&[s[1], s[2], s[3]]));
            }
            let encoded_patches = Var::patches(&encoded, &requests, size, size);
            let crops = |pick: &dyn Fn(&SceneTargets) -> Tensor| {
                stack(
                    requests
                        .iter()
                        .map(|r| crop(&pick(&self.targets[&batch.scenes[r.source]]), [r.top, r.left], size, size).0)
                        .collect(),
                )
            };
            let image_t = crops(&|t| {
                let s = t.image.shape();
                t.image.clone().reshape(&[s[1], s[2], s[3]]).expect("image")
            });
            let decoded = codecs.decode_image(&cp, patches);
            let l_image = losses::image_explanation_loss(patches, &image_t, decoded, encoded_patches)?;
            image = l_image.value().item();
            total = total.add(l_image.scale(w.image));
            if cfg.use_labels {
                let scores = codecs.decode_labels(&cp, patches);
                let l = losses::label_loss(scores, &crops(&|t| t.labels.clone()), &crops(&|t| t.mask.clone()), self.cfg.normalize_labels)?;
                labels = l.value().item();
                total = total.add(l.scale(w.labels));
            }
            let l_sparse = losses::sparsity_loss(patches, &self.cfg.sparsity);
            sparsity = l_sparse.value().item();
            total = total.add(l_sparse.scale(w.sparsity));
        }

        let bundle = LossBundle::new(image, labels, sparsity, score.value().item(), traj.value().item(), &w);
        for (name, v) in bundle.components() {
            require_finite(v, self.batch_index, name)?;
        }
        let grads = g.backward(total);
        let mut gen_grads = gp.grads(&grads);
        let mut codec_grads = if cfg.use_maps { cp.grads(&grads) } else { Vec::new() };
        let mut map_grads: Vec<Tensor> = map_vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
        let masks: Vec<Vec<bool>> = map_vars
            .iter()
            .zip(&maps)
            .map(|(v, t)| window_mask(t.shape()[0], t.shape()[1], &g.reads_of(*v)))
            .collect();
        let mut all: Vec<&mut Tensor> = gen_grads
            .iter_mut()
            .chain(codec_grads.iter_mut())
            .chain(map_grads.iter_mut())
            .collect();
        let (grad_norm, clipped) = clip_global_norm(&mut all, self.cfg.clip_norm);
        require_finite(grad_norm, self.batch_index, "gradient")?;

        self.gen_opt.step(&mut self.model.generator.params, &gen_grads);
        if cfg.use_maps {
            self.codec_opt.step(&mut self.model.codecs.params, &codec_grads);
            for ((scene, grad), mask) in batch.scenes.iter().zip(&map_grads).zip(&masks) {
                let opt = self.map_opt.get_mut(scene).ok_or_else(|| Error::MissingMap(scene.clone()))?;
                let map = self.maps.get_mut(scene)?;
                opt.step(&mut map.tensor, grad, mask);
            }
        }
        Ok(GeneratorStep {
            losses: bundle,
            grad_norm,
            clipped,
            aux_origins: requests
                .iter()
                .map(|r| (batch.scenes[r.source].clone(), [r.top, r.left]))
                .collect(),
            predicted,
        })
    }

    /// Discriminator then generator update on one batch.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<(f64, GeneratorStep)> {
        let d = self.discriminator_step(batch)?;
        let g = self.generator_step(batch)?;
        self.batch_index += 1;
        Ok((d, g))
    }

    /// Validation ADE/FDE with one generator sample per agent under `eval_seed`.
    pub fn validate(&self, groups: &[WindowGroup]) -> Result<(f64, f64)> {
        let sums = evaluate_groups(&self.model, &self.maps, groups, self.cfg.batch_size, self.cfg.eval_seed)?;
        Ok((sums.ade(), sums.fde()))
    }

    pub fn checkpoint(&self, epoch: usize, val: (f64, f64)) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            maps: self.maps.clone(),
            epoch,
            val_ade: val.0,
            val_fde: val.1,
        }
    }

    pub fn shuffled_batches(&mut self, groups: &[WindowGroup]) -> Vec<Vec<usize>> {
        make_batches(groups, self.cfg.batch_size, Some(&mut self.rng))
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub val_history: Vec<(f64, f64)>,
    pub log: Vec<String>,
}

fn fmt_step(epoch: usize, batch: usize, agents: usize, d: f64, g: &GeneratorStep) -> String {
    let l = &g.losses;
    let mut s = format!("step epoch={epoch} batch={batch} agents={agents} d_loss={d}");
    for (name, v) in l.components() {
        let _ = write!(s, " {name}={v}");
    }
    let _ = write!(s, " total={} grad_norm={} clipped={}", l.total, g.grad_norm, g.clipped as u8);
    s
}

/// Full training run. With `out_dir`, writes `train.log`, a checkpoint per
/// epoch (`checkpoint-NNN.cmar`) and the selected `best.cmar`.
pub fn train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_groups: &[WindowGroup],
    val_groups: &[WindowGroup],
    assets: &[SceneAssets],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_groups.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    if val_groups.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    let mut trainer = Trainer::new(model_cfg, cfg, assets)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("train.log"))?))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |line: String, file: &mut Option<BufWriter<File>>| -> Result<()> {
        if let Some(f) = file.as_mut() {
            writeln!(f, "{line}")?;
        }
        log.push(line);
        Ok(())
    };
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=trainer.cfg.epochs {
        for (b, idx) in trainer.shuffled_batches(train_groups).into_iter().enumerate() {
            let batch = Batch::from_groups(idx.iter().map(|&i| &train_groups[i]))?;
            let (d, g) = trainer.train_batch(&batch)?;
            emit(fmt_step(epoch, b, batch.len(), d, &g), &mut log_file)?;
        }
        let val = trainer.validate(val_groups)?;
        if !val.0.is_finite() {
            return Err(Error::Divergence {
                batch: trainer.batch_index,
                component: "validation".into(),
            });
        }
        history.push(val);
        emit(format!("epoch epoch={epoch} val_ade={} val_fde={}", val.0, val.1), &mut log_file)?;
        let ckpt = trainer.checkpoint(epoch, val);
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join(format!("checkpoint-{epoch:03}.cmar")))?;
        }
        let ades: Vec<f64> = history.iter().map(|h| h.0).collect();
        if select_best(&ades) == Some(epoch - 1) {
            best = Some(ckpt);
        }
    }
    let best = best.ok_or_else(|| Error::Empty("no epochs were run".into()))?;
    emit(format!("best epoch={} val_ade={}", best.epoch, best.val_ade), &mut log_file)?;
    if let Some(dir) = out_dir {
        best.save(&dir.join("best.cmar"))?;
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    Ok(TrainOutcome {
        best,
        val_history: history,
        log,
    })
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("best.cmar")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_best_rules() {
        assert_eq!(select_best(&[4.0]), Some(0));
        assert_eq!(select_best(&[5.0, 3.0, 4.0]), Some(1));
        assert_eq!(select_best(&[3.0, 3.0]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn batches_keep_groups_whole() {
        let group = |n: usize, f: i64| WindowGroup {
            scene_id: "s".into(),
            start_frame: f,
            samples: (0..n)
                .map(|a| crate::data::TrajectorySample {
                    scene_id: "s".into(),
                    agent_id: a as i64,
                    start_frame: f,
                    observed: vec![[0.0; 2]; 2],
                    future: vec![[0.0; 2]; 1],
                })
                .collect(),
        };
        let groups: Vec<_> = [10, 20, 5, 40, 3].iter().enumerate().map(|(f, &n)| group(n, f as i64)).collect();
        let b = make_batches::<ChaCha8Rng>(&groups, 32, None);
        assert_eq!(b, vec![vec![0, 1], vec![2], vec![3], vec![4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shuffled = make_batches(&groups, 32, Some(&mut rng));
        let mut all: Vec<usize> = shuffled.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }
}
