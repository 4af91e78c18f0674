use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{kalman_predict, ErrorSums, KalmanConfig};
use crate::data::WindowGroup;
use crate::error::{Error, Result};
use crate::maps::MapStore;
use crate::nets::{Batch, Model};
use crate::tensor::Tensor;

pub const DEFAULT_EVAL_SEED: u64 = 1234;

/// What produces the predictions being scored.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Kalman(KalmanConfig),
    Learned { model: &'a Model, maps: &'a MapStore },
}

/// Kalman rollouts for every sample, `(N, 2P)`.
pub fn kalman_batch(batch: &Batch, cfg: &KalmanConfig) -> Result<Tensor> {
    let p = batch.pred_len();
    let mut out = Vec::with_capacity(batch.len() * 2 * p);
    for s in &batch.samples {
        out.extend(kalman_predict(&s.observed, p, cfg)?.positions.into_iter().flatten());
    }
    Tensor::from_vec(&[batch.len(), 2 * p], out)
}

/// One generator sample per agent, `(N, 2P)`.
pub fn predict_batch<R: rand::Rng + ?Sized>(model: &Model, maps: &MapStore, batch: &Batch, rng: &mut R) -> Result<Tensor> {
    let noise = model.generator.sample_noise(batch.len(), rng);
    let tensors: Vec<Tensor> = if model.cfg.use_maps {
        batch
            .scenes
            .iter()
            .map(|s| maps.get(s).map(|m| m.tensor.clone()))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    model.generator.predict(&tensors, batch, &noise)
}

/// Deterministic batching: window-groups in order, packed to about
/// `batch_size` agents without splitting a group.
pub fn sequential_batches(groups: &[WindowGroup], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut agents = 0;
    for (i, g) in groups.iter().enumerate() {
        if !current.is_empty() && agents + g.samples.len() > batch_size {
            batches.push(std::mem::take(&mut current));
            agents = 0;
        }
        current.push(i);
        agents += g.samples.len();
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Per-scene error sums of `predict` over `groups`.
pub fn score_groups(
    groups: &[WindowGroup],
    batch_size: usize,
    mut predict: impl FnMut(&Batch) -> Result<Tensor>,
) -> Result<BTreeMap<String, ErrorSums>> {
    let mut by_scene: BTreeMap<String, ErrorSums> = BTreeMap::new();
    for idx in sequential_batches(groups, batch_size) {
        let batch = Batch::from_groups(idx.iter().map(|&i| &groups[i]))?;
        let pred = predict(&batch)?;
        let p = batch.pred_len();
        let pred = pred.reshape(&[batch.len(), p, 2])?;
        let truth = batch.future_tensor().reshape(&[batch.len(), p, 2])?;
        for (i, s) in batch.samples.iter().enumerate() {
            let row = |t: &Tensor| Tensor::from_vec(&[1, p, 2], t.data()[i * 2 * p..(i + 1) * 2 * p].to_vec());
            by_scene
                .entry(s.scene_id.clone())
                .or_default()
                .add(&row(&pred)?, &row(&truth)?)?;
        }
    }
    Ok(by_scene)
}

/// Pooled ADE/FDE of a learned model with noise drawn from `seed`.
pub fn evaluate_groups(model: &Model, maps: &MapStore, groups: &[WindowGroup], batch_size: usize, seed: u64) -> Result<ErrorSums> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_scene = score_groups(groups, batch_size, |b| predict_batch(model, maps, b, &mut rng))?;
    let mut total = ErrorSums::default();
    for s in per_scene.values() {
        total.merge(s);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRow {
    pub scene: String,
    pub ade: f64,
    pub fde: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub eval_seed: u64,
    pub rows: Vec<SceneRow>,
}

impl EvalReport {
    /// Unweighted mean over scenes.
    pub fn average(&self) -> (f64, f64) {
        let n = self.rows.len() as f64;
        let ade = self.rows.iter().map(|r| r.ade).sum::<f64>() / n;
        let fde = self.rows.iter().map(|r| r.fde).sum::<f64>() / n;
        (ade, fde)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.scene.len()).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "variant: {}  eval_seed: {}", self.variant, self.eval_seed);
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>10}  {:>8}", "scene", "ADE", "FDE", "n");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>10.3}  {:>10.3}  {:>8}", r.scene, r.ade, r.fde, r.samples);
        }
        let (a, f) = self.average();
        let n: usize = self.rows.iter().map(|r| r.samples).sum();
        let _ = writeln!(s, "{:<width$}  {:>10.3}  {:>10.3}  {:>8}", "average", a, f, n);
        s
    }

    /// One tab-separated line per scene: `scene variant ade fde n`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.scene, self.variant, r.ade, r.fde, r.samples);
        }
        s
    }

    /// Writes the table to `path` and the TSV twin beside it with a `.tsv`
    /// extension.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_table())?;
        fs::write(path.with_extension("tsv"), self.to_tsv())?;
        Ok(())
    }
}

/// Scores one predictor on the test windows, one generator sample per agent
/// with noise from `eval_seed`.
pub fn evaluate(
    predictor: Predictor<'_>,
    variant: &str,
    test: &[WindowGroup],
    batch_size: usize,
    eval_seed: u64,
) -> Result<EvalReport> {
    if test.iter().all(|g| g.samples.is_empty()) {
        return Err(Error::Empty("test split is empty".into()));
    }
    if let Predictor::Learned { model, maps } = predictor {
        if model.cfg.use_maps {
            for g in test {
                maps.get(&g.scene_id)?;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let sums = score_groups(test, batch_size, |b| match predictor {
        Predictor::Kalman(cfg) => kalman_batch(b, &cfg),
        Predictor::Learned { model, maps } => predict_batch(model, maps, b, &mut rng),
    })?;
    Ok(report_from_sums(variant, eval_seed, &sums))
}

pub fn report_from_sums(variant: &str, eval_seed: u64, sums: &BTreeMap<String, ErrorSums>) -> EvalReport {
    EvalReport {
        variant: variant.to_string(),
        eval_seed,
        rows: sums
            .iter()
            .map(|(scene, s)| SceneRow {
                scene: scene.clone(),
                ade: s.ade(),
                fde: s.fde(),
                samples: s.samples,
            })
            .collect(),
    }
}
