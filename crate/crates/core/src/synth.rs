//! Synthetic scenes with a known walkable mask and flow field.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{
    extract_windows, group_by_start, temporal_split, LabelRaster, LabelType, PreparedScene, RawDetection, RgbRaster,
    SceneAssets, Splits, WindowGroup,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Predictor};
use crate::nets::{ModelConfig, Variant};
use crate::train::{train, TrainConfig};
use crate::autodiff::Graph;
use crate::maps::MapStore;
use crate::nets::Model;
use crate::tensor::Tensor;

pub const WALKABLE_GRAY: u8 = 170;
pub const OBSTACLE_GRAY: u8 = 50;
pub const LABEL_BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Everything walkable, flow to the right.
    Open,
    /// Two horizontal corridors; the upper flows right, the lower left.
    ParallelCorridors,
    /// A corridor from the left edge into a full-height vertical corridor;
    /// agents turn up (`up = true`) or down at the junction.
    TJunction { up: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub scene_id: String,
    pub layout: Layout,
    pub height: usize,
    pub width: usize,
    /// Flow speed in pixels per frame.
    pub speed: f64,
    /// Fraction of each class's pixels that carry a label.
    pub label_fraction: f64,
    /// Drives imagery and labels only, so two specs differing only in flow
    /// direction share identical assets.
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(scene_id: impl Into<String>, layout: Layout, seed: u64) -> Self {
        Self {
            scene_id: scene_id.into(),
            layout,
            height: 64,
            width: 64,
            speed: 1.5,
            label_fraction: 0.3,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major hidden walkable mask.
    pub walkable: Vec<bool>,
    /// Row-major preferred velocity `[dx, dy]`, zero outside the mask.
    pub flow: Vec<[f64; 2]>,
    /// Pixels `(row, col)` where agents appear.
    pub spawn: Vec<(usize, usize)>,
    pub seed: u64,
}

impl SyntheticScene {
    fn cell(&self, p: [f64; 2]) -> Option<usize> {
        let (x, y) = (p[0].round(), p[1].round());
        (x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height)
            .then(|| y as usize * self.width + x as usize)
    }

    pub fn is_walkable(&self, p: [f64; 2]) -> bool {
        self.cell(p).is_some_and(|i| self.walkable[i])
    }

    pub fn flow_at(&self, p: [f64; 2]) -> [f64; 2] {
        self.cell(p).map_or([0.0; 2], |i| self.flow[i])
    }
}

fn build_geometry(spec: &SceneSpec) -> Result<SyntheticScene> {
    let (h, w) = (spec.height, spec.width);
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("synthetic scenes need at least 32x32, got {h}x{w}")));
    }
    let v = spec.speed;
    let mut walkable = vec![false; h * w];
    let mut flow = vec![[0.0; 2]; h * w];
    let mut spawn = Vec::new();
    // Corridors are 3/16 of the side, placed proportionally.
    let band = |center: usize, side: usize| {
        let half = (3 * side / 16).max(4) / 2;
        center.saturating_sub(half)..(center + half).min(side)
    };
    match spec.layout {
        Layout::Open => {
            walkable.fill(true);
            flow.fill([v, 0.0]);
            spawn.extend((2..h - 2).map(|r| (r, 0)));
        }
        Layout::ParallelCorridors => {
            for (rows, dir) in [(band(h / 4, h), 1.0), (band(3 * h / 4, h), -1.0)] {
                for r in rows {
                    for c in 0..w {
                        walkable[r * w + c] = true;
                        flow[r * w + c] = [dir * v, 0.0];
                    }
                    spawn.push((r, if dir > 0.0 { 0 } else { w - 1 }));
                }
            }
        }
        Layout::TJunction { up } => {
            let rows = band(h / 2, h);
            let cols = band(w / 2, w);
            let dy = if up { -v } else { v };
            let mid = (cols.start + cols.end) as f64 / 2.0;
            for r in rows.clone() {
                for c in 0..cols.start {
                    walkable[r * w + c] = true;
                    flow[r * w + c] = [v, 0.0];
                }
            }
            for r in 0..h {
                for c in cols.clone() {
                    walkable[r * w + c] = true;
                    flow[r * w + c] = if rows.contains(&r) && (c as f64) < mid {
                        [v * std::f64::consts::FRAC_1_SQRT_2, dy * std::f64::consts::FRAC_1_SQRT_2]
                    } else {
                        [0.0, dy]
                    };
                }
            }
            spawn.extend(rows.clone().skip(1).take(rows.len().saturating_sub(2)).map(|r| (r, 0)));
        }
    }
    if !walkable.iter().any(|&b| b) || spawn.is_empty() {
        return Err(Error::Config(format!("scene {} has no walkable pixels", spec.scene_id)));
    }
    Ok(SyntheticScene {
        scene_id: spec.scene_id.clone(),
        height: h,
        width: w,
        walkable,
        flow,
        spawn,
        seed: spec.seed,
    })
}

/// Reveals whole `LABEL_BLOCK`-sized blocks in random order until at least
/// `fraction` of each class's pixels are labeled.
fn partial_labels(scene: &SyntheticScene, fraction: f64, rng: &mut ChaCha8Rng) -> BTreeMap<LabelType, LabelRaster> {
    let (h, w) = (scene.height, scene.width);
    let mut walk = LabelRaster::zeros(h, w);
    let mut obst = LabelRaster::zeros(h, w);
    let totals = [
        scene.walkable.iter().filter(|&&b| b).count(),
        scene.walkable.iter().filter(|&&b| !b).count(),
    ];
    let mut covered = [0usize; 2];
    let need = |c: usize, covered: &[usize; 2]| (covered[c] as f64) < fraction * totals[c] as f64;
    let mut blocks: Vec<(usize, usize)> = (0..h.div_ceil(LABEL_BLOCK))
        .flat_map(|by| (0..w.div_ceil(LABEL_BLOCK)).map(move |bx| (by, bx)))
        .collect();
    blocks.shuffle(rng);
    for (by, bx) in blocks {
        if !need(0, &covered) && !need(1, &covered) {
            break;
        }
        let cells: Vec<usize> = (by * LABEL_BLOCK..((by + 1) * LABEL_BLOCK).min(h))
            .flat_map(|r| (bx * LABEL_BLOCK..((bx + 1) * LABEL_BLOCK).min(w)).map(move |c| r * w + c))
            .collect();
        let useful = cells.iter().any(|&i| need(!scene.walkable[i] as usize, &covered));
        if !useful {
            continue;
        }
        for i in cells {
            let class = !scene.walkable[i] as usize;
            covered[class] += 1;
            let sign = if class == 0 { 1 } else { -1 };
            walk.values[i] = sign;
            obst.values[i] = -sign;
        }
    }
    BTreeMap::from([(LabelType::Walkable, walk), (LabelType::Obstacle, obst)])
}

/// Builds the scene and its assets: gray walkable areas, dark obstacles and
/// partial tri-state labels.
pub fn generate_scene(spec: &SceneSpec) -> Result<(SyntheticScene, SceneAssets)> {
    if !(0.0..=1.0).contains(&spec.label_fraction) {
        return Err(Error::Config("label_fraction must lie in [0, 1]".into()));
    }
    let scene = build_geometry(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image = RgbRaster::filled(scene.height, scene.width, [0; 3]);
    for r in 0..scene.height {
        for c in 0..scene.width {
            let base = if scene.walkable[r * scene.width + c] { WALKABLE_GRAY } else { OBSTACLE_GRAY };
            let g = (base as i32 + rng.gen_range(-8..=8)) as u8;
            image.set_pixel(r, c, [g, g, g]);
        }
    }
    let label_rasters = partial_labels(&scene, spec.label_fraction, &mut rng);
    let assets = SceneAssets {
        scene_id: spec.scene_id.clone(),
        reference_image: image,
        label_rasters,
        homography: None,
    };
    Ok((scene, assets))
}

/// Integrates the flow field with Gaussian step noise. `n_agents` walk at
/// once; an agent leaving the image ends its track and a fresh agent takes
/// its slot. Steps that would cross into obstacles are reflected per axis.
pub fn sample_trajectories(scene: &SyntheticScene, n_agents: usize, frames: usize, sigma: f64, seed: u64) -> Vec<RawDetection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut next_id = 0i64;
    // (agent id, position, frames to wait before appearing)
    let mut slots: Vec<(i64, Option<[f64; 2]>, usize)> = Vec::new();
    for _ in 0..n_agents {
        slots.push((next_id, None, rng.gen_range(0..(frames / 4).max(1))));
        next_id += 1;
    }
    let spawn_point = |rng: &mut ChaCha8Rng| {
        let (r, c) = scene.spawn[rng.gen_range(0..scene.spawn.len())];
        let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.45..0.45);
        let p = [c as f64 + jitter(rng), r as f64 + jitter(rng)];
        if scene.is_walkable(p) {
            p
        } else {
            [c as f64, r as f64]
        }
    };
    let mut out = Vec::new();
    for frame in 0..frames {
        for slot in slots.iter_mut() {
            let pos = match slot.1 {
                Some(p) => p,
                None if slot.2 > 0 => {
                    slot.2 -= 1;
                    continue;
                }
                None => {
                    let p = spawn_point(&mut rng);
                    slot.1 = Some(p);
                    out.push(RawDetection::new(scene.scene_id.clone(), frame as i64, slot.0, p));
                    continue;
                }
            };
            let f = scene.flow_at(pos);
            let step = [f[0] + noise.sample(&mut rng), f[1] + noise.sample(&mut rng)];
            let target = [pos[0] + step[0], pos[1] + step[1]];
            if scene.cell(target).is_none() {
                slot.0 = next_id;
                next_id += 1;
                slot.1 = None;
                slot.2 = rng.gen_range(0..4);
                continue;
            }
            let mut p = pos;
            for axis in 0..2 {
                let mut q = p;
                q[axis] += step[axis];
                if !scene.is_walkable(q) {
                    q[axis] = p[axis] - step[axis];
                }
                if scene.is_walkable(q) {
                    p = q;
                }
            }
            slot.1 = Some(p);
            out.push(RawDetection::new(scene.scene_id.clone(), frame as i64, slot.0, p));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Two T-junctions with identical imagery and opposite turns.
    Mirror,
    /// One open scene with uniform flow.
    Uniform,
    /// One scene with two opposite corridors.
    Corridors,
}

impl Family {
    pub fn specs(self, seed: u64) -> Vec<SceneSpec> {
        match self {
            Family::Mirror => vec![
                SceneSpec::new("tjunction-up", Layout::TJunction { up: true }, seed),
                SceneSpec::new("tjunction-down", Layout::TJunction { up: false }, seed),
            ],
            Family::Uniform => vec![SceneSpec::new("open", Layout::Open, seed)],
            Family::Corridors => vec![SceneSpec::new("corridors", Layout::ParallelCorridors, seed)],
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mirror" => Ok(Family::Mirror),
            "uniform" => Ok(Family::Uniform),
            "corridors" => Ok(Family::Corridors),
            other => Err(Error::Config(format!("unknown scene family '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchData {
    pub scenes: Vec<SyntheticScene>,
    pub assets: Vec<SceneAssets>,
    pub detections: Vec<RawDetection>,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    /// Agents walking at the same time.
    pub agents: usize,
    pub frames: usize,
    pub sigma: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub fractions: (f64, f64, f64),
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            agents: 8,
            frames: 300,
            sigma: 0.1,
            obs_len: 10,
            pred_len: 8,
            fractions: (0.6, 0.1, 0.3),
        }
    }
}

impl BenchData {
    /// Per-scene view in the prepared layout.
    pub fn prepared_scenes(&self) -> Vec<PreparedScene> {
        let pick = |groups: &[WindowGroup], id: &str| groups.iter().filter(|g| g.scene_id == id).cloned().collect();
        self.assets
            .iter()
            .map(|a| PreparedScene {
                detections: self.detections.iter().filter(|d| d.scene_id == a.scene_id).cloned().collect(),
                assets: a.clone(),
                splits: Splits {
                    train: pick(&self.splits.train, &a.scene_id),
                    val: pick(&self.splits.val, &a.scene_id),
                    test: pick(&self.splits.test, &a.scene_id),
                },
            })
            .collect()
    }
}

/// Model settings for desk-scale runs: a narrow encoder backbone.
pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        encoder_width: 4,
        ..ModelConfig::default()
    }
}

/// Training settings for desk-scale runs.
pub fn bench_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        learning_rate: 2e-3,
        seed,
        ..TrainConfig::default()
    }
}

/// Scenes, detections and per-scene temporal splits for a family.
pub fn build_bench(family: Family, cfg: &BenchConfig, seed: u64) -> Result<BenchData> {
    let mut data = BenchData {
        scenes: Vec::new(),
        assets: Vec::new(),
        detections: Vec::new(),
        splits: Splits::default(),
    };
    for (k, spec) in family.specs(seed).iter().enumerate() {
        let (scene, assets) = generate_scene(spec)?;
        let dets = sample_trajectories(&scene, cfg.agents, cfg.frames, cfg.sigma, seed.wrapping_mul(31).wrapping_add(k as u64));
        let groups: Vec<WindowGroup> = group_by_start(&extract_windows(&dets, cfg.obs_len, cfg.pred_len));
        let s = temporal_split(&groups, cfg.fractions)?;
        data.splits.train.extend(s.train);
        data.splits.val.extend(s.val);
        data.splits.test.extend(s.test);
        data.detections.extend(dets);
        data.scenes.push(scene);
        data.assets.push(assets);
    }
    Ok(data)
}

/// Thresholds decoded walkable-minus-obstacle scores at zero against the
/// hidden mask over pixels without labels. Returns `(accuracy, balanced
/// accuracy)`.
pub fn label_accuracy(model: &Model, maps: &MapStore, data: &BenchData) -> Result<(f64, f64)> {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (scene, assets) in data.scenes.iter().zip(&data.assets) {
        let map = maps.get(&scene.scene_id)?;
        let g = Graph::new();
        let p = model.codecs.params.bind(&g, false);
        let (h, w, f) = (map.height(), map.width(), map.f_map());
        let input = g.constant(map.tensor.clone().reshape(&[1, h, w, f])?);
        let scores = model.codecs.decode_labels(&p, input).value();
        let walk = assets.label(LabelType::Walkable);
        for i in 0..h * w {
            if walk.values[i] != 0 {
                continue;
            }
            let predicted = scores.data()[2 * i] - scores.data()[2 * i + 1] > 0.0;
            let class = !scene.walkable[i] as usize;
            totals[class] += 1;
            hits[class] += (predicted == scene.walkable[i]) as usize;
        }
    }
    let n = totals[0] + totals[1];
    if n == 0 {
        return Err(Error::Empty("every pixel is labeled".into()));
    }
    let acc = (hits[0] + hits[1]) as f64 / n as f64;
    let rates: Vec<f64> = (0..2).filter(|&c| totals[c] > 0).map(|c| hits[c] as f64 / totals[c] as f64).collect();
    Ok((acc, rates.iter().sum::<f64>() / rates.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    /// `(accuracy, balanced accuracy)` on unlabeled pixels, for map variants.
    pub labels: Option<(f64, f64)>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub family: Family,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Relative ADE reduction of `with` against `without`.
    pub fn ade_reduction(&self, with: Variant, without: Variant) -> Option<f64> {
        let a = self.row(with)?.report.average().0;
        let b = self.row(without)?.report.average().0;
        Some(1.0 - a / b)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family: {:?}  seed: {}", self.family, self.seed);
        let _ = writeln!(s, "{:<16}  {:>8}  {:>8}  {:>9}  {:>9}", "variant", "ADE", "FDE", "label_acc", "balanced");
        for r in &self.rows {
            let (a, f) = r.report.average();
            let (la, lb) = match r.labels {
                Some((x, y)) => (format!("{x:.3}"), format!("{y:.3}")),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(s, "{:<16}  {:>8.3}  {:>8.3}  {:>9}  {:>9}", r.variant.name(), a, f, la, lb);
        }
        let has_maps = self.rows.iter().find(|r| r.variant.apply(ModelConfig::default()).use_maps);
        let no_maps = self
            .rows
            .iter()
            .find(|r| r.variant.is_learned() && !r.variant.apply(ModelConfig::default()).use_maps);
        if let (Some(m), Some(n)) = (has_maps, no_maps) {
            if let Some(d) = self.ade_reduction(m.variant, n.variant) {
                let _ = writeln!(s, "ade reduction {} vs {}: {:.1}%", m.variant.name(), n.variant.name(), 100.0 * d);
            }
        }
        s
    }
}

/// Trains every variant with the same seed and budget on the same data and
/// scores it on the test windows.
pub fn run_ablation(
    data: &BenchData,
    variants: &[Variant],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    family: Family,
) -> Result<AblationReport> {
    if variants.len() < 2 {
        return Err(Error::Config("an ablation needs at least two variants".into()));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let row = if variant.is_learned() {
            let cfg = variant.apply(model_cfg.clone());
            let outcome = train(cfg, train_cfg.clone(), &data.splits.train, &data.splits.val, &data.assets, None)?;
            let best = outcome.best;
            let predictor = Predictor::Learned { model: &best.model, maps: &best.maps };
            let report = evaluate(predictor, variant.name(), &data.splits.test, train_cfg.batch_size, train_cfg.eval_seed)?;
            let labels = if best.model.cfg.use_maps {
                Some(label_accuracy(&best.model, &best.maps, data)?)
            } else {
                None
            };
            AblationRow { variant, report, labels, best_epoch: Some(best.epoch) }
        } else {
            let predictor = Predictor::Kalman(Default::default());
            let report = evaluate(predictor, variant.name(), &data.splits.test, train_cfg.batch_size, train_cfg.eval_seed)?;
            AblationRow { variant, report, labels: None, best_epoch: None }
        };
        rows.push(row);
    }
    Ok(AblationReport { family, seed: train_cfg.seed, rows })
}

/// Ground-truth walkable mask as a `(H, W)` tensor of 0/1, for inspection.
pub fn walkable_tensor(scene: &SyntheticScene) -> Tensor {
    let data = scene.walkable.iter().map(|&b| b as u8 as f64).collect();
    Tensor::from_vec(&[scene.height, scene.width], data).expect("mask")
}
