//! Predictor, discriminator and map codecs.

mod codecs;
mod discriminator;
mod generator;
mod pool;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::archive::Archive;
use crate::autodiff::{PatchRequest, Var};
use crate::data::{TrajectorySample, WindowGroup};
use crate::error::{Error, Result};
use crate::maps::patch_origin;
use crate::nn::{Conv2d, Linear};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

pub use codecs::{Codecs, MapEncoder, MIN_ENCODER_INPUT};
pub use discriminator::Discriminator;
pub use generator::Generator;
pub use pool::SocialPool;

/// The six compared methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Kalman constant-acceleration baseline; no learned parameters.
    Linear,
    Sgan,
    SganP,
    Ours,
    OursNoPooling,
    OursNoLabels,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Linear,
        Variant::Sgan,
        Variant::SganP,
        Variant::Ours,
        Variant::OursNoPooling,
        Variant::OursNoLabels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Linear => "linear",
            Variant::Sgan => "sgan",
            Variant::SganP => "sgan-p",
            Variant::Ours => "ours",
            Variant::OursNoPooling => "ours-no-pooling",
            Variant::OursNoLabels => "ours-no-labels",
        }
    }

    pub fn is_learned(self) -> bool {
        self != Variant::Linear
    }

    /// Copies the variant's switches onto `cfg`.
    pub fn apply(self, mut cfg: ModelConfig) -> ModelConfig {
        let (maps, pool, labels) = match self {
            Variant::Linear | Variant::Sgan => (false, false, false),
            Variant::SganP => (false, true, false),
            Variant::Ours => (true, true, true),
            Variant::OursNoPooling => (true, false, true),
            Variant::OursNoLabels => (true, true, false),
        };
        cfg.use_maps = maps;
        cfg.pooling = pool;
        cfg.use_labels = labels;
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub obs_len: usize,
    pub pred_len: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_m: usize,
    pub noise_dim: usize,
    pub f_map: usize,
    pub patch_size: usize,
    pub pooling: bool,
    pub use_maps: bool,
    pub use_labels: bool,
    /// Base channel width of the image encoder backbone.
    pub encoder_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_len: 10,
            pred_len: 8,
            d_e: 16,
            d_h: 32,
            d_m: 32,
            noise_dim: 8,
            f_map: 2,
            patch_size: 10,
            pooling: true,
            use_maps: true,
            use_labels: true,
            encoder_width: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("obs_len", self.obs_len),
            ("pred_len", self.pred_len),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("d_m", self.d_m),
            ("f_map", self.f_map),
            ("patch_size", self.patch_size),
            ("encoder_width", self.encoder_width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.noise_dim >= self.d_h {
            return Err(Error::Config(format!(
                "noise_dim {} must be smaller than d_h {}",
                self.noise_dim, self.d_h
            )));
        }
        Ok(())
    }

    pub fn write_meta(&self, a: &mut Archive) {
        a.set_meta("obs_len", self.obs_len);
        a.set_meta("pred_len", self.pred_len);
        a.set_meta("d_e", self.d_e);
        a.set_meta("d_h", self.d_h);
        a.set_meta("d_m", self.d_m);
        a.set_meta("noise_dim", self.noise_dim);
        a.set_meta("f_map", self.f_map);
        a.set_meta("patch_size", self.patch_size);
        a.set_meta("pooling", self.pooling);
        a.set_meta("use_maps", self.use_maps);
        a.set_meta("use_labels", self.use_labels);
        a.set_meta("encoder_width", self.encoder_width);
    }

    pub fn read_meta(a: &Archive) -> Result<Self> {
        Ok(Self {
            obs_len: a.meta_parse("obs_len")?,
            pred_len: a.meta_parse("pred_len")?,
            d_e: a.meta_parse("d_e")?,
            d_h: a.meta_parse("d_h")?,
            d_m: a.meta_parse("d_m")?,
            noise_dim: a.meta_parse("noise_dim")?,
            f_map: a.meta_parse("f_map")?,
            patch_size: a.meta_parse("patch_size")?,
            pooling: a.meta_parse("pooling")?,
            use_maps: a.meta_parse("use_maps")?,
            use_labels: a.meta_parse("use_labels")?,
            encoder_width: a.meta_parse("encoder_width")?,
        })
    }
}

/// Samples prepared for one forward pass.
///
/// `groups` are the co-temporal ranges used for pooling; `scene_slot[i]` picks
/// the map of sample `i` out of the slice handed to the networks, whose order
/// is `scenes`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<TrajectorySample>,
    pub groups: Vec<Range<usize>>,
    pub scenes: Vec<String>,
    pub scene_slot: Vec<usize>,
}

impl Batch {
    pub fn from_groups<'a>(groups: impl IntoIterator<Item = &'a WindowGroup>) -> Result<Self> {
        let mut samples = Vec::new();
        let mut ranges = Vec::new();
        for g in groups {
            let start = samples.len();
            samples.extend(g.samples.iter().cloned());
            ranges.push(start..samples.len());
        }
        Self::new(samples, ranges)
    }

    pub fn new(samples: Vec<TrajectorySample>, groups: Vec<Range<usize>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("batch has no samples".into()));
        }
        let mut scenes: Vec<String> = samples.iter().map(|s| s.scene_id.clone()).collect();
        scenes.sort();
        scenes.dedup();
        let scene_slot = samples
            .iter()
            .map(|s| scenes.binary_search(&s.scene_id).expect("scene listed"))
            .collect();
        let (o, p) = (samples[0].observed.len(), samples[0].future.len());
        if samples.iter().any(|s| s.observed.len() != o || s.future.len() != p) {
            return Err(Error::Shape("samples in a batch must share O and P".into()));
        }
        Ok(Self {
            samples,
            groups,
            scenes,
            scene_slot,
        })
    }

    /// Every sample in its own group.
    pub fn singletons(samples: Vec<TrajectorySample>) -> Result<Self> {
        let groups = (0..samples.len()).map(|i| i..i + 1).collect();
        Self::new(samples, groups)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn obs_len(&self) -> usize {
        self.samples[0].observed.len()
    }

    pub fn pred_len(&self) -> usize {
        self.samples[0].future.len()
    }

    /// `(N, 2)` positions at step `t` of the observed-then-future sequence.
    pub fn positions_at(&self, t: usize) -> Tensor {
        let o = self.obs_len();
        let data = self
            .samples
            .iter()
            .flat_map(|s| if t < o { s.observed[t] } else { s.future[t - o] })
            .collect();
        Tensor::from_vec(&[self.len(), 2], data).expect("positions")
    }

    /// `(N, 2P)` ground-truth futures.
    pub fn future_tensor(&self) -> Tensor {
        let data = self
            .samples
            .iter()
            .flat_map(|s| s.future.iter().flatten().copied())
            .collect();
        Tensor::from_vec(&[self.len(), 2 * self.pred_len()], data).expect("future")
    }
}

/// 1x1 convolutions 7 -> 5 -> 10 with ReLU, flattened and projected to `d_m`.
#[derive(Clone, Debug)]
pub struct PatchDecoder {
    convs: Vec<Conv2d>,
    proj: Linear,
    patch_size: usize,
}

impl PatchDecoder {
    pub const WIDTHS: [usize; 3] = [7, 5, 10];

    pub fn new<R: rand::Rng>(ps: &mut ParamSet, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut cin = cfg.f_map;
        let convs = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv2d::new(ps, &format!("{name}.conv{i}"), cin, cout, 1, 1, 0, 1.0, rng);
                cin = cout;
                c
            })
            .collect();
        let flat = cfg.patch_size * cfg.patch_size * Self::WIDTHS[2];
        Self {
            convs,
            proj: Linear::new(ps, &format!("{name}.proj"), flat, cfg.d_m, rng),
            patch_size: cfg.patch_size,
        }
    }

    /// Per-pixel features before flattening, `(N, ph, pw, 10)`.
    pub fn pixel_features<'g>(&self, p: &Bound<'g>, patches: Var<'g>) -> Var<'g> {
        self.convs.iter().fold(patches, |x, c| c.forward(p, x).relu())
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, patches: Var<'g>) -> Result<Var<'g>> {
        let s = patches.shape();
        if s.len() != 4 || s[1] != self.patch_size || s[2] != self.patch_size {
            return Err(Error::Shape(format!(
                "patch decoder expects (N, {0}, {0}, F), got {s:?}",
                self.patch_size
            )));
        }
        let feats = self.pixel_features(p, patches);
        let n = s[0];
        Ok(self.proj.forward(p, feats.reshape(&[n, self.patch_size * self.patch_size * Self::WIDTHS[2]])))
    }
}

/// Map patches around `positions` (rounded), one per sample, from its scene's map.
pub fn query_patches<'g>(maps: &[Var<'g>], slots: &[usize], positions: &Tensor, size: usize) -> Var<'g> {
    let requests: Vec<PatchRequest> = positions
        .data()
        .chunks(2)
        .zip(slots)
        .map(|(p, &source)| {
            let [top, left] = patch_origin([p[0], p[1]], size);
            PatchRequest { source, top, left }
        })
        .collect();
    Var::patches(maps, &requests, size, size)
}

/// Overwrites every tensor of `ps` from `archive` entries named `{prefix}{name}`.
pub fn load_params(ps: &mut ParamSet, archive: &Archive, prefix: &str) -> Result<()> {
    let entries: Vec<_> = ps.ids().zip(ps.iter().map(|(n, _)| n.to_string())).collect();
    for (id, name) in entries {
        let key = format!("{prefix}{name}");
        let t = archive
            .tensor(&key)
            .ok_or_else(|| Error::Archive(format!("checkpoint lacks parameter '{key}'")))?;
        if t.shape() != ps.get(id).shape() {
            return Err(Error::Archive(format!(
                "parameter '{key}' has shape {:?}, model expects {:?}",
                t.shape(),
                ps.get(id).shape()
            )));
        }
        *ps.get_mut(id) = t.clone();
    }
    Ok(())
}

pub fn store_params(ps: &ParamSet, archive: &mut Archive, prefix: &str) {
    for (name, t) in ps.iter() {
        archive.push(format!("{prefix}{name}"), t.clone());
    }
}

/// Generator, discriminator and codecs of one run.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub codecs: Codecs,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            generator: Generator::new(&cfg, seed)?,
            discriminator: Discriminator::new(&cfg, seed.wrapping_add(1))?,
            codecs: Codecs::new(&cfg, seed.wrapping_add(2))?,
            cfg,
        })
    }

    pub fn write_into(&self, a: &mut Archive) {
        self.cfg.write_meta(a);
        store_params(&self.generator.params, a, "gen.");
        store_params(&self.discriminator.params, a, "disc.");
        store_params(&self.codecs.params, a, "codec.");
    }

    pub fn read_from(a: &Archive) -> Result<Self> {
        let cfg = ModelConfig::read_meta(a)?;
        let mut m = Self::new(cfg, 0)?;
        load_params(&mut m.generator.params, a, "gen.")?;
        load_params(&mut m.discriminator.params, a, "disc.")?;
        load_params(&mut m.codecs.params, a, "codec.")?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_round_trip_and_switch() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("s-gan".parse::<Variant>().is_err());
        let c = Variant::SganP.apply(ModelConfig::default());
        assert!(c.pooling && !c.use_maps && !c.use_labels);
        let c = Variant::OursNoPooling.apply(ModelConfig::default());
        assert!(!c.pooling && c.use_maps && c.use_labels);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { d_h: 0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { noise_dim: 32, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn model_archive_round_trip() {
        let cfg = ModelConfig { d_h: 8, noise_dim: 2, ..ModelConfig::default() };
        let m = Model::new(cfg, 4).unwrap();
        let mut a = Archive::new("checkpoint");
        m.write_into(&mut a);
        let back = Model::read_from(&a).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.generator.params, m.generator.params);
        assert_eq!(back.codecs.params, m.codecs.params);
    }
}
