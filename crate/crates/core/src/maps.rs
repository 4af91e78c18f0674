//! Per-scene latent maps, patch selection and auxiliary patch sampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::data::{LabelType, SceneAssets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_SIZE: usize = 10;
pub const INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMap {
    pub scene_id: String,
    /// `(H, W, F_map)`.
    pub tensor: Tensor,
}

impl SceneMap {
    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn f_map(&self) -> usize {
        self.tensor.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPatch {
    pub scene_id: String,
    /// `[row, col]` of the top-left cell in map coordinates; may be negative.
    pub origin: [i64; 2],
    pub values: Tensor,
    /// Row-major, 1 where the cell lies inside the map.
    pub valid: Vec<u8>,
}

/// Top-left cell of the `size`-square patch around `point = (x, y)`.
///
/// Even sizes put the rounded point at index `size / 2`, so a 10-patch spans
/// `round(y) - 5 ..= round(y) + 4`.
pub fn patch_origin(point: [f64; 2], size: usize) -> [i64; 2] {
    let half = (size / 2) as i64;
    [point[1].round() as i64 - half, point[0].round() as i64 - half]
}

/// Shifts `origin` so the patch lies fully inside an `h x w` grid.
pub fn clamp_origin(origin: [i64; 2], h: usize, w: usize, size: usize) -> [i64; 2] {
    [
        origin[0].clamp(0, h.saturating_sub(size) as i64),
        origin[1].clamp(0, w.saturating_sub(size) as i64),
    ]
}

/// `(ph, pw, C)` window of an `(H, W, C)` tensor; outside cells read zero.
pub fn crop(t: &Tensor, origin: [i64; 2], ph: usize, pw: usize) -> (Tensor, Vec<u8>) {
    let (h, w, c) = (t.shape()[0] as i64, t.shape()[1] as i64, t.shape()[2]);
    let mut out = vec![0.0; ph * pw * c];
    let mut valid = vec![0u8; ph * pw];
    for py in 0..ph {
        let y = origin[0] + py as i64;
        if y < 0 || y >= h {
            continue;
        }
        for px in 0..pw {
            let x = origin[1] + px as i64;
            if x < 0 || x >= w {
                continue;
            }
            let s = ((y * w + x) as usize) * c;
            let o = (py * pw + px) * c;
            out[o..o + c].copy_from_slice(&t.data()[s..s + c]);
            valid[py * pw + px] = 1;
        }
    }
    (Tensor::from_vec(&[ph, pw, c], out).expect("crop"), valid)
}

/// Stable per-scene seed so scenes sharing a run seed still differ.
pub fn scene_seed(seed: u64, scene_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in scene_id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

pub fn init_map(assets: &SceneAssets, f_map: usize, seed: u64) -> Result<SceneMap> {
    if f_map == 0 {
        return Err(Error::Config("F_map must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SceneMap {
        scene_id: assets.scene_id.clone(),
        tensor: Tensor::randn(&[assets.height(), assets.width(), f_map], INIT_STD, &mut rng),
    })
}

pub fn select_patch(map: &SceneMap, point: [f64; 2], size: usize) -> MapPatch {
    let origin = patch_origin(point, size);
    let (values, valid) = crop(&map.tensor, origin, size, size);
    MapPatch {
        scene_id: map.scene_id.clone(),
        origin,
        values,
        valid,
    }
}

/// Centers `(x, y)` drawn uniformly from `[size/2, dim - size/2 - 1]` per axis,
/// so every patch lies fully inside the map.
pub fn sample_aux_centers<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<[i64; 2]>> {
    if height < size || width < size {
        return Err(Error::Shape(format!(
            "{height}x{width} map is smaller than the {size}x{size} patch"
        )));
    }
    let half = (size / 2) as i64;
    let hi = |dim: usize| (dim as i64 - half - 1).max(half);
    Ok((0..count)
        .map(|_| [rng.gen_range(half..=hi(width)), rng.gen_range(half..=hi(height))])
        .collect())
}

/// Tri-state label targets `(H, W, |types|)` and the matching 0/1 bitmask,
/// channels in [`LabelType::ALL`] order.
pub fn label_targets(assets: &SceneAssets) -> (Tensor, Tensor) {
    let (h, w) = (assets.height(), assets.width());
    let k = LabelType::ALL.len();
    let mut labels = vec![0.0; h * w * k];
    let mut mask = vec![0.0; h * w * k];
    for (ch, ty) in LabelType::ALL.iter().enumerate() {
        let raster = assets.label(*ty);
        for (i, &v) in raster.values.iter().enumerate() {
            labels[i * k + ch] = v as f64;
            mask[i * k + ch] = (v != 0) as u8 as f64;
        }
    }
    (
        Tensor::from_vec(&[h, w, k], labels).expect("labels"),
        Tensor::from_vec(&[h, w, k], mask).expect("mask"),
    )
}

#[derive(Clone, Debug)]
pub struct AuxPatch {
    pub map: MapPatch,
    /// Reference image crop in `[0, 1]`, `(size, size, 3)`.
    pub image: Tensor,
    pub labels: Tensor,
    pub bitmask: Tensor,
}

pub fn sample_aux_patches(map: &SceneMap, assets: &SceneAssets, count: usize, seed: u64) -> Result<Vec<AuxPatch>> {
    sample_aux_patches_sized(map, assets, count, DEFAULT_PATCH_SIZE, seed)
}

pub fn sample_aux_patches_sized(
    map: &SceneMap,
    assets: &SceneAssets,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<AuxPatch>> {
    if count == 0 {
        return Err(Error::Config("aux patch count must be at least 1".into()));
    }
    if (assets.height(), assets.width()) != (map.height(), map.width()) {
        return Err(Error::Shape(format!(
            "map {}x{} does not match scene {}x{}",
            map.height(),
            map.width(),
            assets.height(),
            assets.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = sample_aux_centers(map.height(), map.width(), size, count, &mut rng)?;
    let image = assets.reference_image.to_unit_tensor();
    let (labels, mask) = label_targets(assets);
    Ok(centers
        .into_iter()
        .map(|[x, y]| {
            let patch = select_patch(map, [x as f64, y as f64], size);
            let origin = patch.origin;
            AuxPatch {
                map: patch,
                image: crop(&image, origin, size, size).0,
                labels: crop(&labels, origin, size, size).0,
                bitmask: crop(&mask, origin, size, size).0,
            }
        })
        .collect())
}

/// All maps of a run, keyed by scene id.
#[derive(Clone, Debug, PartialEq)]
pub struct MapStore {
    pub f_map: usize,
    pub maps: BTreeMap<String, SceneMap>,
}

impl MapStore {
    pub fn new(f_map: usize) -> Self {
        Self {
            f_map,
            maps: BTreeMap::new(),
        }
    }

    pub fn init<'a>(scenes: impl IntoIterator<Item = &'a SceneAssets>, f_map: usize, seed: u64) -> Result<Self> {
        let mut store = Self::new(f_map);
        for s in scenes {
            store.insert(init_map(s, f_map, scene_seed(seed, &s.scene_id))?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, map: SceneMap) -> Result<()> {
        if map.f_map() != self.f_map {
            return Err(Error::Shape(format!(
                "map for {} has F_map {}, store expects {}",
                map.scene_id,
                map.f_map(),
                self.f_map
            )));
        }
        self.maps.insert(map.scene_id.clone(), map);
        Ok(())
    }

    pub fn get(&self, scene_id: &str) -> Result<&SceneMap> {
        self.maps
            .get(scene_id)
            .ok_or_else(|| Error::MissingMap(scene_id.to_string()))
    }

    pub fn get_mut(&mut self, scene_id: &str) -> Result<&mut SceneMap> {
        self.maps
            .get_mut(scene_id)
            .ok_or_else(|| Error::MissingMap(scene_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn write_into(&self, archive: &mut Archive) {
        archive.set_meta("f_map", self.f_map);
        for (id, m) in &self.maps {
            archive.push(format!("map.{id}"), m.tensor.clone());
        }
    }

    /// Reads every `map.*` tensor; `expected_f_map` rejects mismatched files.
    pub fn read_from(archive: &Archive, expected_f_map: Option<usize>) -> Result<Self> {
        let f_map: usize = archive.meta_parse("f_map")?;
        if let Some(expected) = expected_f_map {
            if expected != f_map {
                return Err(Error::Archive(format!(
                    "archive holds F_map {f_map} maps, configuration expects {expected}"
                )));
            }
        }
        let mut store = Self::new(f_map);
        for (name, t) in &archive.tensors {
            let Some(id) = name.strip_prefix("map.") else { continue };
            if t.ndim() != 3 || t.shape()[2] != f_map {
                return Err(Error::Archive(format!("map {id} has shape {:?}", t.shape())));
            }
            store.insert(SceneMap {
                scene_id: id.to_string(),
                tensor: t.clone(),
            })?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new("maps");
        self.write_into(&mut a);
        a.save(path)
    }

    pub fn load(path: &Path, expected_f_map: Option<usize>) -> Result<Self> {
        let a = Archive::load(path)?;
        a.expect_kind("maps")?;
        Self::read_from(&a, expected_f_map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelRaster, RgbRaster};

    fn assets(h: usize, w: usize) -> SceneAssets {
        SceneAssets {
            scene_id: "s".into(),
            reference_image: RgbRaster::filled(h, w, [10, 20, 30]),
            label_rasters: BTreeMap::new(),
            homography: None,
        }
    }

    fn ramp(h: usize, w: usize, f: usize) -> SceneMap {
        SceneMap {
            scene_id: "s".into(),
            tensor: Tensor::from_vec(&[h, w, f], (0..h * w * f).map(|v| v as f64).collect()).unwrap(),
        }
    }

    #[test]
    fn init_is_seeded_and_small() {
        let a = assets(100, 100);
        let m1 = init_map(&a, 2, 7).unwrap();
        assert_eq!(m1, init_map(&a, 2, 7).unwrap());
        let mean = m1.tensor.sum() / m1.tensor.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!(matches!(init_map(&a, 0, 7), Err(Error::Config(_))));
    }

    #[test]
    fn centered_patch_rows() {
        let m = ramp(20, 20, 2);
        let p = select_patch(&m, [10.0, 10.0], 10);
        assert_eq!(p.origin, [5, 5]);
        assert_eq!(p.values.at3(0, 0, 0), m.tensor.at3(5, 5, 0));
        assert_eq!(p.values.at3(9, 9, 1), m.tensor.at3(14, 14, 1));
        assert!(p.valid.iter().all(|&v| v == 1));
    }

    #[test]
    fn corner_patch_is_zero_padded() {
        let m = ramp(20, 20, 1);
        let p = select_patch(&m, [0.0, 0.0], 10);
        for y in 0..10 {
            for x in 0..10 {
                let inside = y >= 5 && x >= 5;
                assert_eq!(p.valid[y * 10 + x] == 1, inside);
                if !inside {
                    assert_eq!(p.values.at3(y, x, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn full_map_patch() {
        let m = ramp(10, 10, 2);
        let p = select_patch(&m, [5.0, 5.0], 10);
        assert_eq!(p.values, m.tensor);
    }

    #[test]
    fn patch_linearity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[12, 15, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[12, 15, 2], 1.0, &mut rng);
        let sum = a.zip_map(&b, |x, y| x + y);
        for point in [[0.0, 0.0], [7.4, 3.6], [14.0, 11.0], [-20.0, 3.0]] {
            let (pa, _) = crop(&a, patch_origin(point, 10), 10, 10);
            let (pb, _) = crop(&b, patch_origin(point, 10), 10, 10);
            let (ps, _) = crop(&sum, patch_origin(point, 10), 10, 10);
            assert_eq!(ps, pa.zip_map(&pb, |x, y| x + y));
            let (pz, _) = crop(&Tensor::zeros(&[12, 15, 2]), patch_origin(point, 10), 10, 10);
            assert!(pz.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn aux_patches_in_bounds_and_seeded() {
        let a = assets(100, 100);
        let m = init_map(&a, 2, 1).unwrap();
        let p1 = sample_aux_patches(&m, &a, 16, 9).unwrap();
        let p2 = sample_aux_patches(&m, &a, 16, 9).unwrap();
        for (x, y) in p1.iter().zip(&p2) {
            assert_eq!(x.map.origin, y.map.origin);
            for o in x.map.origin {
                assert!((0..=89).contains(&o));
            }
            assert!(x.map.valid.iter().all(|&v| v == 1));
            assert!((x.image.at3(0, 0, 0) - 10.0 / 255.0).abs() < 1e-12);
        }
        let small = assets(8, 30);
        let sm = init_map(&small, 2, 1).unwrap();
        assert!(sample_aux_patches(&sm, &small, 1, 0).is_err());
    }

    #[test]
    fn aux_center_distribution_is_uniform() {
        // 4 quadrant bins of the 90 admissible centers per axis; chi-square with
        // 3 degrees of freedom, critical value 11.345 at p = 0.01.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers = sample_aux_centers(100, 100, 10, 100_000, &mut rng).unwrap();
        let mut bins = [0f64; 4];
        for [x, y] in centers {
            assert!((5..=94).contains(&x) && (5..=94).contains(&y));
            bins[((x >= 50) as usize) * 2 + (y >= 50) as usize] += 1.0;
        }
        let expected = 25_000.0;
        let chi2: f64 = bins.iter().map(|b| (b - expected).powi(2) / expected).sum();
        assert!(chi2 < 11.345, "chi2 {chi2}");
    }

    #[test]
    fn label_targets_follow_type_order() {
        let mut a = assets(3, 3);
        let mut r = LabelRaster::zeros(3, 3);
        r.set(1, 2, -1);
        a.label_rasters.insert(LabelType::Obstacle, r);
        let (l, m) = label_targets(&a);
        assert_eq!(l.at3(1, 2, 1), -1.0);
        assert_eq!(m.at3(1, 2, 1), 1.0);
        assert_eq!(m.sum(), 1.0);
    }

    #[test]
    fn store_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.cmar");
        let mut b = assets(12, 13);
        b.scene_id = "other".into();
        let store = MapStore::init([&assets(12, 11), &b], 2, 5).unwrap();
        assert_ne!(store.maps["s"].tensor.data()[0], store.maps["other"].tensor.data()[0]);
        store.save(&path).unwrap();
        assert_eq!(MapStore::load(&path, Some(2)).unwrap(), store);
        assert!(MapStore::load(&path, Some(3)).is_err());

        MapStore::new(2).save(&path).unwrap();
        assert!(MapStore::load(&path, Some(2)).unwrap().is_empty());
    }
}
