//! On-disk layout of raw and prepared scenes.
//!
//! A raw scene directory holds one annotation file (`detections.tsv`,
//! `obsmat.txt` or a `*.vsp`), an optional ETH-style `H.txt` (image to world,
//! inverted here), a `reference.png` or a `frames/` directory of PNGs to
//! median, and optional `labels/<type>.png` rasters.
//!
//! A prepared scene directory holds `detections.tsv`, `reference.png`,
//! `labels/<type>.png` and the `train.tsv`, `val.tsv`, `test.tsv` samples.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::{
    build_reference_image, extract_windows, group_by_start, load_label_rasters, load_rgb_png, parse_annotations,
    parse_homography, read_samples, resample_frames, save_label_png, save_rgb_png, temporal_split, to_pixel_coords,
    write_samples, write_tsv, AnnotationFormat, LabelType, RawDetection, SceneAssets, Splits,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrepareOptions {
    pub obs_len: usize,
    pub pred_len: usize,
    pub fractions: (f64, f64, f64),
    /// Frame decimation applied to `.vsp` annotations.
    pub ucy_frame_stride: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            obs_len: 10,
            pred_len: 8,
            fractions: (0.6, 0.1, 0.3),
            ucy_frame_stride: 10,
        }
    }
}

/// A scene's detections, assets and splits.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub detections: Vec<RawDetection>,
    pub assets: SceneAssets,
    pub splits: Splits,
}

/// Every scene's assets with their splits concatenated.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub assets: Vec<SceneAssets>,
    pub splits: Splits,
}

impl Dataset {
    pub fn push(&mut self, assets: SceneAssets, splits: Splits) {
        self.assets.push(assets);
        self.splits.train.extend(splits.train);
        self.splits.val.extend(splits.val);
        self.splits.test.extend(splits.test);
    }
}

fn find_annotations(dir: &Path) -> Result<(PathBuf, AnnotationFormat)> {
    for (name, fmt) in [("detections.tsv", AnnotationFormat::InternalTsv), ("obsmat.txt", AnnotationFormat::EthObsmat)] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok((p, fmt));
        }
    }
    let mut vsp: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "vsp"))
        .collect();
    vsp.sort();
    match vsp.len() {
        1 => Ok((vsp.remove(0), AnnotationFormat::UcyVsp)),
        0 => Err(Error::Config(format!("no annotation file found in {}", dir.display()))),
        _ => Err(Error::Config(format!("several .vsp files in {}", dir.display()))),
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    Ok(files)
}

fn label_paths(dir: &Path) -> BTreeMap<LabelType, PathBuf> {
    LabelType::ALL
        .iter()
        .map(|&ty| (ty, dir.join("labels").join(format!("{}.png", ty.name()))))
        .filter(|(_, p)| p.is_file())
        .collect()
}

fn load_assets(dir: &Path, scene_id: &str, reference: SceneAssetsImage) -> Result<SceneAssets> {
    let image = match reference {
        SceneAssetsImage::File(p) => load_rgb_png(&p)?,
        SceneAssetsImage::Frames(files) => {
            let frames = files.iter().map(|p| load_rgb_png(p)).collect::<Result<Vec<_>>>()?;
            build_reference_image(&frames)?
        }
    };
    let label_rasters = load_label_rasters(&label_paths(dir), image.height, image.width)?;
    let assets = SceneAssets {
        scene_id: scene_id.to_string(),
        reference_image: image,
        label_rasters,
        homography: None,
    };
    assets.validate()?;
    Ok(assets)
}

enum SceneAssetsImage {
    File(PathBuf),
    Frames(Vec<PathBuf>),
}

/// Reads a raw scene directory: pixel conversion, frame decimation,
/// windowing and the temporal split.
pub fn prepare_raw_scene(dir: &Path, scene_id: &str, opts: &PrepareOptions) -> Result<PreparedScene> {
    let (path, format) = find_annotations(dir)?;
    let mut dets = parse_annotations(&path, format, scene_id)?;
    for d in &mut dets {
        d.scene_id = scene_id.to_string();
    }
    let h_path = dir.join("H.txt");
    let homography = if h_path.is_file() {
        let h = parse_homography(&h_path)?;
        let inv = h
            .try_inverse()
            .ok_or_else(|| Error::Validation(format!("{} is not invertible", h_path.display())))?;
        dets = to_pixel_coords(&dets, &inv)?;
        Some(inv)
    } else if format == AnnotationFormat::EthObsmat {
        return Err(Error::Config(format!("{} has metric annotations but no H.txt", dir.display())));
    } else {
        None
    };
    let stride = if format == AnnotationFormat::UcyVsp { opts.ucy_frame_stride } else { 1 };
    let dets = resample_frames(&dets, stride.max(1));
    let reference = if dir.join("reference.png").is_file() {
        SceneAssetsImage::File(dir.join("reference.png"))
    } else if dir.join("frames").is_dir() {
        SceneAssetsImage::Frames(png_files(&dir.join("frames"))?)
    } else {
        return Err(Error::Config(format!("{} has neither reference.png nor frames/", dir.display())));
    };
    let mut assets = load_assets(dir, scene_id, reference)?;
    assets.homography = homography;
    let groups = group_by_start(&extract_windows(&dets, opts.obs_len, opts.pred_len));
    let splits = temporal_split(&groups, opts.fractions)?;
    Ok(PreparedScene {
        detections: dets,
        assets,
        splits,
    })
}

/// Writes the prepared layout under `root/<scene_id>/`.
pub fn write_prepared(root: &Path, scene: &PreparedScene) -> Result<PathBuf> {
    let dir = root.join(&scene.assets.scene_id);
    fs::create_dir_all(dir.join("labels"))?;
    write_tsv(BufWriter::new(File::create(dir.join("detections.tsv"))?), &scene.detections)?;
    save_rgb_png(&dir.join("reference.png"), &scene.assets.reference_image)?;
    for (ty, raster) in &scene.assets.label_rasters {
        save_label_png(&dir.join("labels").join(format!("{}.png", ty.name())), raster)?;
    }
    for (name, groups) in [("train", &scene.splits.train), ("val", &scene.splits.val), ("test", &scene.splits.test)] {
        let f = BufWriter::new(File::create(dir.join(format!("{name}.tsv")))?);
        write_samples(f, &Splits::flatten(groups))?;
    }
    Ok(dir)
}

/// Scene directories under `root` that contain prepared splits, sorted.
pub fn list_prepared(root: &Path) -> Result<Vec<String>> {
    let mut out: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("train.tsv").is_file())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_prepared_scene(root: &Path, scene_id: &str) -> Result<(SceneAssets, Splits)> {
    let dir = root.join(scene_id);
    if !dir.is_dir() {
        return Err(Error::Config(format!("no prepared scene at {}", dir.display())));
    }
    let assets = load_assets(&dir, scene_id, SceneAssetsImage::File(dir.join("reference.png")))?;
    let load = |name: &str| -> Result<_> {
        let samples = read_samples(&dir.join(format!("{name}.tsv")))?;
        if let Some(s) = samples.iter().find(|s| s.scene_id != scene_id) {
            return Err(Error::Validation(format!("{name}.tsv of {scene_id} holds a sample of {}", s.scene_id)));
        }
        Ok(group_by_start(&samples))
    };
    let splits = Splits {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
    };
    Ok((assets, splits))
}

/// Loads `scenes`, or every prepared scene when the list is empty.
pub fn load_prepared(root: &Path, scenes: &[String]) -> Result<Dataset> {
    let names = if scenes.is_empty() { list_prepared(root)? } else { scenes.to_vec() };
    if names.is_empty() {
        return Err(Error::Empty(format!("no prepared scenes under {}", root.display())));
    }
    let mut data = Dataset::default();
    for name in &names {
        let (assets, splits) = load_prepared_scene(root, name)?;
        data.push(assets, splits);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelRaster, RgbRaster};

    fn raw_scene(dir: &Path) {
        fs::create_dir_all(dir.join("labels")).unwrap();
        let mut dets = Vec::new();
        for agent in 0..3 {
            for frame in 0..40 {
                dets.push(RawDetection::new("ignored", frame, agent, [frame as f64, 10.0 + agent as f64]));
            }
        }
        write_tsv(File::create(dir.join("detections.tsv")).unwrap(), &dets).unwrap();
        save_rgb_png(&dir.join("reference.png"), &RgbRaster::filled(40, 50, [9, 9, 9])).unwrap();
        let mut walk = LabelRaster::zeros(40, 50);
        walk.set(3, 4, 1);
        save_label_png(&dir.join("labels/walkable.png"), &walk).unwrap();
    }

    #[test]
    fn prepare_write_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let raw = tmp.path().join("raw/plaza");
        raw_scene(&raw);
        let scene = prepare_raw_scene(&raw, "plaza", &PrepareOptions::default()).unwrap();
        // 3 agents over 40 frames, windows of 18
        assert_eq!(Splits::flatten(&scene.splits.train).len() + Splits::flatten(&scene.splits.val).len() + Splits::flatten(&scene.splits.test).len(), 3 * 23);
        let out = tmp.path().join("prepared");
        write_prepared(&out, &scene).unwrap();
        assert_eq!(list_prepared(&out).unwrap(), vec!["plaza".to_string()]);
        let data = load_prepared(&out, &[]).unwrap();
        assert_eq!(data.splits, scene.splits);
        assert_eq!(data.assets[0].reference_image, scene.assets.reference_image);
        assert_eq!(data.assets[0].label(LabelType::Walkable).get(3, 4), 1);
        assert!(load_prepared(&out, &["missing".into()]).is_err());
    }

    #[test]
    fn missing_pieces_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(prepare_raw_scene(tmp.path(), "x", &PrepareOptions::default()).is_err());
        raw_scene(tmp.path());
        fs::remove_file(tmp.path().join("reference.png")).unwrap();
        assert!(prepare_raw_scene(tmp.path(), "x", &PrepareOptions::default()).is_err());
    }
}
