//! Scene data: annotation ingestion, pixel conversion, windowing, temporal
//! splits, reference images and label rasters.

mod parse;
mod prepared;
mod raster;
mod windows;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub use parse::{parse_annotations, parse_homography, read_tsv, write_tsv, UCY_FRAME_SIZE};
pub use prepared::{
    list_prepared, load_prepared, load_prepared_scene, prepare_raw_scene, write_prepared, Dataset, PrepareOptions,
    PreparedScene,
};
pub use raster::{
    build_reference_image, label_raster_from_gray, label_raster_to_gray, load_label_png, load_label_rasters,
    load_rgb_png, save_label_png, save_rgb_png, LabelRaster, LabelType, RgbRaster,
};
pub use windows::{extract_windows, group_by_start, read_samples, temporal_split, write_samples, Splits, WindowGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Units {
    Pixels,
    Meters,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawDetection {
    pub scene_id: String,
    pub frame: i64,
    pub agent_id: i64,
    pub position: [f64; 2],
    pub units: Units,
}

impl RawDetection {
    pub fn new(scene_id: impl Into<String>, frame: i64, agent_id: i64, position: [f64; 2]) -> Self {
        Self {
            scene_id: scene_id.into(),
            frame,
            agent_id,
            position,
            units: Units::Pixels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    /// BIWI `obsmat.txt`: 8 columns, metric positions.
    EthObsmat,
    /// UCY `.vsp` control-point splines, pixel positions around the image center.
    UcyVsp,
    /// `scene frame agent x y`, whitespace separated, pixels.
    InternalTsv,
}

impl FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eth_obsmat" => Ok(Self::EthObsmat),
            "ucy_vsp" => Ok(Self::UcyVsp),
            "internal_tsv" => Ok(Self::InternalTsv),
            other => Err(Error::Config(format!("unknown annotation format '{other}'"))),
        }
    }
}

impl fmt::Display for AnnotationFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EthObsmat => "eth_obsmat",
            Self::UcyVsp => "ucy_vsp",
            Self::InternalTsv => "internal_tsv",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub scene_id: String,
    pub agent_id: i64,
    pub start_frame: i64,
    pub observed: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct SceneAssets {
    pub scene_id: String,
    pub reference_image: RgbRaster,
    pub label_rasters: BTreeMap<LabelType, LabelRaster>,
    pub homography: Option<Matrix3<f64>>,
}

impl SceneAssets {
    pub fn height(&self) -> usize {
        self.reference_image.height
    }

    pub fn width(&self) -> usize {
        self.reference_image.width
    }

    /// Label raster for `ty`, or an all-zero raster when the type is unannotated.
    pub fn label(&self, ty: LabelType) -> LabelRaster {
        self.label_rasters
            .get(&ty)
            .cloned()
            .unwrap_or_else(|| LabelRaster::zeros(self.height(), self.width()))
    }

    pub fn validate(&self) -> Result<()> {
        for (ty, raster) in &self.label_rasters {
            if raster.height != self.height() || raster.width != self.width() {
                return Err(Error::Validation(format!(
                    "scene {}: {ty} raster is {}x{}, reference image is {}x{}",
                    self.scene_id,
                    raster.height,
                    raster.width,
                    self.height(),
                    self.width()
                )));
            }
        }
        Ok(())
    }
}

/// Applies `homography` with projective division; output is in pixels.
pub fn to_pixel_coords(detections: &[RawDetection], homography: &Matrix3<f64>) -> Result<Vec<RawDetection>> {
    let det = homography.determinant();
    if !det.is_finite() || det.abs() < 1e-15 {
        return Err(Error::Validation(format!("homography is singular (det = {det:e})")));
    }
    detections
        .iter()
        .enumerate()
        .map(|(index, d)| {
            let p = homography * Vector3::new(d.position[0], d.position[1], 1.0);
            if p.z.abs() < 1e-12 || !p.z.is_finite() {
                return Err(Error::DegenerateProjection {
                    index,
                    scene: d.scene_id.clone(),
                    frame: d.frame,
                    agent: d.agent_id,
                });
            }
            Ok(RawDetection {
                position: [p.x / p.z, p.y / p.z],
                units: Units::Pixels,
                ..d.clone()
            })
        })
        .collect()
}

/// Keeps frames congruent to each scene's first frame modulo `stride` and
/// renumbers the retained frames `0, 1, 2, ...` in order.
pub fn resample_frames(detections: &[RawDetection], stride: usize) -> Vec<RawDetection> {
    let stride = stride.max(1) as i64;
    let mut first: BTreeMap<&str, i64> = BTreeMap::new();
    for d in detections {
        let f = first.entry(d.scene_id.as_str()).or_insert(d.frame);
        *f = (*f).min(d.frame);
    }
    let keep = |d: &RawDetection| (d.frame - first[d.scene_id.as_str()]).rem_euclid(stride) == 0;
    let mut frames: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
    for d in detections.iter().filter(|d| keep(d)) {
        frames.entry(d.scene_id.as_str()).or_default().push(d.frame);
    }
    for f in frames.values_mut() {
        f.sort_unstable();
        f.dedup();
    }
    detections
        .iter()
        .filter(|d| keep(d))
        .map(|d| {
            let rank = frames[d.scene_id.as_str()].binary_search(&d.frame).expect("retained frame") as i64;
            RawDetection { frame: rank, ..d.clone() }
        })
        .collect()
}
