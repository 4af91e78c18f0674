//! Reference images and tri-state label rasters.
//!
//! Label rasters are stored as 8-bit grayscale PNGs, one per scene and label
//! type: `0` is a negative example (-1), `128` is unlabeled (0) and `255` is a
//! positive example (+1). Any other gray value is rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbRaster {
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3`.
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 raster needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `(H, W, 3)` tensor scaled to `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width, 3],
            self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        )
        .expect("raster dims")
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("raster dims")
    }

    pub fn from_image(img: &RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelType {
    Walkable,
    Obstacle,
}

impl LabelType {
    pub const ALL: [LabelType; 2] = [LabelType::Walkable, LabelType::Obstacle];

    pub fn name(self) -> &'static str {
        match self {
            LabelType::Walkable => "walkable",
            LabelType::Obstacle => "obstacle",
        }
    }
}

impl fmt::Display for LabelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walkable" => Ok(Self::Walkable),
            "obstacle" => Ok(Self::Obstacle),
            other => Err(Error::Config(format!("unknown label type '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `{-1, 0, +1}`.
    pub values: Vec<i8>,
}

impl LabelRaster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, values: Vec<i8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} label raster got {} values", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::Validation(format!("label value {v} outside {{-1, 0, 1}}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, y: usize, x: usize) -> i8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: i8) {
        self.values[y * self.width + x] = v;
    }

    /// 1 where a label is present, 0 where the pixel is unlabeled.
    pub fn bitmask(&self) -> Vec<u8> {
        self.values.iter().map(|&v| (v != 0) as u8).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}

/// Per-pixel, per-channel temporal median.
///
/// Even frame counts take the mean of the two middle values, rounded half up.
pub fn build_reference_image(frames: &[RgbRaster]) -> Result<RgbRaster> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Empty("reference image needs at least one frame".into()))?;
    for (i, f) in frames.iter().enumerate() {
        if f.height != first.height || f.width != first.width {
            return Err(Error::Shape(format!(
                "frame {i} is {}x{}, expected {}x{}",
                f.height, f.width, first.height, first.width
            )));
        }
    }
    let n = frames.len();
    let mut series = vec![0u8; n];
    let data = (0..first.data.len())
        .map(|i| {
            for (s, f) in series.iter_mut().zip(frames) {
                *s = f.data[i];
            }
            series.sort_unstable();
            if n % 2 == 1 {
                series[n / 2]
            } else {
                (series[n / 2 - 1] as u16 + series[n / 2] as u16).div_ceil(2) as u8
            }
        })
        .collect();
    Ok(RgbRaster {
        height: first.height,
        width: first.width,
        data,
    })
}

pub fn label_raster_from_gray(img: &GrayImage) -> Result<LabelRaster> {
    let values = img
        .as_raw()
        .iter()
        .map(|&g| match g {
            0 => Ok(-1),
            128 => Ok(0),
            255 => Ok(1),
            other => Err(Error::Validation(format!(
                "label gray value {other} is not one of 0, 128, 255"
            ))),
        })
        .collect::<Result<Vec<i8>>>()?;
    LabelRaster::new(img.height() as usize, img.width() as usize, values)
}

pub fn label_raster_to_gray(raster: &LabelRaster) -> GrayImage {
    let data = raster
        .values
        .iter()
        .map(|&v| match v {
            -1 => 0,
            0 => 128,
            _ => 255,
        })
        .collect();
    GrayImage::from_raw(raster.width as u32, raster.height as u32, data).expect("raster dims")
}

pub fn load_label_png(path: &Path) -> Result<LabelRaster> {
    let img = image::open(path)?.to_luma8();
    label_raster_from_gray(&img)
}

pub fn save_label_png(path: &Path, raster: &LabelRaster) -> Result<()> {
    label_raster_to_gray(raster).save(path)?;
    Ok(())
}

/// Loads one raster per label type and checks it matches `(height, width)`.
pub fn load_label_rasters(
    paths: &BTreeMap<LabelType, PathBuf>,
    height: usize,
    width: usize,
) -> Result<BTreeMap<LabelType, LabelRaster>> {
    paths
        .iter()
        .map(|(&ty, path)| {
            let raster = load_label_png(path)?;
            if raster.height != height || raster.width != width {
                return Err(Error::Validation(format!(
                    "{ty} labels {} are {}x{}, reference image is {height}x{width}",
                    path.display(),
                    raster.height,
                    raster.width
                )));
            }
            Ok((ty, raster))
        })
        .collect()
}

pub fn load_rgb_png(path: &Path) -> Result<RgbRaster> {
    Ok(RgbRaster::from_image(&image::open(path)?.to_rgb8()))
}

pub fn save_rgb_png(path: &Path, raster: &RgbRaster) -> Result<()> {
    raster.to_image().save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_series(values: &[u8]) -> Vec<RgbRaster> {
        values.iter().map(|&v| RgbRaster::filled(1, 1, [v, v, v])).collect()
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(build_reference_image(&gray_series(&[3, 7, 5])).unwrap().data, vec![5; 3]);
        assert_eq!(build_reference_image(&gray_series(&[2, 8])).unwrap().data, vec![5; 3]);
        assert_eq!(build_reference_image(&gray_series(&[2, 7])).unwrap().data, vec![5; 3]);
    }

    #[test]
    fn single_frame_and_idempotence() {
        let mut f = RgbRaster::filled(3, 4, [10, 20, 30]);
        f.set_pixel(1, 2, [255, 0, 7]);
        assert_eq!(build_reference_image(std::slice::from_ref(&f)).unwrap(), f);
        let many = vec![f.clone(); 6];
        assert_eq!(build_reference_image(&many).unwrap(), f);
    }

    #[test]
    fn median_rejects_empty_and_mismatched() {
        assert!(matches!(build_reference_image(&[]), Err(Error::Empty(_))));
        let frames = vec![RgbRaster::filled(2, 2, [0; 3]), RgbRaster::filled(2, 3, [0; 3])];
        assert!(build_reference_image(&frames).is_err());
    }

    #[test]
    fn bitmask_counts() {
        let zero = LabelRaster::zeros(3, 3);
        assert!(zero.bitmask().iter().all(|&b| b == 0));
        let mut r = LabelRaster::zeros(3, 3);
        r.set(0, 0, 1);
        r.set(2, 1, -1);
        assert_eq!(r.bitmask().iter().filter(|&&b| b == 1).count(), 2);
    }

    #[test]
    fn gray_convention() {
        let img = GrayImage::from_raw(3, 1, vec![0, 128, 255]).unwrap();
        let r = label_raster_from_gray(&img).unwrap();
        assert_eq!(r.values, vec![-1, 0, 1]);
        assert_eq!(label_raster_to_gray(&r), img);
        let bad = GrayImage::from_raw(1, 1, vec![200]).unwrap();
        assert!(matches!(label_raster_from_gray(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn label_png_size_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mut walk = LabelRaster::zeros(4, 5);
        walk.set(1, 1, 1);
        let mut obst = LabelRaster::zeros(4, 5);
        // same pixel positive in both types is allowed
        obst.set(1, 1, 1);
        let pw = dir.path().join("walkable.png");
        let po = dir.path().join("obstacle.png");
        save_label_png(&pw, &walk).unwrap();
        save_label_png(&po, &obst).unwrap();
        let paths = BTreeMap::from([(LabelType::Walkable, pw.clone()), (LabelType::Obstacle, po)]);
        let loaded = load_label_rasters(&paths, 4, 5).unwrap();
        assert_eq!(loaded[&LabelType::Walkable], walk);
        assert_eq!(loaded[&LabelType::Obstacle], obst);
        let paths = BTreeMap::from([(LabelType::Walkable, pw)]);
        assert!(matches!(load_label_rasters(&paths, 5, 5), Err(Error::Validation(_))));
    }

    #[test]
    fn rgb_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RgbRaster::filled(3, 2, [1, 2, 3]);
        r.set_pixel(2, 1, [200, 100, 50]);
        let p = dir.path().join("ref.png");
        save_rgb_png(&p, &r).unwrap();
        assert_eq!(load_rgb_png(&p).unwrap(), r);
    }
}
