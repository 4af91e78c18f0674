use image::{imageops, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut};

use crate::data::{RgbRaster, TrajectorySample};

pub const OBSERVED: Rgb<u8> = Rgb([40, 90, 255]);
pub const TRUTH: Rgb<u8> = Rgb([235, 40, 40]);
pub const PREDICTED: Rgb<u8> = Rgb([30, 200, 60]);

fn polyline(img: &mut RgbImage, points: &[[f64; 2]], scale: f64, color: Rgb<u8>) {
    // pixel centers sit at integer coordinates
    let map = |p: &[f64; 2]| (((p[0] + 0.5) * scale) as f32, ((p[1] + 0.5) * scale) as f32);
    for w in points.windows(2) {
        draw_line_segment_mut(img, map(&w[0]), map(&w[1]), color);
    }
    if let Some(last) = points.last() {
        let (x, y) = map(last);
        draw_filled_circle_mut(img, (x as i32, y as i32), (scale / 3.0).max(1.0) as i32, color);
    }
}

/// Upscales the reference image by `scale` and draws each sample's observed
/// track, its true future and the predicted future (both continuing from the
/// last observed point).
pub fn render_overlay(reference: &RgbRaster, samples: &[TrajectorySample], predictions: &[Vec<[f64; 2]>], scale: u32) -> RgbImage {
    let base = reference.to_image();
    let s = scale.max(1);
    let mut img = imageops::resize(&base, base.width() * s, base.height() * s, imageops::FilterType::Nearest);
    for (sample, pred) in samples.iter().zip(predictions) {
        let last = *sample.observed.last().expect("observed");
        polyline(&mut img, &sample.observed, s as f64, OBSERVED);
        let truth: Vec<[f64; 2]> = std::iter::once(last).chain(sample.future.iter().copied()).collect();
        polyline(&mut img, &truth, s as f64, TRUTH);
        let guess: Vec<[f64; 2]> = std::iter::once(last).chain(pred.iter().copied()).collect();
        polyline(&mut img, &guess, s as f64, PREDICTED);
    }
    img
}
