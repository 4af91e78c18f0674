use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, ParamSet};

/// Smallest image side the encoder backbone accepts.
pub const MIN_ENCODER_INPUT: usize = 32;

#[derive(Clone, Debug)]
struct BasicBlock {
    c1: Conv2d,
    c2: Conv2d,
    down: Option<Conv2d>,
}

impl BasicBlock {
    fn new<R: Rng>(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let down = (stride != 1 || cin != cout)
            .then(|| Conv2d::new(ps, &format!("{name}.down"), cin, cout, 1, stride, 0, 1.0, rng));
        Self {
            c1: Conv2d::new(ps, &format!("{name}.c1"), cin, cout, 3, stride, 1, 1.0, rng),
            // scaled down so the unnormalized residual stack keeps its variance
            c2: Conv2d::new(ps, &format!("{name}.c2"), cout, cout, 3, 1, 1, 0.25, rng),
            down,
        }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let y = self.c2.forward(p, self.c1.forward(p, x).relu());
        let skip = match &self.down {
            Some(d) => d.forward(p, x),
            None => x,
        };
        y.add(skip).relu()
    }
}

/// Image to map-shaped features: an 18-layer residual backbone (stem plus
/// four stages of two basic blocks, no normalization layers), bilinear
/// upsampling to the input size and a three-layer head.
#[derive(Clone, Debug)]
pub struct MapEncoder {
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
    head: [Conv2d; 3],
}

impl MapEncoder {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        head_channels: [usize; 3],
        f_map: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if head_channels[2] != f_map {
            return Err(Error::Config(format!(
                "encoder head ends with {} channels but F_map is {f_map}",
                head_channels[2]
            )));
        }
        let stem = Conv2d::new(ps, &format!("{name}.stem"), 3, width, 7, 2, 3, 1.0, rng);
        let mut blocks = Vec::new();
        let mut cin = width;
        for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
            let cout = width * mult;
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(ps, &format!("{name}.s{stage}b{b}"), cin, cout, stride, rng));
                cin = cout;
            }
        }
        let head = [
            Conv2d::new(ps, &format!("{name}.head0"), cin, head_channels[0], 1, 1, 0, 1.0, rng),
            Conv2d::same(ps, &format!("{name}.head1"), head_channels[0], head_channels[1], 3, rng),
            Conv2d::new(ps, &format!("{name}.head2"), head_channels[1], head_channels[2], 3, 1, 1, 0.5, rng),
        ];
        Ok(Self { stem, blocks, head })
    }

    /// `(1, H, W, 3)` image to `(1, H, W, F_map)`.
    pub fn forward<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<Var<'g>> {
        let s = image.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Shape(format!("encoder expects (N, H, W, 3), got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h < MIN_ENCODER_INPUT || w < MIN_ENCODER_INPUT {
            return Err(Error::Shape(format!(
                "encoder input {h}x{w} is below the {MIN_ENCODER_INPUT}x{MIN_ENCODER_INPUT} minimum"
            )));
        }
        let mut x = self.stem.forward(p, image).relu().max_pool2d(3, 2, 1);
        for b in &self.blocks {
            x = b.forward(p, x);
        }
        // The pointwise conv commutes with bilinear resizing (both linear, the
        // resize weights sum to one), so it runs before upsampling to keep the
        // full-resolution tensor narrow.
        let x = self.head[0].forward(p, x).resize_bilinear(h, w).relu();
        let x = self.head[1].forward(p, x).relu();
        Ok(self.head[2].forward(p, x))
    }
}

/// Map decoders to image and labels, and the image encoder.
#[derive(Clone, Debug)]
pub struct Codecs {
    pub params: ParamSet,
    image_dec: [Conv2d; 2],
    label_dec: [Conv2d; 3],
    pub encoder: MapEncoder,
}

impl Codecs {
    pub const ENCODER_HEAD: [usize; 2] = [10, 10];

    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let image_dec = [
            Conv2d::new(&mut ps, "image_dec0", cfg.f_map, 5, 1, 1, 0, 1.0, &mut rng),
            Conv2d::new(&mut ps, "image_dec1", 5, 3, 1, 1, 0, 1.0, &mut rng),
        ];
        let label_dec = [
            Conv2d::same(&mut ps, "label_dec0", cfg.f_map, 5, 5, &mut rng),
            Conv2d::same(&mut ps, "label_dec1", 5, 5, 5, &mut rng),
            Conv2d::new(&mut ps, "label_dec2", 5, 2, 1, 1, 0, 1.0, &mut rng),
        ];
        let [a, b] = Self::ENCODER_HEAD;
        let encoder = MapEncoder::new(&mut ps, "encoder", cfg.encoder_width, [a, b, cfg.f_map], cfg.f_map, &mut rng)?;
        Ok(Self {
            params: ps,
            image_dec,
            label_dec,
            encoder,
        })
    }

    /// `(N, H, W, F)` maps to `(N, H, W, 3)` images.
    pub fn decode_image<'g>(&self, p: &Bound<'g>, maps: Var<'g>) -> Var<'g> {
        let x = self.image_dec[0].forward(p, maps).relu();
        self.image_dec[1].forward(p, x)
    }

    /// `(N, H, W, F)` maps to `(N, H, W, 2)` label scores (walkable, obstacle).
    pub fn decode_labels<'g>(&self, p: &Bound<'g>, maps: Var<'g>) -> Var<'g> {
        let x = self.label_dec[0].forward(p, maps).relu();
        let x = self.label_dec[1].forward(p, x).relu();
        self.label_dec[2].forward(p, x)
    }

    pub fn encode_image<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<Var<'g>> {
        self.encoder.forward(p, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    fn codecs() -> Codecs {
        Codecs::new(&ModelConfig::default(), 3).unwrap()
    }

    #[test]
    fn decoder_shapes() {
        let c = codecs();
        let g = Graph::new();
        let p = c.params.bind(&g, false);
        let m = g.constant(Tensor::full(&[1, 10, 10, 2], 0.2));
        assert_eq!(c.decode_image(&p, m).shape(), vec![1, 10, 10, 3]);
        assert_eq!(c.decode_labels(&p, m).shape(), vec![1, 10, 10, 2]);
    }

    #[test]
    fn zero_params_zero_outputs() {
        let mut c = codecs();
        c.params.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let g = Graph::new();
        let p = c.params.bind(&g, false);
        let m = g.constant(Tensor::zeros(&[1, 10, 10, 2]));
        assert!(c.decode_image(&p, m).value().data().iter().all(|&v| v == 0.0));
        assert!(c.decode_labels(&p, m).value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_decoder_is_pixelwise() {
        let c = codecs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 10, 10, 2], 1.0, &mut rng);
        // reverse the 100 pixel positions
        let rev = |t: &Tensor| {
            let ch = t.shape()[3];
            let d = (0..100).rev().flat_map(|i| t.data()[i * ch..(i + 1) * ch].to_vec()).collect();
            Tensor::from_vec(t.shape(), d).unwrap()
        };
        let g = Graph::new();
        let p = c.params.bind(&g, false);
        let a = c.decode_image(&p, g.constant(x.clone())).value();
        let b = c.decode_image(&p, g.constant(rev(&x))).value();
        assert_eq!(rev(&a), *b);
    }

    #[test]
    fn label_decoder_translation_covariance() {
        let c = codecs();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 24, 24, 2], 1.0, &mut rng);
        // shift right by 3 columns
        let mut shifted = Tensor::zeros(&[1, 24, 24, 2]);
        for y in 0..24 {
            for xx in 3..24 {
                for ch in 0..2 {
                    shifted.data_mut()[(y * 24 + xx) * 2 + ch] = x.data()[(y * 24 + xx - 3) * 2 + ch];
                }
            }
        }
        let g = Graph::new();
        let p = c.params.bind(&g, false);
        let a = c.decode_labels(&p, g.constant(x)).value();
        let b = c.decode_labels(&p, g.constant(shifted)).value();
        // receptive radius is 4; stay 4 away from every border of both
        for y in 4..20 {
            for xx in 7..20 {
                for ch in 0..2 {
                    let va = a.data()[(y * 24 + xx - 3) * 2 + ch];
                    let vb = b.data()[(y * 24 + xx) * 2 + ch];
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoder_shape_and_minimum() {
        let c = codecs();
        let g = Graph::new();
        let p = c.params.bind(&g, false);
        let img = g.constant(Tensor::full(&[1, 64, 48, 3], 0.5));
        assert_eq!(c.encode_image(&p, img).unwrap().shape(), vec![1, 64, 48, 2]);
        let small = g.constant(Tensor::full(&[1, 31, 64, 3], 0.5));
        assert!(c.encode_image(&p, small).is_err());
    }

    #[test]
    fn encoder_head_must_match_f_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        assert!(MapEncoder::new(&mut ps, "e", 4, [10, 10, 2], 3, &mut rng).is_err());
    }
}
