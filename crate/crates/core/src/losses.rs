//! Generator and discriminator objectives.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub image: f64,
    pub labels: f64,
    pub sparsity: f64,
    pub score: f64,
    pub traj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 0.05,
            labels: 0.05,
            sparsity: 0.5,
            score: 1.0,
            traj: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.image, self.labels, self.sparsity, self.score, self.traj];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Horizontal and vertical finite-difference stencils scaled by `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityKernels {
    pub epsilon: f64,
}

impl Default for SparsityKernels {
    fn default() -> Self {
        Self { epsilon: 1.0 }
    }
}

impl SparsityKernels {
    pub fn kernels(&self) -> [[[f64; 3]; 3]; 2] {
        let e = self.epsilon;
        [
            [[0.0, 0.0, 0.0], [e, -e, 0.0], [0.0, 0.0, 0.0]],
            [[0.0, e, 0.0], [0.0, -e, 0.0], [0.0, 0.0, 0.0]],
        ]
    }
}

/// The five generator terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub image: f64,
    pub labels: f64,
    pub sparsity: f64,
    pub score: f64,
    pub traj: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(image: f64, labels: f64, sparsity: f64, score: f64, traj: f64, w: &LossWeights) -> Self {
        let mut b = Self {
            image,
            labels,
            sparsity,
            score,
            traj,
            total: 0.0,
        };
        b.total = generator_total(&b, w);
        b
    }

    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("image", self.image),
            ("labels", self.labels),
            ("sparsity", self.sparsity),
            ("score", self.score),
            ("traj", self.traj),
        ]
    }
}

pub fn generator_total(c: &LossBundle, w: &LossWeights) -> f64 {
    w.image * c.image + w.labels * c.labels + w.sparsity * c.sparsity + w.score * c.score + w.traj * c.traj
}

fn same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Sum over agents and steps of squared Euclidean error.
pub fn traj_loss<'g>(pred: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    same_shape("traj_loss", &pred.shape(), target.shape())?;
    Ok(pred.sub_const(target).square().sum())
}

/// `mse(decoded, image) + mse(map, encoded)`.
///
/// `decoded` is the image decoded from `map`; `encoded` is the map-shaped
/// encoding of `image`.
pub fn image_explanation_loss<'g>(map: Var<'g>, image: &Tensor, decoded: Var<'g>, encoded: Var<'g>) -> Result<Var<'g>> {
    same_shape("image_explanation_loss (image)", &decoded.shape(), image.shape())?;
    same_shape("image_explanation_loss (map)", &map.shape(), &encoded.shape())?;
    let (ms, is) = (map.shape(), image.shape());
    if ms[..ms.len() - 1] != is[..is.len() - 1] {
        return Err(Error::Shape(format!("map {ms:?} and image {is:?} differ spatially")));
    }
    Ok(decoded.sub_const(image).square().mean().add(map.sub(encoded).square().mean()))
}

/// `sum (L - B * S)^2`, divided by the number of labeled entries when
/// `normalize` (at least one, so an unlabeled target scores 0).
pub fn label_loss<'g>(scores: Var<'g>, labels: &Tensor, bitmask: &Tensor, normalize: bool) -> Result<Var<'g>> {
    same_shape("label_loss", &scores.shape(), labels.shape())?;
    same_shape("label_loss bitmask", labels.shape(), bitmask.shape())?;
    let sum = scores.mul_const(bitmask).sub_const(labels).square().sum();
    if normalize {
        let count = bitmask.data().iter().filter(|&&b| b != 0.0).count().max(1);
        Ok(sum.scale(1.0 / count as f64))
    } else {
        Ok(sum)
    }
}

/// L1 norm of both stencil responses over `(N, H, W, F)` or `(H, W, F)`.
pub fn sparsity_loss<'g>(map: Var<'g>, kernels: &SparsityKernels) -> Var<'g> {
    let s = map.shape();
    let x = if s.len() == 3 { map.reshape(&[1, s[0], s[1], s[2]]) } else { map };
    x.stencil_l1(&kernels.kernels())
}

/// `mean softplus(-z)`: cross-entropy of generated logits against "real".
pub fn g_adversarial_loss<'g>(fake_logits: Var<'g>) -> Var<'g> {
    fake_logits.neg().softplus().mean()
}

/// Mean of the real-vs-1 and fake-vs-0 cross-entropies.
pub fn d_loss<'g>(real_logits: Var<'g>, fake_logits: Var<'g>) -> Var<'g> {
    real_logits.neg().softplus().mean().add(fake_logits.softplus().mean()).scale(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::assert_grads;
    use crate::autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn traj_hand_case_and_homogeneity() {
        let g = Graph::new();
        let y = t(&[1, 4], &[0.0, 0.0, 2.0, 0.0]);
        let p = g.leaf(t(&[1, 4], &[0.0, 1.0, 2.0, 2.0]));
        assert_eq!(traj_loss(p, &y).unwrap().value().item(), 5.0);
        assert_eq!(traj_loss(g.leaf(y.clone()), &y).unwrap().value().item(), 0.0);
        let p3 = g.leaf(t(&[1, 4], &[0.0, 3.0, 2.0, 6.0]));
        assert_eq!(traj_loss(p3, &y).unwrap().value().item(), 45.0);
        assert!(traj_loss(g.leaf(Tensor::zeros(&[2, 4])), &y).is_err());
    }

    #[test]
    fn image_explanation_cases() {
        let g = Graph::new();
        let img = Tensor::full(&[1, 4, 4, 3], 0.5);
        let map = g.leaf(Tensor::full(&[1, 4, 4, 2], 0.3));
        let exact = image_explanation_loss(map, &img, g.constant(img.clone()), map).unwrap();
        assert_eq!(exact.value().item(), 0.0);
        let off = g.constant(Tensor::full(&[1, 4, 4, 3], 0.6));
        let v = image_explanation_loss(map, &img, off, map).unwrap().value().item();
        assert!((v - 0.01).abs() < 1e-12);
        // operands swapped
        let map_t = Tensor::full(&[1, 4, 4, 2], 0.3);
        assert!(image_explanation_loss(g.constant(img.clone()), &map_t, off, map).is_err());
    }

    #[test]
    fn label_cases() {
        let g = Graph::new();
        let zero = Tensor::zeros(&[1, 3, 3, 2]);
        let s = g.leaf(Tensor::full(&[1, 3, 3, 2], 7.0));
        assert_eq!(label_loss(s, &zero, &zero, true).unwrap().value().item(), 0.0);
        let mut l = zero.clone();
        l.data_mut()[4] = 1.0;
        let b = l.map(|v| (v != 0.0) as u8 as f64);
        let mut sv = zero.clone();
        sv.data_mut()[4] = 1.0;
        assert_eq!(label_loss(g.leaf(sv), &l, &b, true).unwrap().value().item(), 0.0);
        assert_eq!(label_loss(g.leaf(zero.clone()), &l, &b, true).unwrap().value().item(), 1.0);
    }

    #[test]
    fn label_loss_ignores_unmasked_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = Tensor::randn(&[1, 5, 5, 2], 1.0, &mut rng).map(|v| v.signum() * (v.abs() > 0.7) as u8 as f64);
        let b = l.map(|v| (v != 0.0) as u8 as f64);
        let s = Tensor::randn(&[1, 5, 5, 2], 1.0, &mut rng);
        let s2 = s.zip_map(&b, |v, m| if m == 0.0 { v * 100.0 - 3.0 } else { v });
        let g = Graph::new();
        let a = label_loss(g.leaf(s), &l, &b, true).unwrap().value().item();
        let c = label_loss(g.leaf(s2), &l, &b, true).unwrap().value().item();
        assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn sparsity_cases() {
        let g = Graph::new();
        let k = SparsityKernels::default();
        let m = g.leaf(t(&[1, 2, 1], &[0.0, 1.0]));
        assert_eq!(sparsity_loss(m, &k).value().item(), 1.0);
        let k2 = SparsityKernels { epsilon: 2.0 };
        assert_eq!(sparsity_loss(m, &k2).value().item(), 2.0);
        let c = g.leaf(Tensor::full(&[3, 4, 2], 0.7));
        assert_eq!(sparsity_loss(c, &k).value().item(), 0.0);
        for kern in k.kernels() {
            assert_eq!(kern.iter().flatten().sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn sparsity_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::randn(&[6, 5, 2], 1.0, &mut rng);
        let g = Graph::new();
        let k = SparsityKernels::default();
        let a = sparsity_loss(g.leaf(m.clone()), &k).value().item();
        let b = sparsity_loss(g.leaf(m.map(|v| v + 3.25)), &k).value().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn adversarial_values() {
        let g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[3, 1]));
        assert!((g_adversarial_loss(z).value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        let real = g.leaf(Tensor::full(&[2, 1], 50.0));
        let fake = g.leaf(Tensor::full(&[2, 1], -50.0));
        assert!(d_loss(real, fake).value().item() < 1e-20);
        let r = g.leaf(Tensor::full(&[1, 1], 1.3));
        let f = g.leaf(Tensor::full(&[1, 1], -1.3));
        let real_term = r.neg().softplus().mean().value().item();
        let fake_term = f.softplus().mean().value().item();
        assert_eq!(real_term, fake_term);
    }

    #[test]
    fn total_hand_case() {
        let w = LossWeights::default();
        let b = LossBundle::new(2.0, 4.0, 1.0, 0.3, 10.0, &w);
        assert!((b.total - 2.1).abs() < 1e-12);
        assert_eq!(LossBundle::new(0.0, 0.0, 0.0, 0.0, 0.0, &w).total, 0.0);
        let zero = LossWeights { image: 0.0, labels: 0.0, sparsity: 0.0, score: 0.0, traj: 0.0 };
        assert_eq!(LossBundle::new(2.0, 4.0, 1.0, 0.3, 10.0, &zero).total, 0.0);
        assert!(LossWeights { traj: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = Tensor::randn(&[2, 4], 1.0, &mut rng);
        assert_grads(&[Tensor::randn(&[2, 4], 1.0, &mut rng)], |_, v| traj_loss(v[0], &y).unwrap());
        let img = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng);
        assert_grads(
            &[
                Tensor::randn(&[1, 3, 3, 2], 1.0, &mut rng),
                Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng),
                Tensor::randn(&[1, 3, 3, 2], 1.0, &mut rng),
            ],
            |_, v| image_explanation_loss(v[0], &img, v[1], v[2]).unwrap(),
        );
        let l = Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng).map(|v| v.signum() * (v.abs() > 0.5) as u8 as f64);
        let b = l.map(|v| (v != 0.0) as u8 as f64);
        assert_grads(&[Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng)], |_, v| {
            label_loss(v[0], &l, &b, true).unwrap()
        });
        assert_grads(&[Tensor::randn(&[1, 5, 4, 2], 1.0, &mut rng)], |_, v| {
            sparsity_loss(v[0], &SparsityKernels::default())
        });
        assert_grads(&[Tensor::randn(&[3, 1], 2.0, &mut rng)], |_, v| g_adversarial_loss(v[0]));
        assert_grads(
            &[Tensor::randn(&[3, 1], 2.0, &mut rng), Tensor::randn(&[3, 1], 2.0, &mut rng)],
            |_, v| d_loss(v[0], v[1]),
        );
    }
}
