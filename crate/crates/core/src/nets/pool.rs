use std::ops::Range;

use rand::Rng;

use crate::autodiff::Var;
use crate::nn::{Linear, Mlp};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Social pooling over co-temporal agents.
///
/// For agent `i`, every other agent `j` of its group contributes
/// `relu(mlp([embed(x_j - x_i), h_j]))`; the elementwise max over `j` is
/// projected back to `d_h`. An agent alone in its group pools the empty set,
/// which reads as zeros.
#[derive(Clone, Debug)]
pub struct SocialPool {
    rel: Linear,
    mlp: Mlp,
    out: Linear,
    pool_dim: usize,
}

impl SocialPool {
    pub const REL_DIM: usize = 16;
    pub const HIDDEN: usize = 64;

    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_h: usize, rng: &mut R) -> Self {
        Self {
            rel: Linear::new(ps, &format!("{name}.rel"), 2, Self::REL_DIM, rng),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), &[Self::REL_DIM + d_h, Self::HIDDEN, d_h], rng),
            out: Linear::new(ps, &format!("{name}.out"), d_h, d_h, rng),
            pool_dim: d_h,
        }
    }

    /// `states: (N, d_h)`, `positions: (N, 2)`.
    pub fn forward<'g>(&self, p: &Bound<'g>, states: Var<'g>, positions: &Tensor, groups: &[Range<usize>]) -> Var<'g> {
        let n = states.shape()[0];
        let graph = states.graph();
        let mut others = Vec::new();
        let mut rel = Vec::new();
        let mut segments = vec![0..0; n];
        let pos = positions.data();
        for g in groups {
            for i in g.clone() {
                let start = others.len();
                for j in g.clone().filter(|&j| j != i) {
                    others.push(j);
                    rel.push(pos[2 * j] - pos[2 * i]);
                    rel.push(pos[2 * j + 1] - pos[2 * i + 1]);
                }
                segments[i] = start..others.len();
            }
        }
        let pooled = if others.is_empty() {
            graph.constant(Tensor::zeros(&[n, self.pool_dim]))
        } else {
            let rel = graph.constant(Tensor::from_vec(&[others.len(), 2], rel).expect("rel"));
            let input = Var::concat_cols(&[self.rel.forward(p, rel), states.gather_rows(&others)]);
            self.mlp.forward(p, input).relu().segment_max(&segments)
        };
        self.out.forward(p, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamSet, SocialPool) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let pool = SocialPool::new(&mut ps, "pool", 32, &mut rng);
        (ps, pool)
    }

    #[test]
    fn lone_agent_gets_position_independent_default() {
        let (ps, pool) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::new();
        let p = ps.bind(&g, false);
        let h = g.constant(Tensor::randn(&[1, 32], 1.0, &mut rng));
        let a = pool.forward(&p, h, &Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap(), &[0..1]).value();
        let b = pool.forward(&p, h, &Tensor::from_vec(&[1, 2], vec![-40.0, 9.0]).unwrap(), &[0..1]).value();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 32]);
    }

    #[test]
    fn permutation_equivariance() {
        let (ps, pool) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::randn(&[4, 32], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 2], 5.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let permute = |t: &Tensor| {
            let c = t.shape()[1];
            let d = perm.iter().flat_map(|&i| t.data()[i * c..(i + 1) * c].to_vec()).collect();
            Tensor::from_vec(t.shape(), d).unwrap()
        };
        let g = Graph::new();
        let p = ps.bind(&g, false);
        let out = pool.forward(&p, g.constant(h.clone()), &x, &[0..4]).value();
        let out_p = pool.forward(&p, g.constant(permute(&h)), &permute(&x), &[0..4]).value();
        assert_eq!(permute(&out), *out_p);
        assert_eq!(out.shape(), &[4, 32]);
    }
}
