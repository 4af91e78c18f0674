//! Adam for dense parameter sets, a lazily-updated Adam for maps, and
//! global-norm clipping.

use crate::autodiff::Window;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Adam over one `(H, W, F)` map where only selected cells step.
///
/// Moments and bias-correction counters are kept per cell, so untouched
/// cells keep their value bit-exactly.
#[derive(Clone, Debug)]
pub struct SparseAdam {
    pub cfg: AdamConfig,
    t: Vec<u32>,
    m: Tensor,
    v: Tensor,
}

impl SparseAdam {
    pub fn new(cfg: AdamConfig, shape: &[usize]) -> Self {
        Self {
            cfg,
            t: vec![0; shape[0] * shape[1]],
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }

    pub fn step(&mut self, value: &mut Tensor, grad: &Tensor, cells: &[bool]) {
        let f = value.shape()[2];
        let c = self.cfg;
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        let (p, g) = (value.data_mut(), grad.data());
        for (cell, _) in cells.iter().enumerate().filter(|(_, &on)| on) {
            self.t[cell] += 1;
            let t = self.t[cell] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            for i in cell * f..(cell + 1) * f {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                p[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Row-major `h x w` mask of cells covered by any in-bounds part of `windows`.
pub fn window_mask(h: usize, w: usize, windows: &[Window]) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for win in windows {
        let y0 = win.top.max(0) as usize;
        let x0 = win.left.max(0) as usize;
        let y1 = (win.top + win.height as i64).clamp(0, h as i64) as usize;
        let x1 = (win.left + win.width as i64).clamp(0, w as i64) as usize;
        for y in y0..y1 {
            mask[y * w + x0..y * w + x1].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Scales all gradients so their joint norm is at most `max_norm`.
/// Returns the pre-clipping norm and whether clipping happened.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> (f64, bool) {
    let norm = global_norm(grads.iter().map(|g| &**g));
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}
