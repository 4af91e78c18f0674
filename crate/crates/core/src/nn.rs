//! Layer building blocks: parameters live in a [`ParamSet`], layers keep ids.

use rand::Rng;

use crate::autodiff::Var;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs.max(1) as f64).sqrt();
        Self {
            w: ps.add(format!("{name}.w"), Tensor::randn(&[inputs, outputs], std, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[outputs])),
            inputs,
            outputs,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(p[self.w]).add_row(p[self.b])
    }
}

/// Linear layers with ReLU between them (not after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, mut x: Var<'g>) -> Var<'g> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x);
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        x
    }
}

/// Channels-last convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (kernel * kernel * in_channels) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        Self {
            w: ps.add(
                format!("{name}.w"),
                Tensor::randn(&[kernel, kernel, in_channels, out_channels], std, rng),
            ),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[out_channels])),
            stride,
            pad,
            out_channels,
        }
    }

    /// Kernel size `k` with "same" zero padding, stride 1.
    pub fn same<R: Rng>(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self::new(ps, name, cin, cout, k, 1, k / 2, 1.0, rng)
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(p[self.w], self.stride, self.pad).add_channel_bias(p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let std = (1.0 / hidden as f64).sqrt();
        Self {
            w_ih: ps.add(format!("{name}.w_ih"), Tensor::randn(&[inputs, 4 * hidden], std, rng)),
            w_hh: ps.add(format!("{name}.w_hh"), Tensor::randn(&[hidden, 4 * hidden], std, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// One step; returns the new `(h, c)`.
    pub fn step<'g>(&self, p: &Bound<'g>, x: Var<'g>, h: Var<'g>, c: Var<'g>) -> (Var<'g>, Var<'g>) {
        let gates = x
            .matmul(p[self.w_ih])
            .add(h.matmul(p[self.w_hh]))
            .add_row(p[self.b]);
        let hc = Var::lstm_cell(gates, c);
        (hc.slice_cols(0..self.hidden), hc.slice_cols(self.hidden..2 * self.hidden))
    }
}
