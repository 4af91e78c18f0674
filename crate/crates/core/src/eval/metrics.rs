use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(pred: &Tensor, truth: &Tensor) -> Result<(usize, usize)> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            truth.shape()
        )));
    }
    let s = pred.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::Shape(format!("trajectories must be (N, P, 2), got {s:?}")));
    }
    if s[0] == 0 || s[1] == 0 {
        return Err(Error::Empty("no trajectories to score".into()));
    }
    Ok((s[0], s[1]))
}

fn norms<'a>(pred: &'a Tensor, truth: &'a Tensor) -> impl Iterator<Item = f64> + 'a {
    pred.data()
        .chunks_exact(2)
        .zip(truth.data().chunks_exact(2))
        .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
}

/// Mean Euclidean error over all `N * P` positions of `(N, P, 2)` tensors.
pub fn ade(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let (n, p) = check(pred, truth)?;
    Ok(norms(pred, truth).sum::<f64>() / (n * p) as f64)
}

/// Mean Euclidean error at the last step.
pub fn fde(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let (n, p) = check(pred, truth)?;
    Ok(norms(pred, truth).skip(p - 1).step_by(p).sum::<f64>() / n as f64)
}

/// Per-sample displacement sums and final errors, for pooling across batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSums {
    pub displacement: f64,
    pub final_displacement: f64,
    pub positions: usize,
    pub samples: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: &Tensor, truth: &Tensor) -> Result<()> {
        let (n, p) = check(pred, truth)?;
        self.displacement += norms(pred, truth).sum::<f64>();
        self.final_displacement += norms(pred, truth).skip(p - 1).step_by(p).sum::<f64>();
        self.positions += n * p;
        self.samples += n;
        Ok(())
    }

    pub fn merge(&mut self, other: &ErrorSums) {
        self.displacement += other.displacement;
        self.final_displacement += other.final_displacement;
        self.positions += other.positions;
        self.samples += other.samples;
    }

    pub fn ade(&self) -> f64 {
        self.displacement / self.positions.max(1) as f64
    }

    pub fn fde(&self) -> f64 {
        self.final_displacement / self.samples.max(1) as f64
    }
}
