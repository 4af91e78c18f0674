//! Constant-acceleration Kalman baseline with per-trajectory EM.
//!
//! State per axis is `(position, velocity, acceleration)`; both axes share
//! one 6-dimensional linear-Gaussian model. EM re-estimates the process
//! covariance `Q`, observation covariance `R` and initial covariance `P0`; the
//! initial mean is the first observation at rest.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};

type M6 = SMatrix<f64, 6, 6>;
type V6 = SVector<f64, 6>;
type M2 = SMatrix<f64, 2, 2>;
type V2 = SVector<f64, 2>;
type H26 = SMatrix<f64, 2, 6>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanConfig {
    pub em_iterations: usize,
    /// Stop early once the log-likelihood improves by less than this.
    pub tolerance: f64,
    /// Added to the diagonals of the covariance estimates.
    pub floor: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            em_iterations: 5,
            tolerance: 1e-6,
            floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanPrediction {
    pub positions: Vec<[f64; 2]>,
    /// Set when EM produced non-finite values and constant-velocity
    /// extrapolation was used instead.
    pub fallback: bool,
}

fn transition() -> M6 {
    let mut f = M6::zeros();
    for a in 0..2 {
        let o = 3 * a;
        f[(o, o)] = 1.0;
        f[(o, o + 1)] = 1.0;
        f[(o, o + 2)] = 0.5;
        f[(o + 1, o + 1)] = 1.0;
        f[(o + 1, o + 2)] = 1.0;
        f[(o + 2, o + 2)] = 1.0;
    }
    f
}

fn observation() -> H26 {
    let mut h = H26::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 3)] = 1.0;
    h
}

#[derive(Clone, Debug)]
struct Params {
    q: M6,
    r: M2,
    mu0: V6,
    p0: M6,
}

struct Smoothed {
    xs: Vec<V6>,
    ps: Vec<M6>,
    /// `lag[t] = Cov(x_t, x_{t-1} | all)`, unused at `t = 0`.
    lag: Vec<M6>,
    filtered_last: (V6, M6),
    loglik: f64,
}

fn symmetrize<const D: usize>(m: SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

fn smooth(p: &Params, ys: &[V2]) -> Option<Smoothed> {
    let (f, h) = (transition(), observation());
    let n = ys.len();
    let mut xp = Vec::with_capacity(n);
    let mut pp = Vec::with_capacity(n);
    let mut xf: Vec<V6> = Vec::with_capacity(n);
    let mut pf: Vec<M6> = Vec::with_capacity(n);
    let mut loglik = 0.0;
    let (mut x, mut cov) = (p.mu0, p.p0);
    for (t, y) in ys.iter().enumerate() {
        if t > 0 {
            x = f * xf[t - 1];
            cov = symmetrize(f * pf[t - 1] * f.transpose() + p.q);
        }
        xp.push(x);
        pp.push(cov);
        let s = symmetrize(h * cov * h.transpose() + p.r);
        let s_inv = s.try_inverse()?;
        let k = cov * h.transpose() * s_inv;
        let e = y - h * x;
        loglik -= 0.5 * (s.determinant().ln() + (e.transpose() * s_inv * e)[(0, 0)] + 2.0 * (2.0 * std::f64::consts::PI).ln());
        let ikh = M6::identity() - k * h;
        xf.push(x + k * e);
        pf.push(symmetrize(ikh * cov * ikh.transpose() + k * p.r * k.transpose()));
    }
    let mut xs = xf.clone();
    let mut ps = pf.clone();
    let mut lag = vec![M6::zeros(); n];
    for t in (0..n.saturating_sub(1)).rev() {
        let j = pf[t] * f.transpose() * pp[t + 1].try_inverse()?;
        xs[t] = xf[t] + j * (xs[t + 1] - xp[t + 1]);
        ps[t] = symmetrize(pf[t] + j * (ps[t + 1] - pp[t + 1]) * j.transpose());
        lag[t + 1] = ps[t + 1] * j.transpose();
    }
    let ok = loglik.is_finite() && xs.iter().all(|v| v.iter().all(|x| x.is_finite()));
    ok.then(|| Smoothed {
        filtered_last: (xf[n - 1], pf[n - 1]),
        xs,
        ps,
        lag,
        loglik,
    })
}

fn m_step(p: &Params, ys: &[V2], s: &Smoothed, floor: f64) -> Params {
    let (f, h) = (transition(), observation());
    let n = ys.len();
    let mut s11 = M6::zeros();
    let mut s10 = M6::zeros();
    let mut s00 = M6::zeros();
    for t in 1..n {
        s11 += s.xs[t] * s.xs[t].transpose() + s.ps[t];
        s10 += s.xs[t] * s.xs[t - 1].transpose() + s.lag[t];
        s00 += s.xs[t - 1] * s.xs[t - 1].transpose() + s.ps[t - 1];
    }
    let q = (s11 - f * s10.transpose() - s10 * f.transpose() + f * s00 * f.transpose()) / (n - 1) as f64;
    let mut r = M2::zeros();
    for (t, y) in ys.iter().enumerate() {
        let e = y - h * s.xs[t];
        r += e * e.transpose() + h * s.ps[t] * h.transpose();
    }
    r /= n as f64;
    let d0 = s.xs[0] - p.mu0;
    let p0 = s.ps[0] + d0 * d0.transpose();
    Params {
        q: symmetrize(q) + M6::identity() * floor,
        r: symmetrize(r) + M2::identity() * floor,
        mu0: p.mu0,
        p0: symmetrize(p0) + M6::identity() * floor,
    }
}

fn constant_velocity(observed: &[[f64; 2]], steps: usize) -> Vec<[f64; 2]> {
    let n = observed.len();
    let last = observed[n - 1];
    let v = if n >= 2 {
        [last[0] - observed[n - 2][0], last[1] - observed[n - 2][1]]
    } else {
        [0.0, 0.0]
    };
    (1..=steps)
        .map(|k| [last[0] + k as f64 * v[0], last[1] + k as f64 * v[1]])
        .collect()
}

fn fit_and_predict(observed: &[[f64; 2]], steps: usize, cfg: &KalmanConfig) -> Option<Vec<[f64; 2]>> {
    let ys: Vec<V2> = observed.iter().map(|p| V2::new(p[0], p[1])).collect();
    let mut mu0 = V6::zeros();
    mu0[0] = observed[0][0];
    mu0[3] = observed[0][1];
    let mut params = Params {
        q: M6::identity() * 1e-4,
        r: M2::identity() * 1e-2,
        mu0,
        p0: M6::from_diagonal(&V6::new(1.0, 1e4, 1e4, 1.0, 1e4, 1e4)),
    };
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..cfg.em_iterations {
        let s = smooth(&params, &ys)?;
        if (s.loglik - prev_ll).abs() < cfg.tolerance {
            break;
        }
        prev_ll = s.loglik;
        params = m_step(&params, &ys, &s, cfg.floor);
    }
    let s = smooth(&params, &ys)?;
    let (f, h) = (transition(), observation());
    let mut x = s.filtered_last.0;
    let out: Vec<[f64; 2]> = (0..steps)
        .map(|_| {
            x = f * x;
            let y = h * x;
            [y[0], y[1]]
        })
        .collect();
    out.iter().flatten().all(|v| v.is_finite()).then_some(out)
}

/// Fits the model to `observed` (at least 3 positions) and rolls it out
/// `steps` frames.
pub fn kalman_predict(observed: &[[f64; 2]], steps: usize, cfg: &KalmanConfig) -> Result<KalmanPrediction> {
    if observed.len() < 3 {
        return Err(Error::Validation(format!(
            "Kalman baseline needs at least 3 observations, got {}",
            observed.len()
        )));
    }
    if observed.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("observations must be finite".into()));
    }
    Ok(match fit_and_predict(observed, steps, cfg) {
        Some(positions) => KalmanPrediction {
            positions,
            fallback: false,
        },
        None => KalmanPrediction {
            positions: constant_velocity(observed, steps),
            fallback: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_err(pred: &[[f64; 2]], truth: impl Fn(f64) -> [f64; 2], offset: usize) -> f64 {
        pred.iter()
            .enumerate()
            .map(|(k, p)| {
                let t = truth((offset + k) as f64);
                (p[0] - t[0]).abs().max((p[1] - t[1]).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_velocity_line() {
        let obs: Vec<[f64; 2]> = (0..10).map(|t| [t as f64, 0.0]).collect();
        let p = kalman_predict(&obs, 8, &KalmanConfig::default()).unwrap();
        assert!(!p.fallback);
        let e = max_err(&p.positions, |t| [t, 0.0], 10);
        assert!(e < 1e-3, "max error {e}");
    }

    #[test]
    fn constant_acceleration() {
        let obs: Vec<[f64; 2]> = (0..10).map(|t| [0.5 * (t * t) as f64, 3.0 - t as f64]).collect();
        let p = kalman_predict(&obs, 8, &KalmanConfig::default()).unwrap();
        let e = max_err(&p.positions, |t| [0.5 * t * t, 3.0 - t], 10);
        assert!(e < 1e-2, "max error {e}");
    }

    #[test]
    fn stationary() {
        let obs = vec![[120.0, 45.5]; 10];
        let p = kalman_predict(&obs, 8, &KalmanConfig::default()).unwrap();
        let e = max_err(&p.positions, |_| [120.0, 45.5], 0);
        assert!(e < 1e-3, "max error {e}");
    }

    #[test]
    fn rejects_short_input() {
        assert!(kalman_predict(&[[0.0, 0.0], [1.0, 1.0]], 8, &KalmanConfig::default()).is_err());
    }

    #[test]
    fn fallback_is_constant_velocity() {
        let p = constant_velocity(&[[0.0, 0.0], [1.0, 2.0], [2.0, 4.0]], 2);
        assert_eq!(p, vec![[3.0, 6.0], [4.0, 8.0]]);
    }
}
