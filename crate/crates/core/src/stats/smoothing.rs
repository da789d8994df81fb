//! Temporal smoothing operators: identity, reflect-padded triangular
//! convolution, and the natural cubic smoothing spline (Reinsch form).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothingOperator {
    None,
    /// Symmetric triangular kernel of odd `width`.
    Triangular { width: usize },
    /// Penalty weight `lambda` in sample-index units; `None` picks the value
    /// whose effective degrees of freedom are `T/10` for each segment.
    Spline { lambda: Option<f64> },
}

impl SmoothingOperator {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SmoothingOperator::Triangular { width } if width == 0 || width % 2 == 0 => {
                Err(Error::Config(format!("triangular width must be odd and >= 1, got {width}")))
            }
            SmoothingOperator::Spline { lambda: Some(l) } if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::Config(format!("spline lambda must be finite and >= 0, got {l}")))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self {
            SmoothingOperator::None => "none".into(),
            SmoothingOperator::Triangular { width } => format!("triangular_k{width}"),
            SmoothingOperator::Spline { lambda: None } => "spline".into(),
            SmoothingOperator::Spline { lambda: Some(l) } => format!("spline_l{l}"),
        }
    }
}

impl fmt::Display for SmoothingOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn triangular_kernel(width: usize) -> Vec<f64> {
    let half = (width / 2) as isize;
    let raw: Vec<f64> = (-half..=half).map(|j| (half + 1 - j.abs()) as f64).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

pub fn triangular_smooth(y: &[f64], width: usize) -> Vec<f64> {
    let k = triangular_kernel(width);
    let half = (width / 2) as isize;
    (0..y.len())
        .map(|t| {
            k.iter()
                .enumerate()
                .map(|(j, w)| w * y[reflect(t as isize + j as isize - half, y.len())])
                .sum()
        })
        .collect()
}

/// Symmetric positive-definite pentadiagonal system solved by banded
/// `L D L^T` factorization. Stores the diagonal and first two
/// super-diagonals.
struct Penta {
    d: Vec<f64>,
    e: Vec<f64>,
    f: Vec<f64>,
}

impl Penta {
    /// `R + lambda * Q^T Q` for unit spacing; size `n - 2`.
    fn reinsch(n: usize, lambda: f64) -> Self {
        let m = n - 2;
        let d = vec![2.0 / 3.0 + 6.0 * lambda; m];
        let e = vec![1.0 / 6.0 - 4.0 * lambda; m.saturating_sub(1)];
        let f = vec![lambda; m.saturating_sub(2)];
        let mut p = Penta { d, e, f };
        p.factor();
        p
    }

    fn factor(&mut self) {
        // in place: d <- D, e <- L[i+1,i], f <- L[i+2,i]
        let m = self.d.len();
        for i in 0..m {
            if i >= 1 {
                let mut dii = self.d[i] - self.e[i - 1] * self.e[i - 1] * self.d[i - 1];
                if i >= 2 {
                    dii -= self.f[i - 2] * self.f[i - 2] * self.d[i - 2];
                }
                self.d[i] = dii;
            }
            if i + 1 < m {
                let mut v = self.e[i];
                if i >= 1 {
                    v -= self.f[i - 1] * self.e[i - 1] * self.d[i - 1];
                }
                self.e[i] = v / self.d[i];
            }
            if i + 2 < m {
                self.f[i] /= self.d[i];
            }
        }
    }

    fn solve(&self, b: &mut [f64]) {
        let m = self.d.len();
        for i in 0..m {
            if i >= 1 {
                b[i] -= self.e[i - 1] * b[i - 1];
            }
            if i >= 2 {
                b[i] -= self.f[i - 2] * b[i - 2];
            }
        }
        for i in 0..m {
            b[i] /= self.d[i];
        }
        for i in (0..m).rev() {
            if i + 1 < m {
                b[i] -= self.e[i] * b[i + 1];
            }
            if i + 2 < m {
                b[i] -= self.f[i] * b[i + 2];
            }
        }
    }
}

/// `Q^T v` for unit spacing: second differences.
fn qt(v: &[f64]) -> Vec<f64> {
    (1..v.len() - 1).map(|i| v[i - 1] - 2.0 * v[i] + v[i + 1]).collect()
}

/// Natural cubic smoothing spline at unit-spaced samples minimizing
/// `sum (y - f)^2 + lambda * integral f''^2`.
pub fn spline_smooth(y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("spline smoothing needs at least 4 samples, got {n}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("spline lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(y.to_vec());
    }
    let sys = Penta::reinsch(n, lambda);
    let mut gamma = qt(y);
    sys.solve(&mut gamma);
    // f = y - lambda * Q gamma, with gamma padded by zeros at both ends
    let mut f = y.to_vec();
    for (j, g) in gamma.iter().enumerate() {
        f[j] -= lambda * g;
        f[j + 1] += 2.0 * lambda * g;
        f[j + 2] -= lambda * g;
    }
    Ok(f)
}

/// Effective degrees of freedom `trace(I - lambda Q M^{-1} Q^T)`.
pub fn spline_edf(n: usize, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return n as f64;
    }
    let sys = Penta::reinsch(n, lambda);
    let m = n - 2;
    // trace(M^{-1} Q^T Q), column by column of the pentadiagonal Q^T Q
    let mut tr = 0.0;
    let mut col = vec![0.0; m];
    for j in 0..m {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 6.0;
        if j >= 1 {
            col[j - 1] = -4.0;
        }
        if j + 1 < m {
            col[j + 1] = -4.0;
        }
        if j >= 2 {
            col[j - 2] = 1.0;
        }
        if j + 2 < m {
            col[j + 2] = 1.0;
        }
        sys.solve(&mut col);
        tr += col[j];
    }
    n as f64 - lambda * tr
}

/// Lambda whose effective degrees of freedom match `target` (bisection on
/// `log10 lambda` in `[-8, 12]`; targets outside the reachable range clamp).
pub fn spline_lambda_for_edf(n: usize, target: f64) -> f64 {
    let (mut lo, mut hi) = (-8.0f64, 12.0f64);
    if spline_edf(n, 10f64.powf(hi)) >= target {
        return 10f64.powf(hi);
    }
    if spline_edf(n, 10f64.powf(lo)) <= target {
        return 10f64.powf(lo);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if spline_edf(n, 10f64.powf(mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    10f64.powf(0.5 * (lo + hi))
}

/// Default spline lambda for a segment of `n` samples: EDF = n/10.
pub fn default_spline_lambda(n: usize) -> f64 {
    spline_lambda_for_edf(n, n as f64 / 10.0)
}

/// Central differences scaled by the sample rate; one-sided at the ends.
pub fn derivative(y: &[f64], sample_rate_hz: f64) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|t| {
            let d = if n < 2 {
                0.0
            } else if t == 0 {
                y[1] - y[0]
            } else if t == n - 1 {
                y[n - 1] - y[n - 2]
            } else {
                0.5 * (y[t + 1] - y[t - 1])
            };
            d * sample_rate_hz
        })
        .collect()
}

/// Smoothed signal and its time derivative.
pub fn smooth(signal: &[f64], op: &SmoothingOperator, sample_rate_hz: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    op.validate()?;
    if signal.len() < 2 {
        return Err(Error::InsufficientData(format!("smoothing needs at least 2 samples, got {}", signal.len())));
    }
    let smoothed = match *op {
        SmoothingOperator::None => signal.to_vec(),
        SmoothingOperator::Triangular { width } => triangular_smooth(signal, width),
        SmoothingOperator::Spline { lambda } => {
            let l = lambda.unwrap_or_else(|| default_spline_lambda(signal.len()));
            spline_smooth(signal, l)?
        }
    };
    let d = derivative(&smoothed, sample_rate_hz);
    Ok((smoothed, d))
}
