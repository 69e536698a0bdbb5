//! Sample moments with delete-one jackknife standard errors.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// An estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    /// `|value - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = (self.value - target).abs();
        if self.stderr > 0.0 {
            diff / self.stderr
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        self.z_score(target) <= n_se
    }
}

/// Power sums `[M, Σx, Σx², Σx³, Σx⁴]`.
type Sums = [f64; 5];

fn sums(xs: &[f64]) -> Sums {
    let mut s = [0.0; 5];
    for &x in xs {
        let x2 = x * x;
        s[0] += 1.0;
        s[1] += x;
        s[2] += x2;
        s[3] += x2 * x;
        s[4] += x2 * x2;
    }
    s
}

/// Central moments `(mean, m2, m3, m4)` from power sums.
fn central(s: &Sums) -> (f64, f64, f64, f64) {
    let n = s[0];
    let mean = s[1] / n;
    let e2 = s[2] / n;
    let e3 = s[3] / n;
    let e4 = s[4] / n;
    let m2 = e2 - mean * mean;
    let m3 = e3 - 3.0 * mean * e2 + 2.0 * mean.powi(3);
    let m4 = e4 - 4.0 * mean * e3 + 6.0 * mean * mean * e2 - 3.0 * mean.powi(4);
    (mean, m2, m3, m4)
}

/// Delete-one jackknife of a statistic that depends on the sample only
/// through its power sums; `O(M)`.
fn jackknife(xs: &[f64], stat: impl Fn(&Sums) -> f64) -> Estimate {
    let full = sums(xs);
    let value = stat(&full);
    let m = xs.len() as f64;
    if xs.len() < 2 {
        return Estimate {
            value,
            stderr: f64::NAN,
        };
    }
    let loo: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let x2 = x * x;
            let s = [
                full[0] - 1.0,
                full[1] - x,
                full[2] - x2,
                full[3] - x2 * x,
                full[4] - x2 * x2,
            ];
            stat(&s)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / m;
    let var = loo.iter().map(|t| (t - mean).powi(2)).sum::<f64>() * (m - 1.0) / m;
    Estimate {
        value,
        stderr: var.sqrt(),
    }
}

/// Mean with its standard error (the jackknife of a mean is `s/√M`).
pub fn mean(xs: &[f64]) -> Estimate {
    let m = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m - 1.0);
    Estimate {
        value: mu,
        stderr: (var / m).sqrt(),
    }
}

/// Second moment about zero, for fields known to be centered.
pub fn raw_second_moment(xs: &[f64]) -> Estimate {
    let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
    mean(&sq)
}

pub fn variance(xs: &[f64]) -> Estimate {
    jackknife(xs, |s| central(s).1)
}

pub fn skewness(xs: &[f64]) -> Estimate {
    jackknife(xs, |s| {
        let (_, m2, m3, _) = central(s);
        m3 / m2.powf(1.5)
    })
}

pub fn excess_kurtosis(xs: &[f64]) -> Estimate {
    jackknife(xs, |s| {
        let (_, m2, _, m4) = central(s);
        m4 / (m2 * m2) - 3.0
    })
}

/// Summary of the first four moments.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MomentReport {
    pub mean: Estimate,
    pub variance: Estimate,
    pub skewness: Estimate,
    pub excess_kurtosis: Estimate,
}

pub fn moments(xs: &[f64]) -> MomentReport {
    MomentReport {
        mean: mean(xs),
        variance: variance(xs),
        skewness: skewness(xs),
        excess_kurtosis: excess_kurtosis(xs),
    }
}

/// Empirical characteristic function `M⁻¹ Σ e^{iλx}` with standard errors of
/// its real and imaginary parts.
pub fn characteristic_function(xs: &[f64], lambda: f64) -> (Estimate, Estimate) {
    let c: Vec<f64> = xs.iter().map(|x| (lambda * x).cos()).collect();
    let s: Vec<f64> = xs.iter().map(|x| (lambda * x).sin()).collect();
    (mean(&c), mean(&s))
}

/// Two-sided `1 - alpha` band for a sample variance with `dof` degrees of
/// freedom, relative to the true variance: `[χ²_{α/2}/dof, χ²_{1-α/2}/dof]`.
pub fn chi_square_band(dof: f64, alpha: f64) -> (f64, f64) {
    let chi = ChiSquared::new(dof).expect("positive degrees of freedom");
    (
        chi.inverse_cdf(0.5 * alpha) / dof,
        chi.inverse_cdf(1.0 - 0.5 * alpha) / dof,
    )
}
