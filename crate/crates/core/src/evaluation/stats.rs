//! Confidence intervals and correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// 97.5% standard normal quantile, for two-sided 95% intervals.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanInterval {
    pub mean: f64,
    /// 95% t-interval half-width; `None` when a single value leaves it undefined.
    pub half_width: Option<f64>,
    pub n: usize,
}

/// Sample mean with a t-based 95% half-width `t(0.975, n-1) * sd / sqrt(n)`.
pub fn mean_interval(values: &[f64]) -> Result<MeanInterval> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Statistics("no values to aggregate".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(MeanInterval {
            mean,
            half_width: None,
            n,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(MeanInterval {
            mean,
            half_width: Some(0.0),
            n,
        });
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Statistics(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(MeanInterval {
        mean,
        half_width: Some(t * var.sqrt() / (n as f64).sqrt()),
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    /// Observed proportion in percent.
    pub percent: f64,
    /// Wilson 95% half-width in percentage points.
    pub half_width: f64,
    pub successes: usize,
    pub n: usize,
}

/// Observed proportion with the half-width of its Wilson score interval.
pub fn wilson(successes: usize, n: usize) -> Result<Proportion> {
    if n == 0 || successes > n {
        return Err(Error::Statistics(format!(
            "invalid proportion {successes}/{n}"
        )));
    }
    let (p, nf, z2) = (successes as f64 / n as f64, n as f64, Z_975 * Z_975);
    let half = Z_975 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / (1.0 + z2 / nf);
    Ok(Proportion {
        percent: 100.0 * p,
        half_width: 100.0 * half,
        successes,
        n,
    })
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Statistics(format!(
            "lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Statistics(format!(
            "need at least 3 points, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Statistics("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
