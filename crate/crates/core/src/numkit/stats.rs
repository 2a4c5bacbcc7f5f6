// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{check_dim, dot, DenseMatrix, RealVector};
use crate::error::{Error, Result};

/// Per-dimension mean over the rows whose mask flag is set.
pub fn mean_pool(states: &DenseMatrix, mask: &[bool]) -> Result<RealVector> {
    check_dim(states.rows(), mask.len())?;
    let mut acc = vec![0.0; states.cols()];
    let mut n = 0usize;
    for (row, _) in states.row_iter().zip(mask).filter(|(_, &m)| m) {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyPool);
    }
    let inv = n as f64;
    RealVector::new(acc.into_iter().map(|a| a / inv).collect())
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &RealVector, b: &RealVector) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub r2: f64,
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_dim(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::DegenerateSeries("need at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("series has non-finite values".into()));
    }
    if is_constant(x) || is_constant(y) {
        return Err(Error::DegenerateSeries("zero variance".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation { r, r2: r * r })
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

/// Two-sided p-value of a Pearson `r` over `n` points, from the t statistic
/// with `n - 2` degrees of freedom.
pub fn pearson_p_value(r: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::DegenerateSeries(
            "p-value needs at least three points".into(),
        ));
    }
    let r2 = r * r;
    if r2 >= 1.0 {
        return Ok(0.0);
    }
    let df = (n - 2) as f64;
    let t2 = df * r2 / (1.0 - r2);
    // P(|T| > t) = I_{df / (df + t^2)}(df / 2, 1 / 2)
    Ok(statrs::function::beta::beta_reg(df / 2.0, 0.5, df / (df + t2)))
}
