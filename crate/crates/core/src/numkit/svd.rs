// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-sided Jacobi SVD and the Moore–Penrose pseudo-inverse built on it.

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Singular values below `PINV_RTOL * s_max` are treated as zero by [`pinv`].
pub const PINV_RTOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 100;

/// Thin SVD `m = u * diag(s) * vt` with `r = min(rows, cols)` singular values.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows x r, orthonormal columns.
    pub u: DenseMatrix,
    /// Non-negative, non-increasing.
    pub s: Vec<f64>,
    /// r x cols, orthonormal rows.
    pub vt: DenseMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, r) = self.u.shape();
        let n = self.vt.cols();
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            let row = out.row_mut(i);
            for k in 0..r {
                let a = self.u[(i, k)] * self.s[k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in row.iter_mut().zip(self.vt.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Number of singular values above `rtol * s_max`.
    pub fn rank(&self, rtol: f64) -> usize {
        let cutoff = self.s.first().copied().unwrap_or(0.0) * rtol;
        self.s.iter().filter(|&&s| s > cutoff).count()
    }
}

pub fn svd(m: &DenseMatrix) -> Result<Svd> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd input has non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_tall(m))
    } else {
        // m^T = U' S V'^T  =>  m = V' S U'^T
        let t = jacobi_tall(&m.transpose());
        Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

/// Hestenes one-sided Jacobi on a matrix with rows >= cols.
fn jacobi_tall(a: &DenseMatrix) -> Svd {
    let (m, n) = a.shape();
    // Columns of A and V stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m as f64).sqrt().max(1.0);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let s_max = norms[order[0]];
    let negligible = s_max * 1e-13;

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_rows = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        if sigma > negligible && sigma > 0.0 {
            u_cols.push(Some(cols[j].iter().map(|x| x / sigma).collect()));
        } else {
            u_cols.push(None);
        }
        s.push(sigma);
        v_rows.push(v[j].clone());
    }
    complete_basis(&mut u_cols, m);
    let mut u_cols: Vec<Vec<f64>> = u_cols.into_iter().map(Option::unwrap).collect();

    // Deterministic signs: largest-magnitude entry of each U column positive.
    for (uc, vr) in u_cols.iter_mut().zip(v_rows.iter_mut()) {
        let pivot = uc
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vr.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let mut u = DenseMatrix::zeros(m, n);
    for (k, uc) in u_cols.iter().enumerate() {
        for (i, &x) in uc.iter().enumerate() {
            u[(i, k)] = x;
        }
    }
    let mut vt = DenseMatrix::zeros(n, n);
    for (k, vr) in v_rows.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(vr);
    }
    Svd { u, s, vt }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill `None` slots with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut [Option<Vec<f64>>], m: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while candidate < m {
            let mut w = vec![0.0; m];
            w[candidate] = 1.0;
            candidate += 1;
            // Two passes of classical Gram-Schmidt.
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let proj: f64 = c.iter().zip(&w).map(|(a, b)| a * b).sum();
                    for (wi, ci) in w.iter_mut().zip(c) {
                        *wi -= proj * ci;
                    }
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                w.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(w);
                break;
            }
        }
    }
}

/// Moore–Penrose pseudo-inverse via SVD, zeroing singular values below
/// [`PINV_RTOL`] times the largest.
pub fn pinv(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("pinv input has non-finite entries".into()));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DenseMatrix::zeros(cols, rows));
    }
    let dec = svd(m)?;
    let cutoff = dec.s[0] * PINV_RTOL;
    let mut out = DenseMatrix::zeros(cols, rows);
    for (k, &sigma) in dec.s.iter().enumerate() {
        if sigma <= cutoff || sigma == 0.0 {
            continue;
        }
        let inv = 1.0 / sigma;
        for i in 0..cols {
            let a = dec.vt[(k, i)] * inv;
            if a == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += a * dec.u[(j, k)];
            }
        }
    }
    Ok(out)
}
