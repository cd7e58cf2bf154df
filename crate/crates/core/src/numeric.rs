//! Small numerical helpers shared across estimators and samplers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the n-1 denominator; 0 for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn sd(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

/// Linear-interpolation quantile (R type 7) of unsorted data.
pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    assert!(!v.is_empty(), "quantile of empty slice");
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

pub fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Indices of columns that are (numerically) linear combinations of earlier
/// columns of the Gram matrix `xtx`, found by a pivot-free Cholesky sweep.
pub fn aliased_columns(xtx: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let p = xtx.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut aliased = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..p {
        let mut d = xtx[(j, j)];
        for &k in &kept {
            d -= l[(j, k)] * l[(j, k)];
        }
        let scale = xtx[(j, j)].abs().max(f64::MIN_POSITIVE);
        if d <= tol * scale {
            aliased.push(j);
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..p {
            let mut s = xtx[(i, j)];
            for &k in &kept {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
        kept.push(j);
    }
    aliased
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::numerical("matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

pub fn keep_indices(p: usize, drop: &[usize]) -> Vec<usize> {
    (0..p).filter(|i| !drop.contains(i)).collect()
}

pub fn submatrix(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| a[(idx[i], idx[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Weighted least squares `(X'WX)^{-1} X'Wy` over design rows.
///
/// Returns an error naming the aliased columns when the design is rank
/// deficient.
pub fn weighted_least_squares(
    rows: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    labels: &[String],
) -> Result<DVector<f64>> {
    let p = labels.len();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for ((row, &yi), &wi) in rows.iter().zip(y).zip(w) {
        for a in 0..p {
            if row[a] == 0.0 {
                continue;
            }
            let ra = wi * row[a];
            xtwy[a] += ra * yi;
            for b in a..p {
                xtwx[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let aliased = aliased_columns(&xtwx, 1e-10);
    if !aliased.is_empty() {
        return Err(Error::RankDeficient(
            aliased.iter().map(|&i| labels[i].clone()).collect(),
        ));
    }
    solve_spd(xtwx, &xtwy)
}

/// Monte Carlo standard error of a statistic of a draw sequence, estimated by
/// non-overlapping batch means with `batches` batches.
pub fn batch_mcse<F: Fn(&[f64]) -> f64>(draws: &[f64], batches: usize, stat: F) -> f64 {
    let size = draws.len() / batches;
    assert!(size >= 2, "too few draws for {batches} batches");
    let values: Vec<f64> = draws.chunks_exact(size).take(batches).map(&stat).collect();
    sd(&values) / (batches as f64).sqrt()
}
