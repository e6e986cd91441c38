use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Returns singular values in descending order together with the matching
/// right singular vectors as the columns of an `n x n` matrix. Meant for the
/// small dense matrices of the discrete oracle; cost is O(m n² · sweeps).
pub fn svd(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    a.ensure_matrix("svd")?;
    a.ensure_finite("svd input")?;
    let (m, n) = (a.rows(), a.cols());
    // Column-major working copy: cols[j] is column j of A.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = 1e-15;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Divergence("jacobi svd did not converge".into()));
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let values = order.iter().map(|&j| norms[j]).collect();
    let mut vt = Tensor::zeros(&[n, n]);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..n {
            vt.set(i, k, v[j][i]);
        }
    }
    Ok((values, vt))
}

/// Singular values only, descending.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let t;
    let a = if a.rows() < a.cols() {
        t = a.transpose()?;
        &t
    } else {
        a
    };
    Ok(svd(a)?.0)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}
