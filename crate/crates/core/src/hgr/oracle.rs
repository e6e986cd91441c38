//! Exact maximal correlation of finite discrete pairs.
//!
//! For a joint pmf `p(i, j)` with marginals `p_i`, `p_j`, the matrix
//! `Q_ij = p(i, j) / sqrt(p_i p_j)` has leading singular value 1 (with
//! singular vectors `sqrt(p_i)`, `sqrt(p_j)`); its second singular value is
//! the HGR coefficient.

use rand::Rng;

use super::jacobi::singular_values;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// A probability table over two finite alphabets.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    pmf: Tensor,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl DiscreteJoint {
    /// Validates a pmf: finite non-negative entries summing to `1 ± 1e-12`
    /// and no zero marginal.
    pub fn new(pmf: Tensor) -> Result<Self> {
        pmf.ensure_matrix("DiscreteJoint")?;
        if pmf.is_empty() {
            return Err(Error::InvalidPmf("empty table".into()));
        }
        if pmf.data().iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidPmf("entries must be finite and non-negative".into()));
        }
        let total = pmf.sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidPmf(format!("entries sum to {total}")));
        }
        let (r, c) = (pmf.rows(), pmf.cols());
        let mut row_marginal = vec![0.0; r];
        let mut col_marginal = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                row_marginal[i] += pmf.get(i, j);
                col_marginal[j] += pmf.get(i, j);
            }
        }
        if let Some(i) = row_marginal.iter().position(|&p| p == 0.0) {
            return Err(Error::InvalidPmf(format!("row {i} has zero marginal")));
        }
        if let Some(j) = col_marginal.iter().position(|&p| p == 0.0) {
            return Err(Error::InvalidPmf(format!("column {j} has zero marginal")));
        }
        Ok(Self {
            pmf,
            row_marginal,
            col_marginal,
        })
    }

    /// Normalizes non-negative weights, dropping all-zero rows and columns.
    pub fn from_weights(weights: &Tensor) -> Result<Self> {
        weights.ensure_matrix("DiscreteJoint::from_weights")?;
        let (r, c) = (weights.rows(), weights.cols());
        let keep_r: Vec<usize> = (0..r).filter(|&i| weights.row(i).iter().any(|&w| w > 0.0)).collect();
        let keep_c: Vec<usize> = (0..c).filter(|&j| (0..r).any(|i| weights.get(i, j) > 0.0)).collect();
        let total: f64 = weights.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidPmf("weights must have positive finite mass".into()));
        }
        let mut data = Vec::with_capacity(keep_r.len() * keep_c.len());
        for &i in &keep_r {
            for &j in &keep_c {
                data.push(weights.get(i, j) / total);
            }
        }
        // Renormalize once more so the stored table sums to one within
        // rounding of a single division pass.
        let s: f64 = data.iter().sum();
        data.iter_mut().for_each(|p| *p /= s);
        Self::new(Tensor::matrix(keep_r.len(), keep_c.len(), data)?)
    }

    /// Empirical joint of paired category codes.
    pub fn from_codes(u: &[usize], v: &[usize]) -> Result<Self> {
        if u.len() != v.len() || u.is_empty() {
            return Err(Error::InvalidArgument("code vectors must be non-empty and equal length".into()));
        }
        let ku = u.iter().max().unwrap() + 1;
        let kv = v.iter().max().unwrap() + 1;
        let mut counts = Tensor::zeros(&[ku, kv]);
        for (&a, &b) in u.iter().zip(v) {
            let c = counts.get(a, b);
            counts.set(a, b, c + 1.0);
        }
        Self::from_weights(&counts)
    }

    pub fn pmf(&self) -> &Tensor {
        &self.pmf
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    /// Draws `n` index pairs.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let c = self.pmf.cols();
        let mut cdf = Vec::with_capacity(self.pmf.len());
        let mut acc = 0.0;
        for &p in self.pmf.data() {
            acc += p;
            cdf.push(acc);
        }
        let (mut us, mut vs) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let r: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&x| x <= r).min(cdf.len() - 1);
            us.push(k / c);
            vs.push(k % c);
        }
        (us, vs)
    }
}

/// Exact HGR coefficient of a discrete pair, in `[0, 1]`.
pub fn hgr_oracle(joint: &DiscreteJoint) -> Result<f64> {
    let (r, c) = (joint.pmf.rows(), joint.pmf.cols());
    if r < 2 || c < 2 {
        return Ok(0.0);
    }
    let mut q = joint.pmf.clone();
    for i in 0..r {
        for j in 0..c {
            let v = q.get(i, j) / (joint.row_marginal[i] * joint.col_marginal[j]).sqrt();
            q.set(i, j, v);
        }
    }
    let sv = singular_values(&q)?;
    Ok(sv[1].clamp(0.0, 1.0))
}

/// A pmf over three finite alphabets `(Ŷ, S, Z′)`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint3 {
    dims: [usize; 3],
    pmf: Vec<f64>,
}

impl Joint3 {
    pub fn new(dims: [usize; 3], pmf: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) || pmf.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidPmf(format!("dims {dims:?} do not match {} entries", pmf.len())));
        }
        if pmf.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidPmf("entries must be finite and non-negative".into()));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidPmf(format!("entries sum to {total}")));
        }
        Ok(Self { dims, pmf })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        let [_, nb, nc] = self.dims;
        self.pmf[(a * nb + b) * nc + c]
    }

    /// `(Ŷ, (S, Z′))` with the second alphabet flattened.
    pub fn flattened(&self) -> Tensor {
        let [na, nb, nc] = self.dims;
        Tensor::matrix(na, nb * nc, self.pmf.clone()).expect("dims checked")
    }

    /// `(Ŷ, S)` with `Z′` summed out.
    pub fn marginal_ab(&self) -> Tensor {
        let [na, nb, nc] = self.dims;
        let mut out = Tensor::zeros(&[na, nb]);
        for a in 0..na {
            for b in 0..nb {
                let s: f64 = (0..nc).map(|c| self.get(a, b, c)).sum();
                out.set(a, b, s);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonotonicityOutcome {
    pub hgr_full: f64,
    pub hgr_sub: f64,
    pub holds: bool,
}

/// Compares `HGR(Ŷ, (S, Z′))` with `HGR(Ŷ, S)`. Zero-mass symbols are
/// dropped before the oracle runs; they carry no probability.
pub fn monotonicity_check(joint: &Joint3) -> Result<MonotonicityOutcome> {
    let hgr_full = hgr_oracle(&DiscreteJoint::from_weights(&joint.flattened())?)?;
    let hgr_sub = hgr_oracle(&DiscreteJoint::from_weights(&joint.marginal_ab())?)?;
    Ok(MonotonicityOutcome {
        hgr_full,
        hgr_sub,
        holds: hgr_full >= hgr_sub - 1e-9,
    })
}
