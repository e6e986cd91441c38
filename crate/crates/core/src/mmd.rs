//! Squared maximum mean discrepancy between two sample sets with a sum of
//! RBF kernels, usable both as a plain function and as a graph op.

use std::cmp::Ordering;

use crate::diffcore::{CustomOp, ParamGraph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    Rbf,
}

/// How configured bandwidths are turned into kernel widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BandwidthScale {
    /// Bandwidths are used as given.
    Fixed,
    /// Bandwidths are multipliers of the median pairwise distance of the
    /// reference (prior) sample.
    #[default]
    PriorMedian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdConfig {
    pub kernel: Kernel,
    pub bandwidths: Vec<f64>,
    pub scale: BandwidthScale,
    /// Prior draws per step; 0 means "same as the batch size".
    pub prior_sample_count: usize,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Rbf,
            bandwidths: vec![0.5, 1.0, 2.0, 4.0],
            scale: BandwidthScale::PriorMedian,
            prior_sample_count: 0,
        }
    }
}

impl MmdConfig {
    pub fn fixed(bandwidths: Vec<f64>) -> Self {
        Self {
            bandwidths,
            scale: BandwidthScale::Fixed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::Config("mmd needs at least one bandwidth".into()));
        }
        if let Some(b) = self.bandwidths.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::Config(format!("mmd bandwidth {b} is not positive")));
        }
        Ok(())
    }

    /// Concrete kernel widths for a given reference sample.
    pub fn resolve(&self, reference: &Tensor) -> Result<Vec<f64>> {
        self.validate()?;
        match self.scale {
            BandwidthScale::Fixed => Ok(self.bandwidths.clone()),
            BandwidthScale::PriorMedian => {
                let med = median_pairwise_distance(reference)?;
                // A collapsed reference sample has no scale of its own.
                let med = if med > 0.0 { med } else { 1.0 };
                Ok(self.bandwidths.iter().map(|b| b * med).collect())
            }
        }
    }
}

/// Median of the Euclidean distances over all unordered row pairs.
pub fn median_pairwise_distance(x: &Tensor) -> Result<f64> {
    x.ensure_matrix("median_pairwise_distance")?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument("median distance needs at least two rows".into()));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    let m = d.len();
    let (_, hi, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
    let hi = *hi;
    if m % 2 == 1 {
        return Ok(hi);
    }
    let lo = d[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (lo + hi))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Row indices of `x` in lexicographic order.
fn canonical_order(x: &Tensor) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&i, &j| cmp_rows(x.row(i), x.row(j)).then(i.cmp(&j)));
    idx
}

fn cmp_sets(x: &Tensor, xo: &[usize], y: &Tensor, yo: &[usize]) -> Ordering {
    for (&i, &j) in xo.iter().zip(yo) {
        match cmp_rows(x.row(i), y.row(j)) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    xo.len().cmp(&yo.len())
}

fn check_inputs(x: &Tensor, y: &Tensor) -> Result<()> {
    x.ensure_matrix("mmd2")?;
    y.ensure_matrix("mmd2")?;
    if x.cols() != y.cols() {
        return shape_err("mmd2", format!("feature dims {} vs {}", x.cols(), y.cols()));
    }
    if x.rows() < 2 || y.rows() < 2 {
        return shape_err("mmd2", format!("needs at least two rows per set, got {} and {}", x.rows(), y.rows()));
    }
    Ok(())
}

fn within_sum(x: &Tensor, order: &[usize], inv2h2: f64) -> f64 {
    let mut s = 0.0;
    for (a, &i) in order.iter().enumerate() {
        for &j in &order[a + 1..] {
            s += (-sq_dist(x.row(i), x.row(j)) * inv2h2).exp();
        }
    }
    2.0 * s
}

/// Sum of `k(a_i, b_j)` over all pairs, except rank-matched pairs
/// (`i`-th row of `ao` with `i`-th row of `bo`) when `skip_matched`.
fn cross_sum(a: &Tensor, ao: &[usize], b: &Tensor, bo: &[usize], inv2h2: f64, skip_matched: bool) -> f64 {
    let mut s = 0.0;
    for (ra, &i) in ao.iter().enumerate() {
        for (rb, &j) in bo.iter().enumerate() {
            if skip_matched && ra == rb {
                continue;
            }
            s += (-sq_dist(a.row(i), b.row(j)) * inv2h2).exp();
        }
    }
    s
}

/// Unbiased squared MMD summed over the given RBF widths.
///
/// Within-set sums exclude the diagonal. With equal set sizes the cross
/// term also excludes one pair per row, matching the `i`-th row of each set
/// in lexicographic order, so identical sets give exactly zero; with
/// unequal sizes the full cross mean is used. The value is exactly
/// symmetric in its arguments and invariant to row order within each set.
pub fn mmd2(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    check_inputs(x, y)?;
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    let paired = x.rows() == y.rows();
    let cross_count = if paired { n * (n - 1.0) } else { n * m };
    let xo = canonical_order(x);
    let yo = canonical_order(y);
    let x_first = cmp_sets(x, &xo, y, &yo) != Ordering::Greater;
    let mut total = 0.0;
    for &h in bandwidths {
        let inv2h2 = 1.0 / (2.0 * h * h);
        let kxx = within_sum(x, &xo, inv2h2) / (n * (n - 1.0));
        let kyy = within_sum(y, &yo, inv2h2) / (m * (m - 1.0));
        let kxy = if x_first {
            cross_sum(x, &xo, y, &yo, inv2h2, paired)
        } else {
            cross_sum(y, &yo, x, &xo, inv2h2, paired)
        };
        total += kxx + kyy - 2.0 * kxy / cross_count;
    }
    Ok(total)
}

/// Gradient of [`mmd2`] with respect to the rows of `x`.
pub fn mmd2_grad_x(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> Result<Tensor> {
    check_inputs(x, y)?;
    let (n, m, d) = (x.rows(), y.rows(), x.cols());
    let (nf, mf) = (n as f64, m as f64);
    let paired = n == m;
    // partner[i]: the y row sharing x row i's lexicographic rank.
    let mut partner = vec![usize::MAX; n];
    if paired {
        for (&i, &j) in canonical_order(x).iter().zip(&canonical_order(y)) {
            partner[i] = j;
        }
    }
    let mut grad = Tensor::zeros(&[n, d]);
    let g = grad.data_mut();
    for &h in bandwidths {
        let inv_h2 = 1.0 / (h * h);
        let inv2h2 = 0.5 * inv_h2;
        let cw = 2.0 / (nf * (nf - 1.0));
        for i in 0..n {
            for j in i + 1..n {
                let (xi, xj) = (x.row(i), x.row(j));
                let k = (-sq_dist(xi, xj) * inv2h2).exp();
                for t in 0..d {
                    // d k(x_i, x_j) / d x_i = -k (x_i - x_j) / h²
                    let dk = -k * (xi[t] - xj[t]) * inv_h2 * cw;
                    g[i * d + t] += dk;
                    g[j * d + t] -= dk;
                }
            }
        }
        let cc = if paired { 2.0 / (nf * (nf - 1.0)) } else { 2.0 / (nf * mf) };
        for i in 0..n {
            let xi = x.row(i);
            for j in 0..m {
                if j == partner[i] {
                    continue;
                }
                let yj = y.row(j);
                let k = (-sq_dist(xi, yj) * inv2h2).exp();
                for t in 0..d {
                    g[i * d + t] += cc * k * (xi[t] - yj[t]) * inv_h2;
                }
            }
        }
    }
    Ok(grad)
}

/// Graph op for [`mmd2`]; only the first input receives a gradient.
#[derive(Clone, Debug)]
pub struct Mmd2Op {
    bandwidths: Vec<f64>,
}

impl Mmd2Op {
    pub fn new(bandwidths: Vec<f64>) -> Self {
        Self { bandwidths }
    }
}

impl CustomOp for Mmd2Op {
    fn name(&self) -> &'static str {
        "mmd2"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(mmd2(inputs[0], inputs[1], &self.bandwidths)?))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad_out.item();
        let dx = mmd2_grad_x(inputs[0], inputs[1], &self.bandwidths)?.map(|v| v * g);
        Ok(vec![Some(dx), None])
    }
}

/// Records `mmd2(x, prior)` on the tape, resolving bandwidths against the
/// prior sample.
pub fn mmd2_var(graph: &mut ParamGraph, x: Var, prior: &Tensor, cfg: &MmdConfig) -> Result<Var> {
    let bandwidths = cfg.resolve(prior)?;
    let p = graph.input(prior.clone())?;
    graph.custom(Box::new(Mmd2Op::new(bandwidths)), &[x, p])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_three_points() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        // distances 1, 3, 2
        assert_eq!(median_pairwise_distance(&x).unwrap(), 2.0);
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0], vec![6.0]]).unwrap();
        // distances 1, 3, 6, 2, 5, 3 -> sorted 1 2 3 3 5 6
        assert_eq!(median_pairwise_distance(&x).unwrap(), 3.0);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(MmdConfig::fixed(vec![]).validate().is_err());
        assert!(MmdConfig::fixed(vec![1.0, -1.0]).validate().is_err());
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[3, 1]);
        assert!(mmd2(&a, &b, &[1.0]).is_err());
        assert!(mmd2(&a, &Tensor::zeros(&[1, 2]), &[1.0]).is_err());
    }

    #[test]
    fn small_sets_by_hand() {
        // h = 1: k(d) = exp(-d²/2)
        let k = |d: f64| (-d * d / 2.0).exp();
        // Equal sizes, x = {1, 0}, y = {2, 0}: ranks pair 0 with 0 and 1 with 2,
        // leaving the cross pairs (0, 2) and (1, 0).
        let x = Tensor::column(vec![1.0, 0.0]);
        let y = Tensor::column(vec![2.0, 0.0]);
        let expected = k(1.0) + k(2.0) - 2.0 * (k(2.0) + k(1.0)) / 2.0;
        assert!((mmd2(&x, &y, &[1.0]).unwrap() - expected).abs() < 1e-15);
        // Unequal sizes use every cross pair.
        let y = Tensor::column(vec![0.0, 2.0, 4.0]);
        let kyy = 2.0 * (k(2.0) + k(4.0) + k(2.0)) / 6.0;
        let kxy = (k(0.0) + k(2.0) + k(4.0) + k(1.0) + k(1.0) + k(3.0)) / 6.0;
        let expected = k(1.0) + kyy - 2.0 * kxy;
        assert!((mmd2(&x, &y, &[1.0]).unwrap() - expected).abs() < 1e-15);
    }
}
