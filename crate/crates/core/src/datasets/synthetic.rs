use std::sync::Arc;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dataset::TabularDataset;
use super::schema::{ColumnKind, ColumnSpec, CsvFormat, Role, SchemaSpec, Transform};
use super::table::{RawColumn, RawTable, RawValues};
use crate::diffcore::sigmoid;
use crate::error::{Error, Result};

/// Generator settings. Rows are drawn as
///
/// ```text
/// s    ~ Bernoulli(p_s)
/// x_c  ~ N(0, I)                                     (n_xc columns)
/// x_dj = xc_to_xd * x_c[j mod n_xc] + s_to_xd * s + xd_noise * e_j
/// y    ~ Bernoulli(sigmoid(xc_to_y * mean(x_c) + xd_to_y * mean(x_d) + s_to_y * s + y_bias))
/// x_dj += xd_shift_neg_s1                            when s = 1 and y = 0
/// ```
///
/// The last line adds label-dependent group noise: negatives of group 1
/// look more like positives, which raises that group's false-positive rate
/// without touching its false-negative rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_xc: usize,
    pub n_xd: usize,
    pub p_s: f64,
    pub xc_to_xd: f64,
    pub s_to_xd: f64,
    pub xd_noise: f64,
    pub xc_to_y: f64,
    pub xd_to_y: f64,
    pub s_to_y: f64,
    pub y_bias: f64,
    pub xd_shift_neg_s1: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_xc: 2,
            n_xd: 3,
            p_s: 0.5,
            xc_to_xd: 0.5,
            s_to_xd: 1.0,
            xd_noise: 1.0,
            xc_to_y: 1.0,
            xd_to_y: 2.0,
            s_to_y: 0.0,
            y_bias: 0.0,
            xd_shift_neg_s1: 0.0,
        }
    }
}

impl SyntheticSpec {
    /// The schema matching [`synthetic_raw`] output written as CSV.
    pub fn schema(&self) -> SchemaSpec {
        let mut columns = Vec::new();
        let cont = |name: String, role| ColumnSpec {
            name,
            kind: ColumnKind::Continuous,
            role,
            transform: Transform::None,
        };
        columns.extend((0..self.n_xc).map(|j| cont(format!("xc{j}"), Role::Xc)));
        columns.extend((0..self.n_xd).map(|j| cont(format!("xd{j}"), Role::Xd)));
        for (name, role) in [("s", Role::Sensitive), ("y", Role::Label)] {
            columns.push(ColumnSpec {
                name: name.into(),
                kind: ColumnKind::Categorical,
                role,
                transform: Transform::None,
            });
        }
        SchemaSpec {
            name: "synthetic".into(),
            format: CsvFormat::default(),
            columns,
            label_positive: vec!["1".into()],
            sensitive_positive: vec!["1".into()],
        }
    }

    /// The schema in the text grammar accepted by [`SchemaSpec`]'s parser.
    pub fn schema_text(&self) -> String {
        let schema = self.schema();
        let names: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        let mut out = format!("name = synthetic\ncolumns = {}\n", names.join(","));
        for c in &schema.columns {
            let kind = match c.kind {
                ColumnKind::Continuous => "continuous",
                ColumnKind::Categorical => "categorical",
            };
            out.push_str(&format!("column.{}.kind = {kind}\ncolumn.{}.role = {}\n", c.name, c.name, c.role));
        }
        out.push_str("label.positive = 1\nsensitive.positive = 1\n");
        out
    }
}

/// Draws `n` raw rows from the generator.
pub fn synthetic_raw(n: usize, seed: u64, spec: &SyntheticSpec) -> Result<RawTable> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("synthetic data needs at least 100 rows, got {n}")));
    }
    if spec.n_xc == 0 || spec.n_xd == 0 || !(0.0..=1.0).contains(&spec.p_s) {
        return Err(Error::InvalidArgument(format!("invalid synthetic spec {spec:?}")));
    }
    info!("synthetic generator: n = {n}, seed = {seed}, {spec:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xc = vec![Vec::with_capacity(n); spec.n_xc];
    let mut xd = vec![Vec::with_capacity(n); spec.n_xd];
    let (mut s, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let si = rng.random_bool(spec.p_s) as u8;
        let sf = si as f64;
        let c: Vec<f64> = (0..spec.n_xc).map(|_| rng.sample(StandardNormal)).collect();
        let mut d: Vec<f64> = (0..spec.n_xd)
            .map(|j| {
                let e: f64 = rng.sample(StandardNormal);
                spec.xc_to_xd * c[j % spec.n_xc] + spec.s_to_xd * sf + spec.xd_noise * e
            })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let logit = spec.xc_to_y * mean(&c) + spec.xd_to_y * mean(&d) + spec.s_to_y * sf + spec.y_bias;
        let yi = (rng.random::<f64>() < sigmoid(logit)) as u8;
        if si == 1 && yi == 0 {
            d.iter_mut().for_each(|v| *v += spec.xd_shift_neg_s1);
        }
        for (col, v) in xc.iter_mut().zip(c) {
            col.push(v);
        }
        for (col, v) in xd.iter_mut().zip(d) {
            col.push(v);
        }
        s.push(si);
        y.push(yi);
    }
    let schema = spec.schema();
    let columns = schema
        .columns
        .iter()
        .filter(|c| c.role.is_feature())
        .zip(xc.into_iter().chain(xd))
        .map(|(c, values)| RawColumn {
            spec: c.clone(),
            values: RawValues::Continuous(values),
        })
        .collect();
    Ok(RawTable {
        columns,
        s,
        y,
        row_ids: (0..n as u64).collect(),
    })
}

/// A generated dataset with a known sensitive attribute.
pub fn make_synthetic(n: usize, seed: u64, spec: &SyntheticSpec) -> Result<TabularDataset> {
    TabularDataset::from_raw(Arc::new(synthetic_raw(n, seed, spec)?))
}
