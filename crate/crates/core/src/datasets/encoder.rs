use std::collections::{BTreeSet, HashMap};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::schema::{ColumnKind, Role, Transform};
use super::table::{RawTable, RawValues};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureEncoding {
    Continuous { mean: f64, std: f64, transform: Transform },
    Categorical { levels: Vec<String> },
}

/// Where one source column lands in the encoded `x_c` or `x_d` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub name: String,
    pub role: Role,
    pub offset: usize,
    pub width: usize,
    pub encoding: FeatureEncoding,
}

/// Fitted feature encoding: standardization for continuous columns and
/// one-hot blocks (levels sorted) for categorical ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<EncodedColumn>,
    pub dim_xc: usize,
    pub dim_xd: usize,
}

impl Encoder {
    /// Fits on the rows of `raw` at `rows`.
    pub fn fit(raw: &RawTable, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot fit an encoder on zero rows".into()));
        }
        let mut columns = Vec::with_capacity(raw.columns.len());
        let (mut dim_xc, mut dim_xd) = (0, 0);
        for col in &raw.columns {
            let encoding = match &col.values {
                RawValues::Continuous(v) => {
                    let t = col.spec.transform;
                    let n = rows.len() as f64;
                    let mean = rows.iter().map(|&i| t.apply(v[i])).sum::<f64>() / n;
                    let var = rows.iter().map(|&i| (t.apply(v[i]) - mean).powi(2)).sum::<f64>() / n;
                    let mut std = var.sqrt();
                    if std == 0.0 {
                        warn!("column '{}' is constant on the fitting rows; centering only", col.spec.name);
                        std = 1.0;
                    }
                    FeatureEncoding::Continuous { mean, std, transform: t }
                }
                RawValues::Categorical(v) => {
                    let levels: BTreeSet<&str> = rows.iter().map(|&i| v[i].as_str()).collect();
                    FeatureEncoding::Categorical {
                        levels: levels.into_iter().map(str::to_string).collect(),
                    }
                }
            };
            let width = match &encoding {
                FeatureEncoding::Continuous { .. } => 1,
                FeatureEncoding::Categorical { levels } => levels.len(),
            };
            let dim = if col.spec.role == Role::Xc { &mut dim_xc } else { &mut dim_xd };
            columns.push(EncodedColumn {
                name: col.spec.name.clone(),
                role: col.spec.role,
                offset: *dim,
                width,
                encoding,
            });
            *dim += width;
        }
        Ok(Self { columns, dim_xc, dim_xd })
    }

    /// Encodes the rows of `raw` at `rows` into `(x_c, x_d)`. Categorical
    /// levels not seen during fitting become an all-zero block.
    pub fn encode(&self, raw: &RawTable, rows: &[usize]) -> Result<(Tensor, Tensor)> {
        if raw.columns.len() != self.columns.len() {
            return Err(Error::Schema(format!(
                "encoder has {} columns, table has {}",
                self.columns.len(),
                raw.columns.len()
            )));
        }
        let n = rows.len();
        let mut xc = Tensor::zeros(&[n, self.dim_xc]);
        let mut xd = Tensor::zeros(&[n, self.dim_xd]);
        for (enc, col) in self.columns.iter().zip(&raw.columns) {
            if enc.name != col.spec.name {
                return Err(Error::Schema(format!("column '{}' where '{}' was expected", col.spec.name, enc.name)));
            }
            let target = if enc.role == Role::Xc { &mut xc } else { &mut xd };
            match (&enc.encoding, &col.values) {
                (FeatureEncoding::Continuous { mean, std, transform }, RawValues::Continuous(v)) => {
                    for (r, &i) in rows.iter().enumerate() {
                        target.set(r, enc.offset, (transform.apply(v[i]) - mean) / std);
                    }
                }
                (FeatureEncoding::Categorical { levels }, RawValues::Categorical(v)) => {
                    let index: HashMap<&str, usize> = levels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
                    let mut unseen = 0usize;
                    for (r, &i) in rows.iter().enumerate() {
                        match index.get(v[i].as_str()) {
                            Some(&k) => target.set(r, enc.offset + k, 1.0),
                            None => unseen += 1,
                        }
                    }
                    if unseen > 0 {
                        info!("column '{}': {unseen} rows with unseen levels encoded as zeros", enc.name);
                    }
                }
                _ => return Err(Error::Schema(format!("column '{}' changed kind", enc.name))),
            }
        }
        Ok((xc, xd))
    }

    /// Recovers source values from one encoded row: the level of each
    /// categorical block (`None` for an all-zero block) and the original
    /// scale of each continuous column.
    pub fn decode_row(&self, xc: &[f64], xd: &[f64]) -> Vec<(String, DecodedValue)> {
        self.columns
            .iter()
            .map(|c| {
                let src = if c.role == Role::Xc { xc } else { xd };
                let block = &src[c.offset..c.offset + c.width];
                let v = match &c.encoding {
                    FeatureEncoding::Continuous { mean, std, transform } => {
                        DecodedValue::Number(transform.invert(block[0] * std + mean))
                    }
                    FeatureEncoding::Categorical { levels } => {
                        DecodedValue::Level(block.iter().position(|&b| b == 1.0).map(|k| levels[k].clone()))
                    }
                };
                (c.name.clone(), v)
            })
            .collect()
    }

    /// `(source column, role)` for every encoded feature column.
    pub fn provenance(&self) -> Vec<(String, Role)> {
        let mut out = Vec::with_capacity(self.dim_xc + self.dim_xd);
        for role in [Role::Xc, Role::Xd] {
            for c in self.columns.iter().filter(|c| c.role == role) {
                for _ in 0..c.width {
                    out.push((c.name.clone(), role));
                }
            }
        }
        out
    }

    /// Layout of `x_d` as `(offset, width, kind)` per source column.
    pub fn xd_blocks(&self) -> Vec<(usize, usize, ColumnKind)> {
        self.columns
            .iter()
            .filter(|c| c.role == Role::Xd)
            .map(|c| {
                let kind = match c.encoding {
                    FeatureEncoding::Continuous { .. } => ColumnKind::Continuous,
                    FeatureEncoding::Categorical { .. } => ColumnKind::Categorical,
                };
                (c.offset, c.width, kind)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecodedValue {
    Number(f64),
    Level(Option<String>),
}
