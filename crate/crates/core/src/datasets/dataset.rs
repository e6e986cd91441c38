use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::Encoder;
use super::schema::SchemaSpec;
use super::table::RawTable;
use crate::diffcore::checkpoint::{format_err, load_tensors, save_tensors};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// The model inputs of a dataset. The sensitive attribute is not reachable
/// from here, so code that only receives a view cannot train on it.
#[derive(Clone, Copy, Debug)]
pub struct FeatureView<'a> {
    pub x_c: &'a Tensor,
    pub x_d: &'a Tensor,
}

impl FeatureView<'_> {
    pub fn rows(&self) -> usize {
        self.x_c.rows()
    }

    /// `[x_c, x_d]` side by side.
    pub fn concat(&self) -> Result<Tensor> {
        Tensor::concat_cols(&[self.x_c, self.x_d])
    }
}

/// Encoded rows with complementary features `x_c`, descendant features
/// `x_d`, a binary label and the held-out binary sensitive attribute.
#[derive(Clone, Debug)]
pub struct TabularDataset {
    x_c: Tensor,
    x_d: Tensor,
    s: Vec<u8>,
    y: Vec<u8>,
    row_ids: Vec<u64>,
    encoder: Arc<Encoder>,
    raw: Option<Arc<RawTable>>,
}

impl TabularDataset {
    /// Reads one or more CSV files and fits the encoding on all rows.
    pub fn load_csv(paths: &[&Path], schema: &SchemaSpec) -> Result<Self> {
        let raw = RawTable::load(paths, schema)?;
        let ds = Self::from_raw(Arc::new(raw))?;
        info!(
            "loaded {} rows: dim(x_c) = {}, dim(x_d) = {}",
            ds.len(),
            ds.x_c.cols(),
            ds.x_d.cols()
        );
        Ok(ds)
    }

    /// Encodes every row of `raw` with an encoder fitted on all of them.
    pub fn from_raw(raw: Arc<RawTable>) -> Result<Self> {
        let rows: Vec<usize> = (0..raw.len()).collect();
        let encoder = Arc::new(Encoder::fit(&raw, &rows)?);
        Self::encode_rows(raw, &rows, encoder)
    }

    fn encode_rows(raw: Arc<RawTable>, rows: &[usize], encoder: Arc<Encoder>) -> Result<Self> {
        let (x_c, x_d) = encoder.encode(&raw, rows)?;
        Ok(Self {
            x_c,
            x_d,
            s: rows.iter().map(|&i| raw.s[i]).collect(),
            y: rows.iter().map(|&i| raw.y[i]).collect(),
            row_ids: rows.iter().map(|&i| raw.row_ids[i]).collect(),
            encoder,
            raw: Some(Arc::new(raw.select(rows))),
        })
    }

    /// Assembles a dataset from already encoded parts.
    pub fn from_parts(
        x_c: Tensor,
        x_d: Tensor,
        s: Vec<u8>,
        y: Vec<u8>,
        row_ids: Vec<u64>,
        encoder: Arc<Encoder>,
    ) -> Result<Self> {
        let n = y.len();
        if x_c.rows() != n || x_d.rows() != n || s.len() != n || row_ids.len() != n {
            return Err(Error::Data("dataset parts have different row counts".into()));
        }
        if x_c.cols() != encoder.dim_xc || x_d.cols() != encoder.dim_xd {
            return Err(Error::Schema("feature widths do not match the encoder".into()));
        }
        if s.iter().chain(&y).any(|&v| v > 1) {
            return Err(Error::Data("label and sensitive values must be 0 or 1".into()));
        }
        Ok(Self {
            x_c,
            x_d,
            s,
            y,
            row_ids,
            encoder,
            raw: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> FeatureView<'_> {
        FeatureView {
            x_c: &self.x_c,
            x_d: &self.x_d,
        }
    }

    pub fn x_c(&self) -> &Tensor {
        &self.x_c
    }

    pub fn x_d(&self) -> &Tensor {
        &self.x_d
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    /// Labels as an `(n, 1)` column of 0.0 / 1.0.
    pub fn y_column(&self) -> Tensor {
        Tensor::column(self.y.iter().map(|&v| v as f64).collect())
    }

    /// Ground-truth sensitive attribute, for evaluation only.
    pub fn sensitive(&self) -> &[u8] {
        &self.s
    }

    pub fn row_ids(&self) -> &[u64] {
        &self.row_ids
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// The rows at `idx`, keeping the current encoding.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x_c: self.x_c.select_rows(idx),
            x_d: self.x_d.select_rows(idx),
            s: idx.iter().map(|&i| self.s[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
            encoder: self.encoder.clone(),
            raw: self.raw.as_ref().map(|r| Arc::new(r.select(idx))),
        }
    }

    fn raw(&self) -> Result<&Arc<RawTable>> {
        self.raw
            .as_ref()
            .ok_or_else(|| Error::Data("dataset was loaded pre-encoded; raw rows are unavailable".into()))
    }

    /// A seeded random subset of `n` rows (all rows when `n >= len`), with
    /// the encoding refitted on the subset.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        let raw = self.raw()?.clone();
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        let encoder = Arc::new(Encoder::fit(&raw, &idx)?);
        Self::encode_rows(raw, &idx, encoder)
    }

    /// Seeded random train/test partition. The encoding of both parts is
    /// refitted on the training rows only.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Self, Self)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::InvalidArgument(format!("train fraction {train_frac} not in (0, 1)")));
        }
        let raw = self.raw()?.clone();
        let (train_idx, test_idx) = split_indices(self.len(), train_frac, seed);
        let encoder = Arc::new(Encoder::fit(&raw, &train_idx)?);
        let train = Self::encode_rows(raw.clone(), &train_idx, encoder.clone())?;
        let test = Self::encode_rows(raw, &test_idx, encoder)?;
        Ok((train, test))
    }

    /// Writes the encoded matrices to `dir/<stem>.fprx` and the encoder to
    /// `dir/encoder.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let s = Tensor::column(self.s.iter().map(|&v| v as f64).collect());
        let y = self.y_column();
        let ids = Tensor::column(self.row_ids.iter().map(|&v| v as f64).collect());
        save_tensors(
            [
                ("x_c", &self.x_c),
                ("x_d", &self.x_d),
                ("s", &s),
                ("y", &y),
                ("row_id", &ids),
            ],
            &dir.join(format!("{stem}.fprx")),
        )?;
        fs::write(dir.join("encoder.json"), serde_json::to_string_pretty(&*self.encoder)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.fprx"));
        let encoder: Encoder = serde_json::from_str(&fs::read_to_string(dir.join("encoder.json"))?)?;
        let mut parts = load_tensors(&path)?;
        let mut take = |name: &str| -> Result<Tensor> {
            let k = parts
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| format_err(&path, format!("missing '{name}'")))?;
            Ok(parts.swap_remove(k).1)
        };
        let x_c = take("x_c")?;
        let x_d = take("x_d")?;
        let to_u8 = |t: Tensor| t.data().iter().map(|&v| v as u8).collect::<Vec<_>>();
        let s = to_u8(take("s")?);
        let y = to_u8(take("y")?);
        let ids = take("row_id")?.data().iter().map(|&v| v as u64).collect();
        Self::from_parts(x_c, x_d, s, y, ids, Arc::new(encoder))
    }
}

/// Disjoint, exhaustive, seed-reproducible index split; the training part
/// has `round(n * train_frac)` rows. Both parts are returned sorted.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_frac).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
