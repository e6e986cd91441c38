use std::io::Write;
use std::path::Path;

use log::info;

use super::schema::{ColumnKind, ColumnSpec, Role, SchemaSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum RawValues {
    Continuous(Vec<f64>),
    Categorical(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawColumn {
    pub spec: ColumnSpec,
    pub values: RawValues,
}

/// Parsed but unencoded rows. Only feature columns are kept as values; the
/// label and sensitive columns are already mapped to 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub columns: Vec<RawColumn>,
    pub s: Vec<u8>,
    pub y: Vec<u8>,
    /// Position of each row among all records read, before any drops.
    pub row_ids: Vec<u64>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Reads and concatenates the given files. Rows with a missing value in
    /// any non-dropped column are removed and counted.
    pub fn load(paths: &[&Path], schema: &SchemaSpec) -> Result<Self> {
        let mut builder = Builder::new(schema);
        for path in paths {
            builder.read_file(path)?;
        }
        let table = builder.finish();
        if table.is_empty() {
            return Err(Error::Data("no complete rows after dropping missing values".into()));
        }
        Ok(table)
    }

    /// Writes the table back as a headed CSV with the label and sensitive
    /// columns as `0`/`1`, in the column order of `schema`.
    pub fn write_csv<W: Write>(&self, schema: &SchemaSpec, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().delimiter(schema.format.delimiter).from_writer(w);
        out.write_record(schema.columns.iter().filter(|c| c.role != Role::Drop).map(|c| c.name.as_str()))?;
        for r in 0..self.len() {
            let mut rec = Vec::new();
            for spec in schema.columns.iter().filter(|c| c.role != Role::Drop) {
                rec.push(match spec.role {
                    Role::Label => self.y[r].to_string(),
                    Role::Sensitive => self.s[r].to_string(),
                    _ => {
                        let col = self
                            .columns
                            .iter()
                            .find(|c| c.spec.name == spec.name)
                            .ok_or_else(|| Error::Schema(format!("table has no column '{}'", spec.name)))?;
                        match &col.values {
                            RawValues::Continuous(v) => format!("{:?}", v[r]),
                            RawValues::Categorical(v) => v[r].clone(),
                        }
                    }
                });
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// The rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let columns = self
            .columns
            .iter()
            .map(|c| RawColumn {
                spec: c.spec.clone(),
                values: match &c.values {
                    RawValues::Continuous(v) => RawValues::Continuous(idx.iter().map(|&i| v[i]).collect()),
                    RawValues::Categorical(v) => RawValues::Categorical(idx.iter().map(|&i| v[i].clone()).collect()),
                },
            })
            .collect();
        Self {
            columns,
            s: idx.iter().map(|&i| self.s[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }
}

struct Builder<'a> {
    schema: &'a SchemaSpec,
    columns: Vec<RawColumn>,
    s: Vec<u8>,
    y: Vec<u8>,
    row_ids: Vec<u64>,
    records: u64,
    dropped: u64,
}

impl<'a> Builder<'a> {
    fn new(schema: &'a SchemaSpec) -> Self {
        let columns = schema
            .columns
            .iter()
            .filter(|c| c.role.is_feature())
            .map(|c| RawColumn {
                spec: c.clone(),
                values: match c.kind {
                    ColumnKind::Continuous => RawValues::Continuous(Vec::new()),
                    ColumnKind::Categorical => RawValues::Categorical(Vec::new()),
                },
            })
            .collect();
        Self {
            schema,
            columns,
            s: Vec::new(),
            y: Vec::new(),
            row_ids: Vec::new(),
            records: 0,
            dropped: 0,
        }
    }

    fn is_missing(&self, v: &str) -> bool {
        v.is_empty() || self.schema.format.missing.iter().any(|m| m == v)
    }

    fn read_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let fmt = &self.schema.format;
        let body: String = text
            .split_inclusive('\n')
            .skip(fmt.skip_rows)
            .collect();
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(fmt.delimiter)
            .has_headers(fmt.has_header)
            .comment(fmt.comment)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(body.as_bytes());

        // Position in the record of each schema column.
        let positions: Vec<usize> = if fmt.has_header {
            let header = reader.headers()?.clone();
            self.schema
                .columns
                .iter()
                .map(|c| {
                    header.iter().position(|h| h == c.name).ok_or_else(|| {
                        Error::Data(format!("{}: header has no column '{}'", path.display(), c.name))
                    })
                })
                .collect::<Result<_>>()?
        } else {
            (0..self.schema.columns.len()).collect()
        };
        let needed = positions.iter().max().map_or(0, |m| m + 1);

        let before = (self.y.len(), self.dropped);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() == 1 && rec.get(0) == Some("") {
                continue;
            }
            if rec.len() < needed {
                return Err(Error::Data(format!(
                    "{}: record {} has {} fields, expected at least {needed}",
                    path.display(),
                    i + 1,
                    rec.len()
                )));
            }
            let id = self.records;
            self.records += 1;
            let field = |k: usize| rec.get(positions[k]).unwrap_or("");
            let used = self.schema.columns.iter().enumerate().filter(|(_, c)| c.role != Role::Drop);
            if used.clone().any(|(k, _)| self.is_missing(field(k))) {
                self.dropped += 1;
                continue;
            }
            // Parse every continuous value before pushing anything.
            let mut numbers = Vec::new();
            for (k, c) in used.clone() {
                if c.role.is_feature() && c.kind == ColumnKind::Continuous {
                    let v: f64 = field(k).parse().map_err(|_| {
                        Error::Data(format!(
                            "{}: record {}: column '{}' is not a number: '{}'",
                            path.display(),
                            i + 1,
                            c.name,
                            field(k)
                        ))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Data(format!("{}: record {}: non-finite '{}'", path.display(), i + 1, c.name)));
                    }
                    numbers.push(v);
                }
            }
            let mut numbers = numbers.into_iter();
            let mut col = 0;
            for (k, c) in used {
                match c.role {
                    Role::Label => self.y.push(self.schema.label_positive.iter().any(|p| p == field(k)) as u8),
                    Role::Sensitive => {
                        self.s.push(self.schema.sensitive_positive.iter().any(|p| p == field(k)) as u8)
                    }
                    Role::Xc | Role::Xd => {
                        match &mut self.columns[col].values {
                            RawValues::Continuous(v) => v.push(numbers.next().expect("parsed above")),
                            RawValues::Categorical(v) => v.push(field(k).to_string()),
                        }
                        col += 1;
                    }
                    Role::Drop => {}
                }
            }
            self.row_ids.push(id);
        }
        info!(
            "{}: kept {} rows, dropped {} with missing values",
            path.display(),
            self.y.len() - before.0,
            self.dropped - before.1
        );
        Ok(())
    }

    fn finish(self) -> RawTable {
        RawTable {
            columns: self.columns,
            s: self.s,
            y: self.y,
            row_ids: self.row_ids,
        }
    }
}
