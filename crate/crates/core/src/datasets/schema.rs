use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "x_c")]
    Xc,
    #[serde(rename = "x_d")]
    Xd,
    #[serde(rename = "sensitive")]
    Sensitive,
    #[serde(rename = "label")]
    Label,
    #[serde(rename = "drop")]
    Drop,
}

impl Role {
    pub fn is_feature(self) -> bool {
        matches!(self, Role::Xc | Role::Xd)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Xc => "x_c",
            Role::Xd => "x_d",
            Role::Sensitive => "sensitive",
            Role::Label => "label",
            Role::Drop => "drop",
        })
    }
}

/// Applied to a continuous value before standardization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    Log1p,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::None => x,
            Transform::Log1p => x.ln_1p(),
        }
    }

    pub fn invert(self, x: f64) -> f64 {
        match self {
            Transform::None => x,
            Transform::Log1p => x.exp_m1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: Role,
    pub transform: Transform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvFormat {
    pub delimiter: u8,
    pub has_header: bool,
    pub comment: Option<u8>,
    /// Tokens treated as missing, in addition to the empty string.
    pub missing: Vec<String>,
    /// Lines skipped before the header (or the first record).
    pub skip_rows: usize,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: true,
            comment: None,
            missing: Vec::new(),
            skip_rows: 0,
        }
    }
}

/// Column layout and roles of a tabular source.
///
/// Parsed from a line-oriented `key = value` file; `#` starts a comment line.
/// Keys:
///
/// ```text
/// name = <text>
/// format.delimiter = <one character, or "tab">      (default ",")
/// format.header = true|false                        (default true)
/// format.comment = <one character>                  (lines starting with it are skipped)
/// format.missing = <token>[;<token>...]             (empty fields are always missing)
/// format.skip_rows = <count>                        (default 0)
/// columns = <name>,<name>,...                       (file order)
/// column.<name>.kind = continuous|categorical
/// column.<name>.role = x_c|x_d|sensitive|label|drop
/// column.<name>.transform = none|log1p              (continuous only)
/// label.positive = <value>[;<value>...]
/// sensitive.positive = <value>[;<value>...]
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct SchemaSpec {
    pub name: String,
    pub format: CsvFormat,
    pub columns: Vec<ColumnSpec>,
    pub label_positive: Vec<String>,
    pub sensitive_positive: Vec<String>,
}

const ADULT: &str = include_str!("../../schemas/adult.schema");
const DEFAULT: &str = include_str!("../../schemas/default.schema");

impl SchemaSpec {
    /// Schemas shipped with the library: `adult` and `default`.
    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "adult" => ADULT.parse(),
            "default" => DEFAULT.parse(),
            other => Err(Error::Schema(format!("no bundled schema named '{other}'"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn label_column(&self) -> &ColumnSpec {
        self.columns.iter().find(|c| c.role == Role::Label).expect("validated")
    }

    pub fn sensitive_column(&self) -> &ColumnSpec {
        self.columns.iter().find(|c| c.role == Role::Sensitive).expect("validated")
    }

    pub fn features(&self, role: Role) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(move |c| c.role == role)
    }

    fn validate(&self) -> Result<()> {
        let count = |r: Role| self.columns.iter().filter(|c| c.role == r).count();
        for (role, what) in [(Role::Label, "label"), (Role::Sensitive, "sensitive")] {
            if count(role) != 1 {
                return Err(Error::Schema(format!("expected exactly one {what} column, found {}", count(role))));
            }
        }
        for role in [Role::Xc, Role::Xd] {
            if count(role) == 0 {
                return Err(Error::Schema(format!("at least one {role} column is required")));
            }
        }
        if self.label_positive.is_empty() {
            return Err(Error::Schema("label.positive is required".into()));
        }
        if self.sensitive_positive.is_empty() {
            return Err(Error::Schema("sensitive.positive is required".into()));
        }
        Ok(())
    }
}

fn split_list(v: &str, sep: char) -> Vec<String> {
    v.split(sep).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn single_byte(key: &str, v: &str) -> Result<u8> {
    if v == "tab" {
        return Ok(b'\t');
    }
    match v.as_bytes() {
        [b] => Ok(*b),
        _ => Err(Error::Schema(format!("{key} must be a single character, got '{v}'"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Schema(format!("{key} must be true or false, got '{v}'"))),
    }
}

#[derive(Default)]
struct PartialColumn {
    kind: Option<ColumnKind>,
    role: Option<Role>,
    transform: Option<Transform>,
}

impl FromStr for SchemaSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut name = String::new();
        let mut format = CsvFormat::default();
        let mut order: Option<Vec<String>> = None;
        let mut cols: BTreeMap<String, PartialColumn> = BTreeMap::new();
        let mut label_positive = Vec::new();
        let mut sensitive_positive = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Schema(format!("line {}: expected 'key = value'", lineno + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Schema(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            match key {
                "name" => name = value.to_string(),
                "format.delimiter" => format.delimiter = single_byte(key, value)?,
                "format.header" => format.has_header = parse_bool(key, value)?,
                "format.comment" => format.comment = Some(single_byte(key, value)?),
                "format.missing" => format.missing = split_list(value, ';'),
                "format.skip_rows" => {
                    format.skip_rows = value
                        .parse()
                        .map_err(|_| Error::Schema(format!("{key} must be a count, got '{value}'")))?
                }
                "columns" => order = Some(split_list(value, ',')),
                "label.positive" => label_positive = split_list(value, ';'),
                "sensitive.positive" => sensitive_positive = split_list(value, ';'),
                _ => {
                    let Some(rest) = key.strip_prefix("column.") else {
                        return Err(Error::Schema(format!("line {}: unknown key '{key}'", lineno + 1)));
                    };
                    let Some((col, attr)) = rest.rsplit_once('.') else {
                        return Err(Error::Schema(format!("line {}: malformed key '{key}'", lineno + 1)));
                    };
                    let entry = cols.entry(col.to_string()).or_default();
                    match attr {
                        "kind" => {
                            entry.kind = Some(match value {
                                "continuous" => ColumnKind::Continuous,
                                "categorical" => ColumnKind::Categorical,
                                _ => return Err(Error::Schema(format!("{key}: unknown kind '{value}'"))),
                            })
                        }
                        "role" => {
                            entry.role = Some(match value {
                                "x_c" => Role::Xc,
                                "x_d" => Role::Xd,
                                "sensitive" => Role::Sensitive,
                                "label" => Role::Label,
                                "drop" => Role::Drop,
                                _ => return Err(Error::Schema(format!("{key}: unknown role '{value}'"))),
                            })
                        }
                        "transform" => {
                            entry.transform = Some(match value {
                                "none" => Transform::None,
                                "log1p" => Transform::Log1p,
                                _ => return Err(Error::Schema(format!("{key}: unknown transform '{value}'"))),
                            })
                        }
                        _ => return Err(Error::Schema(format!("line {}: unknown key '{key}'", lineno + 1))),
                    }
                }
            }
        }

        let order = order.ok_or_else(|| Error::Schema("missing 'columns' key".into()))?;
        let mut columns = Vec::with_capacity(order.len());
        let mut listed = HashSet::new();
        for col in &order {
            if !listed.insert(col.as_str()) {
                return Err(Error::Schema(format!("column '{col}' listed twice")));
            }
            let p = cols.remove(col).unwrap_or_default();
            let role = p
                .role
                .ok_or_else(|| Error::Schema(format!("column '{col}' has no role")))?;
            let kind = match (p.kind, role) {
                (Some(k), _) => k,
                (None, Role::Drop) => ColumnKind::Categorical,
                (None, _) => return Err(Error::Schema(format!("column '{col}' has no kind"))),
            };
            let transform = p.transform.unwrap_or_default();
            if transform != Transform::None && kind != ColumnKind::Continuous {
                return Err(Error::Schema(format!("column '{col}': transforms apply to continuous columns only")));
            }
            if kind == ColumnKind::Continuous && matches!(role, Role::Label | Role::Sensitive) {
                return Err(Error::Schema(format!("column '{col}': {role} columns must be categorical")));
            }
            columns.push(ColumnSpec {
                name: col.clone(),
                kind,
                role,
                transform,
            });
        }
        if let Some(extra) = cols.keys().next() {
            return Err(Error::Schema(format!("column '{extra}' is configured but not listed in 'columns'")));
        }
        let spec = SchemaSpec {
            name,
            format,
            columns,
            label_positive,
            sensitive_positive,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
        columns = a, b, s, y
        column.a.kind = continuous
        column.a.role = x_c
        column.b.kind = categorical
        column.b.role = x_d
        column.s.kind = categorical
        column.s.role = sensitive
        column.y.kind = categorical
        column.y.role = label
        label.positive = 1
        sensitive.positive = m
    ";

    #[test]
    fn parses_minimal_schema() {
        let s: SchemaSpec = MINIMAL.parse().unwrap();
        assert_eq!(s.columns.len(), 4);
        assert_eq!(s.label_column().name, "y");
        assert_eq!(s.sensitive_positive, vec!["m".to_string()]);
        assert!(s.format.has_header);
    }

    #[test]
    fn rejects_structural_errors() {
        let two_labels = MINIMAL.replace("column.s.role = sensitive", "column.s.role = label");
        assert!(two_labels.parse::<SchemaSpec>().is_err());
        let no_xd = MINIMAL.replace("column.b.role = x_d", "column.b.role = x_c");
        assert!(no_xd.parse::<SchemaSpec>().is_err());
        let unknown = format!("{MINIMAL}\nformat.quote = \"");
        assert!(unknown.parse::<SchemaSpec>().is_err());
        let unlisted = format!("{MINIMAL}\ncolumn.z.role = drop");
        assert!(unlisted.parse::<SchemaSpec>().is_err());
        let dup = format!("{MINIMAL}\nlabel.positive = 0");
        assert!(dup.parse::<SchemaSpec>().is_err());
    }

    #[test]
    fn bundled_schemas_parse() {
        let adult = SchemaSpec::bundled("adult").unwrap();
        let xc: Vec<_> = adult.features(Role::Xc).map(|c| c.name.as_str()).collect();
        assert_eq!(xc, ["age", "race", "native-country"]);
        assert_eq!(adult.sensitive_column().name, "sex");
        assert_eq!(adult.column("fnlwgt").unwrap().role, Role::Drop);
        assert_eq!(adult.format.comment, Some(b'|'));
        let default = SchemaSpec::bundled("default").unwrap();
        let xc: Vec<_> = default.features(Role::Xc).map(|c| c.name.as_str()).collect();
        assert_eq!(xc, ["AGE"]);
        assert_eq!(default.label_column().name, "default payment next month");
    }
}
