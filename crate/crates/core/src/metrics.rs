//! Accuracy and group-fairness metrics against the held-out sensitive
//! attribute. All rates are derived from the `(s, y, ŷ)` cell counts, which
//! the report carries verbatim.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability at or above which a prediction counts as positive.
pub const THRESHOLD: f64 = 0.5;

pub fn threshold(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| (p >= THRESHOLD) as u8).collect()
}

/// Row counts indexed as `counts[s][y][y_hat]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts(pub [[[u64; 2]; 2]; 2]);

impl CellCounts {
    pub fn tally(y_hat: &[u8], y: &[u8], s: &[u8]) -> Result<Self> {
        if y_hat.len() != y.len() || y.len() != s.len() {
            return Err(Error::InvalidArgument(format!(
                "length mismatch: y_hat {}, y {}, s {}",
                y_hat.len(),
                y.len(),
                s.len()
            )));
        }
        check_binary("y_hat", y_hat)?;
        check_binary("y", y)?;
        check_binary("s", s)?;
        let mut c = [[[0u64; 2]; 2]; 2];
        for ((&p, &t), &g) in y_hat.iter().zip(y).zip(s) {
            c[g as usize][t as usize][p as usize] += 1;
        }
        Ok(Self(c))
    }

    pub fn get(&self, s: usize, y: usize, y_hat: usize) -> u64 {
        self.0[s][y][y_hat]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().flatten().sum()
    }

    pub fn group(&self, s: usize) -> u64 {
        self.0[s].iter().flatten().sum()
    }

    /// `P(ŷ = 1 | s)`, or `None` for an empty group.
    pub fn positive_rate(&self, s: usize) -> Option<f64> {
        ratio(self.0[s][0][1] + self.0[s][1][1], self.group(s))
    }

    /// `P(ŷ = 1 | y = 0, s)`.
    pub fn fpr(&self, s: usize) -> Option<f64> {
        ratio(self.0[s][0][1], self.0[s][0][0] + self.0[s][0][1])
    }

    /// `P(ŷ = 0 | y = 1, s)`.
    pub fn fnr(&self, s: usize) -> Option<f64> {
        ratio(self.0[s][1][0], self.0[s][1][0] + self.0[s][1][1])
    }

    /// `P(ŷ = 1 | y = 1, s)`.
    pub fn tpr(&self, s: usize) -> Option<f64> {
        ratio(self.0[s][1][1], self.0[s][1][0] + self.0[s][1][1])
    }

    pub fn accuracy(&self) -> Option<f64> {
        let correct: u64 = (0..2).map(|s| self.0[s][0][0] + self.0[s][1][1]).sum();
        ratio(correct, self.total())
    }

    pub fn p_rule(&self) -> Result<f64> {
        match (self.positive_rate(0), self.positive_rate(1)) {
            (Some(r0), Some(r1)) => Ok(rate_ratio(r0, r1)),
            _ => Err(Error::UndefinedMetric("p-rule needs both sensitive groups".into())),
        }
    }

    pub fn mistreatment(&self) -> Mistreatment {
        let delta = |f: fn(&Self, usize) -> Option<f64>| Some((f(self, 1)? - f(self, 0)?).abs());
        Mistreatment {
            delta_fpr: delta(Self::fpr),
            delta_fnr: delta(Self::fnr),
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn rate_ratio(r0: f64, r1: f64) -> f64 {
    if r0 == 0.0 && r1 == 0.0 {
        1.0
    } else if r0 == 0.0 || r1 == 0.0 {
        0.0
    } else {
        (r1 / r0).min(r0 / r1)
    }
}

fn check_binary(what: &str, v: &[u8]) -> Result<()> {
    match v.iter().find(|&&x| x > 1) {
        Some(x) => Err(Error::InvalidArgument(format!("{what} must be 0/1, found {x}"))),
        None => Ok(()),
    }
}

/// `min(r1 / r0, r0 / r1)` with `r_g = P(ŷ = 1 | s = g)`. Two zero rates
/// give 1.
pub fn p_rule(y_hat: &[u8], s: &[u8]) -> Result<f64> {
    let y = vec![0u8; y_hat.len()];
    CellCounts::tally(y_hat, &y, s)?.p_rule()
}

/// Absolute between-group gaps in false positive and false negative rate.
/// A gap is `None` when one of its conditioning cells is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mistreatment {
    pub delta_fpr: Option<f64>,
    pub delta_fnr: Option<f64>,
}

impl Mistreatment {
    pub fn dm(&self) -> Option<f64> {
        Some(self.delta_fpr? + self.delta_fnr?)
    }
}

pub fn disparate_mistreatment(y_hat: &[u8], y: &[u8], s: &[u8]) -> Result<Mistreatment> {
    Ok(CellCounts::tally(y_hat, y, s)?.mistreatment())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub n: u64,
    pub positive_rate: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    pub p_rule: f64,
    pub delta_fpr: Option<f64>,
    pub delta_fnr: Option<f64>,
    pub dm: Option<f64>,
    pub group_0: GroupRates,
    pub group_1: GroupRates,
    /// `counts[s][y][y_hat]`.
    pub counts: CellCounts,
    pub hgr_pred_z: Option<f64>,
}

impl MetricsReport {
    pub fn from_counts(counts: CellCounts) -> Result<Self> {
        let accuracy = counts
            .accuracy()
            .ok_or_else(|| Error::UndefinedMetric("accuracy of zero rows".into()))?;
        let p_rule = counts.p_rule()?;
        let m = counts.mistreatment();
        let group = |s| GroupRates {
            n: counts.group(s),
            positive_rate: counts.positive_rate(s),
            tpr: counts.tpr(s),
            fpr: counts.fpr(s),
            fnr: counts.fnr(s),
        };
        Ok(Self {
            n: counts.total(),
            accuracy,
            p_rule,
            delta_fpr: m.delta_fpr,
            delta_fnr: m.delta_fnr,
            dm: m.dm(),
            group_0: group(0),
            group_1: group(1),
            counts,
            hgr_pred_z: None,
        })
    }

    /// Thresholds `probs` and scores them against `y` and `s`.
    pub fn from_predictions(probs: &[f64], y: &[u8], s: &[u8]) -> Result<Self> {
        Self::from_counts(CellCounts::tally(&threshold(probs), y, s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
