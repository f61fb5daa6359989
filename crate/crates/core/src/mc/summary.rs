use std::io::Write;

use super::record::{RecordSet, ReplicationRecord};
use super::scenario::coef_name;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SummaryKind {
    /// Mean, 10% and 90% quantiles of each innovation's sample variance.
    VarianceQuantiles,
    /// Mean, median, IQR and sd of selected coefficients.
    CoefStats,
    /// Percentage of confidence intervals containing the true coefficient.
    Coverage,
    /// Percentage of Wald rejections per test.
    Rejection,
    /// Rejection percentage of single-coefficient tests over a value grid.
    PowerCurve,
}

impl SummaryKind {
    pub const ALL: [SummaryKind; 5] =
        [Self::VarianceQuantiles, Self::CoefStats, Self::Coverage, Self::Rejection, Self::PowerCurve];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::VarianceQuantiles => "variance_quantiles",
            Self::CoefStats => "coef_stats",
            Self::Coverage => "coverage",
            Self::Rejection => "rejection",
            Self::PowerCurve => "power_curve",
        }
    }
}

impl std::str::FromStr for SummaryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown summary kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub kind: SummaryKind,
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub rows: Vec<(Vec<String>, Vec<f64>)>,
}

impl SummaryTable {
    fn new(kind: SummaryKind, keys: &[&str], values: &[&str]) -> Self {
        Self {
            kind,
            key_columns: keys.iter().map(|s| s.to_string()).collect(),
            value_columns: values.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Value in `column` of the row whose keys equal `keys`.
    pub fn get(&self, keys: &[&str], column: &str) -> Option<f64> {
        let j = self.value_columns.iter().position(|c| c == column)?;
        self.rows
            .iter()
            .find(|(k, _)| k.len() == keys.len() && k.iter().zip(keys).all(|(a, b)| a == b))
            .map(|(_, v)| v[j])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.key_columns.iter().chain(&self.value_columns))?;
        for (k, v) in &self.rows {
            let vals = v.iter().map(|x| if x.is_nan() { "NaN".to_string() } else { format!("{x:?}") });
            w.write_record(k.iter().cloned().chain(vals))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and non-empty.
pub(crate) fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_finite(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn percent(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        f64::NAN
    } else {
        100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
    }
}

/// `cover_<coef>_<basis>` -> (coef, basis), and so on.
fn split_flag<'a>(name: &'a str, prefix: &str) -> Option<(&'a str, &'a str)> {
    name.strip_prefix(prefix)?.rsplit_once('_')
}

/// Aggregates records into the table layout of `kind`, grouped by estimator and sample size.
pub fn summarize(set: &RecordSet, kind: SummaryKind) -> Result<SummaryTable> {
    if set.records.is_empty() {
        return Err(Error::InvalidArgument("no records to summarize".into()));
    }
    let groups: Vec<(String, usize, Vec<&ReplicationRecord>)> = set
        .estimators
        .iter()
        .flat_map(|&e| set.sample_sizes.iter().map(move |&t| (e, t)))
        .map(|(e, t)| {
            let rs: Vec<_> = set.records.iter().filter(|r| r.estimator == e && r.t == t && r.ok).collect();
            (e.as_str().to_string(), t, rs)
        })
        .collect();
    let flag_values = |rs: &[&ReplicationRecord], j: usize| -> Vec<bool> {
        rs.iter().filter_map(|r| r.flags[j]).collect()
    };

    let table = match kind {
        SummaryKind::VarianceQuantiles => {
            let mut tab = SummaryTable::new(kind, &["estimator", "T", "innovation"], &["mean", "q10", "q90", "count"]);
            for (e, t, rs) in &groups {
                for i in 0..set.n {
                    let v = sorted_finite(rs.iter().map(|r| r.variances[i]));
                    if v.is_empty() {
                        continue;
                    }
                    tab.rows.push((
                        vec![e.clone(), t.to_string(), format!("e{}", i + 1)],
                        vec![mean(&v), quantile(&v, 0.1), quantile(&v, 0.9), v.len() as f64],
                    ));
                }
            }
            tab
        }
        SummaryKind::CoefStats => {
            let mut tab =
                SummaryTable::new(kind, &["estimator", "T", "coefficient"], &["mean", "median", "iqr", "sd", "count"]);
            let coefs: Vec<[usize; 2]> = if set.coefficients.is_empty() {
                (1..=set.n).flat_map(|r| (1..=set.n).map(move |c| [r, c])).collect()
            } else {
                set.coefficients.clone()
            };
            for (e, t, rs) in &groups {
                for [r, c] in &coefs {
                    let v = sorted_finite(rs.iter().map(|rec| rec.coef(*r, *c)));
                    if v.is_empty() {
                        continue;
                    }
                    tab.rows.push((
                        vec![e.clone(), t.to_string(), coef_name(*r, *c, set.n)],
                        vec![
                            mean(&v),
                            quantile(&v, 0.5),
                            quantile(&v, 0.75) - quantile(&v, 0.25),
                            sd(&v),
                            v.len() as f64,
                        ],
                    ));
                }
            }
            tab
        }
        SummaryKind::Coverage | SummaryKind::Rejection => {
            let (prefix, label, value) = if kind == SummaryKind::Coverage {
                ("cover_", "coefficient", "coverage_pct")
            } else {
                ("reject_", "test", "rejection_pct")
            };
            let mut tab = SummaryTable::new(kind, &["estimator", "T", label, "basis"], &[value, "count"]);
            for (e, t, rs) in &groups {
                for (j, name) in set.flag_columns.iter().enumerate() {
                    if let Some((what, basis)) = split_flag(name, prefix) {
                        let f = flag_values(rs, j);
                        tab.rows.push((
                            vec![e.clone(), t.to_string(), what.to_string(), basis.to_string()],
                            vec![percent(&f), f.len() as f64],
                        ));
                    }
                }
            }
            tab
        }
        SummaryKind::PowerCurve => {
            let mut tab =
                SummaryTable::new(kind, &["estimator", "T", "coefficient", "basis", "value"], &["rejection_pct", "count"]);
            for (e, t, rs) in &groups {
                let mut cols: Vec<(String, String, String, usize)> = set
                    .flag_columns
                    .iter()
                    .enumerate()
                    .filter_map(|(j, name)| {
                        let (rest, basis) = split_flag(name, "power_")?;
                        let (coef, value) = rest.rsplit_once('_')?;
                        Some((coef.to_string(), basis.to_string(), value.to_string(), j))
                    })
                    .collect();
                // group by basis, keep the grid order within each
                cols.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
                for (coef, basis, value, j) in cols {
                    let f = flag_values(rs, j);
                    tab.rows.push((vec![e.clone(), t.to_string(), coef, basis, value], vec![percent(&f), f.len() as f64]));
                }
            }
            tab
        }
    };
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::EstimatorKind;

    fn set(records: Vec<ReplicationRecord>) -> RecordSet {
        RecordSet {
            scenario: "s".into(),
            n: 2,
            flag_columns: vec![
                "cover_b21_smi".into(),
                "reject_full_smi".into(),
                "power_b21_4_smi".into(),
                "power_b21_5_smi".into(),
            ],
            estimators: vec![EstimatorKind::Csue2],
            sample_sizes: vec![300],
            coefficients: vec![[2, 1]],
            records,
        }
    }

    fn rec(rep: usize, b21: f64, flags: [Option<bool>; 4]) -> ReplicationRecord {
        ReplicationRecord {
            t: 300,
            rep,
            estimator: EstimatorKind::Csue2,
            ok: true,
            converged: true,
            iterations: 10,
            loss: 0.0,
            b_hat: vec![10.0, 0.0, b21, 10.0],
            variances: vec![1.0, 0.5 + rep as f64],
            flags: flags.to_vec(),
        }
    }

    #[test]
    fn identical_replications_have_zero_spread() {
        let s = set((0..5).map(|i| rec(i, 5.0, [Some(true); 4])).collect());
        let c = summarize(&s, SummaryKind::CoefStats).unwrap();
        assert_eq!(c.get(&["csue2", "300", "b21"], "iqr"), Some(0.0));
        assert_eq!(c.get(&["csue2", "300", "b21"], "sd"), Some(0.0));
        assert_eq!(c.get(&["csue2", "300", "b21"], "mean"), Some(5.0));
    }

    #[test]
    fn single_record_is_well_formed() {
        let s = set(vec![rec(0, 4.0, [Some(false), None, Some(true), Some(false)])]);
        for k in SummaryKind::ALL {
            let t = summarize(&s, k).unwrap();
            assert!(!t.rows.is_empty());
            assert!(t.rows.iter().all(|(k, v)| k.len() == t.key_columns.len() && v.len() == t.value_columns.len()));
        }
        let r = summarize(&s, SummaryKind::Rejection).unwrap();
        assert!(r.get(&["csue2", "300", "full", "smi"], "rejection_pct").unwrap().is_nan());
        assert_eq!(r.get(&["csue2", "300", "full", "smi"], "count"), Some(0.0));
    }

    #[test]
    fn rates_and_quantiles() {
        let flags = |i: usize| [Some(i < 3), Some(i == 0), Some(true), Some(i % 2 == 0)];
        let s = set((0..4).map(|i| rec(i, i as f64, flags(i))).collect());
        let cov = summarize(&s, SummaryKind::Coverage).unwrap();
        assert_eq!(cov.get(&["csue2", "300", "b21", "smi"], "coverage_pct"), Some(75.0));
        let p = summarize(&s, SummaryKind::PowerCurve).unwrap();
        assert_eq!(p.get(&["csue2", "300", "b21", "smi", "4"], "rejection_pct"), Some(100.0));
        assert_eq!(p.get(&["csue2", "300", "b21", "smi", "5"], "rejection_pct"), Some(50.0));
        let v = summarize(&s, SummaryKind::VarianceQuantiles).unwrap();
        // variances of e2 are 0.5, 1.5, 2.5, 3.5
        assert!((v.get(&["csue2", "300", "e2"], "q10").unwrap() - 0.8).abs() < 1e-12);
        assert!((v.get(&["csue2", "300", "e2"], "q90").unwrap() - 3.2).abs() < 1e-12);
        let c = summarize(&s, SummaryKind::CoefStats).unwrap();
        assert!((c.get(&["csue2", "300", "b21"], "iqr").unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(summarize(&set(vec![]), SummaryKind::Coverage).is_err());
    }

    #[test]
    fn quantile_matches_type_7() {
        let v = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 10.0);
        assert!((quantile(&v, 0.9) - 7.6).abs() < 1e-12);
    }
}
