use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::scenario::{coef_name, Scenario};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;

pub const RECORDS_SCHEMA_VERSION: u32 = 1;

/// One estimator on one simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub t: usize,
    pub rep: usize,
    pub estimator: EstimatorKind,
    /// False when estimation failed outright; the numeric fields are then NaN.
    pub ok: bool,
    pub converged: bool,
    pub iterations: usize,
    pub loss: f64,
    /// Normalized estimate, row-major.
    pub b_hat: Vec<f64>,
    pub variances: Vec<f64>,
    /// Coverage and rejection flags aligned with [`Scenario::flag_columns`];
    /// `None` when the covariance was unavailable.
    pub flags: Vec<Option<bool>>,
}

impl ReplicationRecord {
    pub fn failed(t: usize, rep: usize, estimator: EstimatorKind, n: usize, n_flags: usize) -> Self {
        Self {
            t,
            rep,
            estimator,
            ok: false,
            converged: false,
            iterations: 0,
            loss: f64::NAN,
            b_hat: vec![f64::NAN; n * n],
            variances: vec![f64::NAN; n],
            flags: vec![None; n_flags],
        }
    }

    /// 1-based entry of the normalized estimate.
    pub fn coef(&self, row: usize, col: usize) -> f64 {
        let n = self.variances.len();
        self.b_hat[(row - 1) * n + (col - 1)]
    }
}

/// Records of one scenario together with the column layout.
#[derive(Debug, Clone)]
pub struct RecordSet {
    pub scenario: String,
    pub n: usize,
    pub flag_columns: Vec<String>,
    /// Order of estimators within a `(T, rep)` group.
    pub estimators: Vec<EstimatorKind>,
    pub sample_sizes: Vec<usize>,
    pub coefficients: Vec<[usize; 2]>,
    pub records: Vec<ReplicationRecord>,
}

impl RecordSet {
    pub fn empty(sc: &Scenario) -> Self {
        Self {
            scenario: sc.name.clone(),
            n: sc.dim(),
            flag_columns: sc.flag_columns(),
            estimators: sc.estimators.clone(),
            sample_sizes: sc.sample_sizes.clone(),
            coefficients: sc.coefficients.clone(),
            records: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["scenario", "T", "rep", "estimator", "status", "converged", "iterations", "loss"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for r in 1..=self.n {
            for c in 1..=self.n {
                h.push(coef_name(r, c, self.n));
            }
        }
        for i in 1..=self.n {
            h.push(format!("var_e{i}"));
        }
        h.extend(self.flag_columns.iter().cloned());
        h
    }

    /// Canonical order: sample size as listed, replication, estimator as listed.
    pub fn sort(&mut self) {
        let t_pos = |t: usize| self.sample_sizes.iter().position(|&x| x == t).unwrap_or(usize::MAX);
        let e_pos = |e: EstimatorKind| self.estimators.iter().position(|&x| x == e).unwrap_or(usize::MAX);
        let mut recs = std::mem::take(&mut self.records);
        recs.sort_by_key(|r| (t_pos(r.t), r.rep, e_pos(r.estimator)));
        self.records = recs;
    }

    /// Index of a flag column by name.
    pub fn flag_index(&self, name: &str) -> Option<usize> {
        self.flag_columns.iter().position(|c| c == name)
    }

    pub fn row(&self, r: &ReplicationRecord) -> Vec<String> {
        let mut row = vec![
            self.scenario.clone(),
            r.t.to_string(),
            r.rep.to_string(),
            r.estimator.as_str().to_string(),
            if r.ok { "ok" } else { "failed" }.to_string(),
            bool01(r.converged),
            r.iterations.to_string(),
            float(r.loss),
        ];
        row.extend(r.b_hat.iter().map(|&v| float(v)));
        row.extend(r.variances.iter().map(|&v| float(v)));
        row.extend(r.flags.iter().map(|f| f.map(bool01).unwrap_or_default()));
        row
    }

    fn parse_row(&self, rec: &csv::StringRecord, line: usize) -> Result<ReplicationRecord> {
        let bad = |message: String| Error::Input { line, message };
        let n = self.n;
        if rec.len() != 8 + n * n + n + self.flag_columns.len() {
            return Err(bad(format!("expected {} fields, found {}", 8 + n * n + n + self.flag_columns.len(), rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| bad(format!("field {} ('{}') is not a number", i + 1, &rec[i])))
        };
        let int = |i: usize| -> Result<usize> {
            rec[i].parse::<usize>().map_err(|_| bad(format!("field {} ('{}') is not an integer", i + 1, &rec[i])))
        };
        let flag = |i: usize| -> Result<Option<bool>> {
            match &rec[i] {
                "" => Ok(None),
                "1" => Ok(Some(true)),
                "0" => Ok(Some(false)),
                other => Err(bad(format!("field {} ('{other}') is not 0, 1 or empty", i + 1))),
            }
        };
        if rec[0] != *self.scenario {
            return Err(bad(format!("record belongs to scenario '{}'", &rec[0])));
        }
        let estimator: EstimatorKind = rec[3].parse().map_err(|e: Error| bad(e.to_string()))?;
        let ok = match &rec[4] {
            "ok" => true,
            "failed" => false,
            other => return Err(bad(format!("unknown status '{other}'"))),
        };
        Ok(ReplicationRecord {
            t: int(1)?,
            rep: int(2)?,
            estimator,
            ok,
            converged: flag(5)?.unwrap_or(false),
            iterations: int(6)?,
            loss: num(7)?,
            b_hat: (8..8 + n * n).map(num).collect::<Result<_>>()?,
            variances: (8 + n * n..8 + n * n + n).map(num).collect::<Result<_>>()?,
            flags: (8 + n * n + n..rec.len()).map(flag).collect::<Result<_>>()?,
        })
    }
}

fn bool01(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// Shortest representation that parses back to the same bits.
fn float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}

pub fn write_records<W: Write>(set: &RecordSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(set.header())?;
    for r in &set.records {
        w.write_record(set.row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a records file laid out for `template`; the header must match exactly.
pub fn read_records<R: Read>(template: &RecordSet, input: R) -> Result<RecordSet> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
    if header != template.header() {
        return Err(Error::Input { line: 1, message: "records header does not match the scenario".into() });
    }
    let mut set = template.clone();
    set.records.clear();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Input { line, message: e.to_string() })?;
        set.records.push(set.parse_row(&rec, line)?);
    }
    Ok(set)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> RecordSet {
        RecordSet {
            scenario: "s".into(),
            n: 2,
            flag_columns: vec!["cover_b21_smi".into(), "reject_full_si".into()],
            estimators: vec![EstimatorKind::GmmStar, EstimatorKind::Csue2],
            sample_sizes: vec![300, 100],
            coefficients: vec![[2, 1]],
            records: Vec::new(),
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let mut s = set();
        s.records.push(ReplicationRecord {
            t: 300,
            rep: 0,
            estimator: EstimatorKind::Csue2,
            ok: true,
            converged: true,
            iterations: 41,
            loss: 0.1 + 0.2,
            b_hat: vec![10.000000000000002, 1e-300, 5.0, -9.75],
            variances: vec![0.875, 1.0 / 3.0],
            flags: vec![Some(true), None],
        });
        s.records.push(ReplicationRecord::failed(100, 3, EstimatorKind::GmmStar, 2, 2));
        let mut buf = Vec::new();
        write_records(&s, &mut buf).unwrap();
        let back = read_records(&set(), buf.as_slice()).unwrap();
        assert_eq!(back.records[0], s.records[0]);
        assert!(!back.records[1].ok && back.records[1].loss.is_nan());
        let mut again = Vec::new();
        write_records(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn sorts_canonically() {
        let mut s = set();
        for (t, rep, e) in [(100, 0, EstimatorKind::GmmStar), (300, 1, EstimatorKind::GmmStar), (300, 0, EstimatorKind::Csue2), (300, 0, EstimatorKind::GmmStar)] {
            s.records.push(ReplicationRecord::failed(t, rep, e, 2, 2));
        }
        s.sort();
        let keys: Vec<_> = s.records.iter().map(|r| (r.t, r.rep, r.estimator)).collect();
        assert_eq!(
            keys,
            vec![(300, 0, EstimatorKind::GmmStar), (300, 0, EstimatorKind::Csue2), (300, 1, EstimatorKind::GmmStar), (100, 0, EstimatorKind::GmmStar)]
        );
    }

    #[test]
    fn reports_line_of_malformed_row() {
        let mut buf = Vec::new();
        write_records(&set(), &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("s,300,0,gmm_star,ok,1,3,abc,1,0,0,1,1,1,,\n");
        match read_records(&set(), text.as_bytes()) {
            Err(Error::Input { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
