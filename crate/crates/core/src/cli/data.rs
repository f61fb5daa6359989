use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{at_path, Error, Result};

/// Reads a headed, comma-separated numeric table into a `T x n` matrix.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let file = std::fs::File::open(path).map_err(at_path(path))?;
    let mut rd = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| Error::Input { line: 1, message: e.to_string() })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let n = header.len();
    if n == 0 || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Input { line: 1, message: "missing header row".into() });
    }
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Input { line, message: e.to_string() }
        })?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != n {
            return Err(Error::Input { line, message: format!("expected {n} fields, found {}", rec.len()) });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Input {
                line,
                message: format!("column '{}': '{}' is not a number", header[j], field),
            })?;
            if !v.is_finite() {
                return Err(Error::Input { line, message: format!("column '{}': non-finite value", header[j]) });
            }
            flat.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Input { line: 2, message: "no data rows".into() });
    }
    Ok((header, DMatrix::from_row_slice(rows, n, &flat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_numbers() {
        let f = file("a,b\n1,2\n3.5,-4e-1\n");
        let (h, m) = read_matrix_csv(f.path()).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.5, -0.4]));
    }

    #[test]
    fn reports_line_numbers() {
        let f = file("a,b\n1,2\n3,x\n");
        assert!(matches!(read_matrix_csv(f.path()), Err(Error::Input { line: 3, .. })));
        let f = file("a,b\n1,2\n3,4\n5\n");
        assert!(matches!(read_matrix_csv(f.path()), Err(Error::Input { line: 4, .. })));
        let f = file("a,b\n");
        assert!(matches!(read_matrix_csv(f.path()), Err(Error::Input { .. })));
    }
}
