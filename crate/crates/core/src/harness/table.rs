//! Versioned CSV tables and report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const SCHEMA_COLUMN: &str = "schema_version";

pub const RESULT_COLUMNS: &[&str] = &[
    SCHEMA_COLUMN,
    "axis",
    "value",
    "seed",
    "method",
    "num_demos",
    "num_chunks",
    "chunk_budget",
    "delta",
    "ratios",
    "window",
    "full_len",
    "retained_total",
    "mean_context_len",
    "ratio",
    "accuracy",
    "agreement",
    "js_eval",
    "epsilon_hat",
    "gamma",
    "bound",
    "max_local_js",
];

pub const LAYER_COLUMNS: &[&str] = &[SCHEMA_COLUMN, "axis", "value", "seed", "method", "layer", "full_len", "retained"];

pub const ROLE_COLUMNS: &[&str] = &[SCHEMA_COLUMN, "axis", "value", "seed", "method", "layer", "role", "kept", "pruned"];

pub const REPORT_COLUMNS: &[&str] = &[
    SCHEMA_COLUMN,
    "axis",
    "value",
    "method",
    "seeds",
    "accuracy_mean",
    "accuracy_std",
    "ratio_mean",
    "retained_mean",
    "js_eval_mean",
    "js_eval_std",
];

/// Formats with 9 significant digits; identical inputs give identical text.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    if (-4..9).contains(&exponent) {
        let decimals = (8 - exponent).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

pub fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; the schema version is prepended.
    pub fn push(&mut self, cells: Vec<String>) {
        let mut row = Vec::with_capacity(cells.len() + 1);
        row.push(SCHEMA_VERSION.to_string());
        row.extend(cells);
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: &Table) {
        assert_eq!(self.columns, other.columns, "column mismatch");
        self.rows.extend(other.rows.iter().cloned());
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(&self.columns).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table, rejecting files whose schema version differs.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
        let columns: Vec<String> = r.headers().map_err(csv_error)?.iter().map(String::from).collect();
        if columns.first().map(String::as_str) != Some(SCHEMA_COLUMN) {
            return Err(Error::Schema {
                path: path.into(),
                expected: format!("first column `{SCHEMA_COLUMN}`"),
                found: columns.first().cloned().unwrap_or_default(),
            });
        }
        let mut rows = Vec::new();
        for record in r.records() {
            let row: Vec<String> = record.map_err(csv_error)?.iter().map(String::from).collect();
            if row[0] != SCHEMA_VERSION.to_string() {
                return Err(Error::Schema {
                    path: path.into(),
                    expected: SCHEMA_VERSION.to_string(),
                    found: row[0].clone(),
                });
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates result rows over seeds into one row per (axis, value, method),
/// keeping first-appearance order.
pub fn aggregate(results: &[Table]) -> Result<Table> {
    let mut groups: BTreeMap<(usize, String, String, String), Vec<[f64; 4]>> = BTreeMap::new();
    let mut order = 0;
    let mut seen: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for t in results {
        if t.columns.iter().map(String::as_str).ne(RESULT_COLUMNS.iter().copied()) {
            return Err(Error::Format("not a result table".into()));
        }
        let col = |name: &str| t.column(name).expect("result column");
        let (axis, value, method) = (col("axis"), col("value"), col("method"));
        let metrics = [col("accuracy"), col("ratio"), col("retained_total"), col("js_eval")];
        for row in &t.rows {
            let key = (row[axis].clone(), row[value].clone(), row[method].clone());
            let idx = *seen.entry(key.clone()).or_insert_with(|| {
                order += 1;
                order
            });
            let mut vals = [0.0; 4];
            for (v, &c) in vals.iter_mut().zip(&metrics) {
                *v = row[c]
                    .parse()
                    .map_err(|_| Error::Format(format!("non-numeric cell `{}`", row[c])))?;
            }
            groups.entry((idx, key.0, key.1, key.2)).or_default().push(vals);
        }
    }
    let mut out = Table::new(REPORT_COLUMNS);
    for ((_, axis, value, method), vals) in groups {
        let pick = |i: usize| vals.iter().map(|v| v[i]).collect::<Vec<_>>();
        let (acc, acc_sd) = mean_std(&pick(0));
        let (ratio, _) = mean_std(&pick(1));
        let (kept, _) = mean_std(&pick(2));
        let (js, js_sd) = mean_std(&pick(3));
        out.push(vec![
            axis,
            value,
            method,
            vals.len().to_string(),
            fmt_f64(acc),
            fmt_f64(acc_sd),
            fmt_f64(ratio),
            fmt_f64(kept),
            fmt_f64(js),
            fmt_f64(js_sd),
        ]);
    }
    Ok(out)
}

/// Fixed-width text rendering (schema column omitted).
pub fn render(table: &Table) -> String {
    let cols: Vec<usize> = (1..table.columns.len()).collect();
    let widths: Vec<usize> = cols
        .iter()
        .map(|&c| {
            table
                .rows
                .iter()
                .map(|r| r[c].len())
                .chain([table.columns[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut s = String::new();
    let line = |s: &mut String, cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, cols.iter().map(|&c| table.columns[c].as_str()).collect());
    for row in &table.rows {
        line(&mut s, cols.iter().map(|&c| row[c].as_str()).collect());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(1.0), "1");
        assert_eq!(fmt_f64(0.1 + 0.2), "0.3");
        assert_eq!(fmt_f64(std::f64::consts::PI), "3.14159265");
        assert_eq!(fmt_f64(-1234.5678912345), "-1234.56789");
        assert_eq!(fmt_f64(0.000123456789123), "0.000123456789");
        assert_eq!(fmt_f64(1.5e-9), "1.50000000e-9");
        assert_eq!(fmt_f64(2.0e12), "2.00000000e12");
        assert_eq!(fmt_list(&[0.1, 1.0]), "0.1;1");
    }

    #[test]
    fn rejects_other_schema_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = Table::new(LAYER_COLUMNS);
        t.push(["delta", "0.005", "0", "adaptive", "0", "10", "4"].map(String::from).to_vec());
        t.write(&path).unwrap();
        assert_eq!(Table::read(&path).unwrap(), t);

        let text = std::fs::read_to_string(&path).unwrap().replace("\n1,", "\n2,");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Table::read(&path), Err(Error::Schema { .. })));

        std::fs::write(&path, "axis,value\nx,1\n").unwrap();
        assert!(matches!(Table::read(&path), Err(Error::Schema { .. })));
    }

    #[test]
    fn aggregates_over_seeds() {
        let mut t = Table::new(RESULT_COLUMNS);
        for (seed, acc) in [(0, "0.5"), (1, "1")] {
            let mut cells: Vec<String> = vec!["delta".into(), "0.005".into(), seed.to_string(), "adaptive".into()];
            cells.extend(["4", "2", "100", "0.005", "0.1;1", "answer", "40", "60", "15", "0.375"].map(String::from));
            cells.extend([acc, "1", "0.01", "0.1", "2", "0.3", "0.004"].map(String::from));
            t.push(cells);
        }
        let agg = aggregate(&[t]).unwrap();
        assert_eq!(agg.rows.len(), 1);
        let row = &agg.rows[0];
        assert_eq!(row[agg.column("seeds").unwrap()], "2");
        assert_eq!(row[agg.column("accuracy_mean").unwrap()], "0.75");
        assert_eq!(row[agg.column("accuracy_std").unwrap()], "0.25");
    }
}
