//! CSV schemas: train = `y,x1,...,xd`; test = `x1,...,xd`; hidden = `y`.
//! Comma-separated, period decimal, UTF-8, LF line endings. Floats are written
//! with 17 significant digits so a simulate → fit round trip is lossless.

use anyhow::{bail, Context, Result};
use driftfit::datamodel::{LabeledDataset, UnlabeledDataset};
use std::path::Path;

pub fn format_g17(v: f64) -> String {
    driftfit::simbench::format_g17(v)
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let header: Vec<String> = reader
        .headers()
        .context("missing header row")?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("bad CSV record at data row {}", line + 1))?;
        if record.len() != header.len() {
            bail!(
                "row {} has {} fields, header has {}",
                line + 1,
                record.len(),
                header.len()
            );
        }
        let row: Vec<f64> = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field.parse::<f64>().with_context(|| {
                    format!("non-numeric value '{field}' at row {}, column {}", line + 1, c + 1)
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok((header, rows))
}

fn check_covariate_header(names: &[String], offset: usize) -> Result<()> {
    for (i, name) in names.iter().enumerate() {
        let expected = format!("x{}", i + 1);
        if !name.eq_ignore_ascii_case(&expected) {
            bail!(
                "expected covariate column '{}' at position {}, found '{}'",
                expected,
                offset + i + 1,
                name
            );
        }
    }
    Ok(())
}

/// Read a labeled dataset from `y,x1,...,xd`.
pub fn read_labeled(path: &Path) -> Result<LabeledDataset> {
    let (header, rows) = read_records(path)?;
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("y") {
        bail!("train CSV must have header 'y,x1,...,xd', found '{}'", header.join(","));
    }
    check_covariate_header(&header[1..], 1)?;
    let n = rows.len();
    let d = header.len() - 1;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for row in rows {
        y.push(row[0]);
        x.extend_from_slice(&row[1..]);
    }
    Ok(LabeledDataset::new(x, y, n, d)?)
}

/// Read an unlabeled dataset from `x1,...,xd`.
pub fn read_unlabeled(path: &Path) -> Result<UnlabeledDataset> {
    let (header, rows) = read_records(path)?;
    check_covariate_header(&header, 0)?;
    let m = rows.len();
    let d = header.len();
    let mut x = Vec::with_capacity(m * d);
    for row in rows {
        x.extend_from_slice(&row);
    }
    Ok(UnlabeledDataset::new(x, m, d)?)
}

pub fn labeled_csv(data: &LabeledDataset) -> String {
    let mut out = String::from("y");
    for j in 1..=data.dim() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&format_g17(data.y()[i]));
        for v in data.row(i) {
            out.push(',');
            out.push_str(&format_g17(*v));
        }
        out.push('\n');
    }
    out
}

pub fn unlabeled_csv(data: &UnlabeledDataset) -> String {
    let mut out = (1..=data.dim()).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..data.m() {
        let row: Vec<String> = data.row(i).iter().map(|v| format_g17(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn hidden_csv(y: &[f64]) -> String {
    let mut out = String::from("y\n");
    for v in y {
        out.push_str(&format_g17(*v));
        out.push('\n');
    }
    out
}
