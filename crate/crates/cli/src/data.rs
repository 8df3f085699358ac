//! CSV datasets: a header row, a `t` column (0/1), a `y` column and the
//! covariates in the remaining columns, read positionally as `x1..xd`. A
//! column named `pi` (or the requested probability column) is never a covariate.

use std::path::Path;

use cbps_core::design::ObservedSample;

use crate::CliError;

#[derive(Debug)]
pub struct CsvDataset {
    pub sample: ObservedSample,
    /// Original header names of the covariate columns, in `x1..xd` order.
    pub covariate_names: Vec<String>,
    /// Values of the probability column, when one was requested.
    pub pi: Option<Vec<f64>>,
}

fn parse_number(text: &str, row: usize, column: &str) -> Result<f64, CliError> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("row {row}, column `{column}`: `{text}` is not a number")))?;
    if !v.is_finite() {
        return Err(CliError::Usage(format!("row {row}, column `{column}`: value is not finite")));
    }
    Ok(v)
}

pub fn load(path: &Path, pi_column: Option<&str>) -> Result<CsvDataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let t_col = find("t").ok_or_else(|| CliError::Usage("dataset has no `t` column".into()))?;
    let y_col = find("y").ok_or_else(|| CliError::Usage("dataset has no `y` column".into()))?;
    let pi_col = match pi_column {
        Some(name) => Some(find(name).ok_or_else(|| CliError::Usage(format!("dataset has no `{name}` column")))?),
        None => None,
    };
    let skip = pi_col.or_else(|| find("pi"));
    let covariate_cols: Vec<usize> =
        (0..headers.len()).filter(|&c| c != t_col && c != y_col && Some(c) != skip).collect();
    if covariate_cols.is_empty() {
        return Err(CliError::Usage("dataset has no covariate columns".into()));
    }

    let mut covariates = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut pi = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let t = match record[t_col].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(CliError::Usage(format!("row {row}: treatment `{other}` is not 0 or 1"))),
        };
        treatment.push(t);
        outcome.push(parse_number(&record[y_col], row, "y")?);
        if let Some(c) = pi_col {
            pi.push(parse_number(&record[c], row, &headers[c])?);
        }
        for &c in &covariate_cols {
            covariates.push(parse_number(&record[c], row, &headers[c])?);
        }
    }
    let sample = ObservedSample::from_row_major(covariates, covariate_cols.len(), treatment, outcome)?;
    Ok(CsvDataset {
        sample,
        covariate_names: covariate_cols.iter().map(|&c| headers[c].to_string()).collect(),
        pi: pi_col.map(|_| pi),
    })
}

/// Writes a sample (and optionally true probabilities) in the format `load` reads.
pub fn write_sample(path: &Path, sample: &ObservedSample, pi: Option<&[f64]>) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Usage(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["t".to_string(), "y".to_string()];
    if pi.is_some() {
        header.push("pi".into());
    }
    header.extend((1..=sample.d()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(io)?;
    for i in 0..sample.n() {
        let mut rec = vec![format!("{}", sample.treatment()[i] as u8), format!("{:?}", sample.outcome()[i])];
        if let Some(p) = pi {
            rec.push(format!("{:?}", p[i]));
        }
        rec.extend(sample.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}
