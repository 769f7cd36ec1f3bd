use std::path::Path;

use lossylqr_core::SystemSpec;
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct SystemSpecFile {
    #[serde(default)]
    name: Option<String>,
    A: Vec<Vec<f64>>,
    B: Vec<Vec<f64>>,
    Q: Vec<Vec<f64>>,
    R: Vec<Vec<f64>>,
}

pub struct LoadedSpec {
    pub name: Option<String>,
    pub system: SystemSpec,
}

fn to_matrix(label: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(CliError::Input(format!("matrix {label} is empty")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(CliError::Input(format!(
            "matrix {label}: row {} has {} entries, expected {cols}",
            i + 1,
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
}

pub fn parse(text: &str) -> Result<LoadedSpec, CliError> {
    let file: SystemSpecFile = serde_json::from_str(text).map_err(|e| {
        CliError::Input(format!(
            "spec parse error at line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    let system = SystemSpec::new(
        to_matrix("A", &file.A)?,
        to_matrix("B", &file.B)?,
        to_matrix("Q", &file.Q)?,
        to_matrix("R", &file.R)?,
    )?;
    Ok(LoadedSpec {
        name: file.name,
        system,
    })
}

pub fn load(path: &Path) -> Result<LoadedSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}
