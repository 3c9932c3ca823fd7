//! Fréchet distance between two sets of feature vectors stored as CSV,
//! one vector per row, no header.

use std::path::Path;

use hydra_core::metrics::{frechet_gaussian, gaussian_moments};
use hydra_core::Tensor;

use crate::CliError;

pub fn read_features(path: &Path) -> Result<Tensor<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(CliError::Usage(format!(
                "{}: row {} has {} columns",
                path.display(),
                i + 1,
                record.len()
            )));
        }
        for field in &record {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Usage(format!(
                    "{}: row {} has non-numeric value {field:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor::new(&[rows, width.unwrap_or(0)], data).map_err(CliError::usage)
}

pub fn frechet_from_files(a: &Path, b: &Path) -> Result<f64, CliError> {
    let ga = gaussian_moments(&read_features(a)?).map_err(CliError::usage)?;
    let gb = gaussian_moments(&read_features(b)?).map_err(CliError::usage)?;
    frechet_gaussian(&ga, &gb).map_err(CliError::usage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn identical_and_shifted_sets() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, bad) = (
            dir.path().join("a.csv"),
            dir.path().join("b.csv"),
            dir.path().join("bad.csv"),
        );
        fs::write(&a, "0,1\n1,0\n2,2\n-1,0.5\n").unwrap();
        fs::write(&b, "3,1\n4,0\n5,2\n2,0.5\n").unwrap();
        fs::write(&bad, "0,1\n1\n").unwrap();
        assert!(frechet_from_files(&a, &a).unwrap() < 1e-9);
        assert!((frechet_from_files(&a, &b).unwrap() - 3.0).abs() < 1e-9);
        assert!(matches!(
            frechet_from_files(&a, &bad),
            Err(CliError::Usage(_))
        ));
    }
}
