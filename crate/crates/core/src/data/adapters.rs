//! Conversion of published dataset index files into manifests.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labelspace::Dataset;

use super::{Manifest, SampleRecord};

/// Reads a ChestX-ray14 `Data_Entry` CSV (`Image Index`, `Finding Labels`
/// with `|`-separated names or `No Finding`, `Patient ID`).
///
/// Image ids keep the file stem (`00000001_000`), so images are expected at
/// `images/<stem>.png` under the manifest directory.
pub fn cxr14_from_data_entry(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let (img, labels, patient) = (
        col("Image Index")?,
        col("Finding Labels")?,
        col("Patient ID")?,
    );
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let stem = row[img].trim().trim_end_matches(".png").to_string();
        let mut findings = Vec::new();
        for raw in row[labels].split('|').map(str::trim) {
            if raw.is_empty() || raw == "No Finding" {
                continue;
            }
            let name = raw.replace('_', " ");
            if !Dataset::Cxr14.pathologies().contains(&name.as_str()) {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line,
                    message: format!("unknown finding `{raw}`"),
                });
            }
            if !findings.contains(&name) {
                findings.push(name);
            }
        }
        records.push(SampleRecord {
            image_id: stem,
            patient_id: format!("{:0>5}", row[patient].trim()),
            dataset: Dataset::Cxr14,
            findings,
            locations: Vec::new(),
            location_available: false,
        });
    }
    let mut m = Manifest::new(Dataset::Cxr14, records)?;
    m.root = path.parent().map(|p| p.to_path_buf());
    Ok(m)
}
