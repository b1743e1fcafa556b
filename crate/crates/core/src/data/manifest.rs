//! Manifest CSV reading and writing.
//!
//! Header: `image_id,patient_id,dataset,<pathology columns>,loc_disease,
//! loc_side,loc_fifth,loc_diffuse,loc_available`. Pathology columns hold
//! 0/1 and must be exactly the dataset's vocabulary (any order). An image
//! with several located findings spans consecutive rows that repeat every
//! non-location field; each row contributes one annotation.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labelspace::{Dataset, Fifth, LocatedFinding, LocationAnnotation, Side};

use super::{Manifest, SampleRecord};

pub const LOCATION_COLUMNS: [&str; 5] = [
    "loc_disease",
    "loc_side",
    "loc_fifth",
    "loc_diffuse",
    "loc_available",
];

pub fn manifest_header(dataset: Dataset) -> Vec<String> {
    let mut h = vec![
        "image_id".to_string(),
        "patient_id".into(),
        "dataset".into(),
    ];
    h.extend(dataset.pathologies().iter().map(|s| s.to_string()));
    h.extend(LOCATION_COLUMNS.iter().map(|s| s.to_string()));
    h
}

struct Columns {
    image_id: usize,
    patient_id: usize,
    dataset: usize,
    pathologies: Vec<usize>,
    loc: [usize; 5],
}

fn resolve_columns(path: &Path, header: &csv::StringRecord, dataset: Dataset) -> Result<Columns> {
    let err = |message: String| Error::Manifest {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| err(format!("missing column `{name}`")))
    };
    let vocab = dataset.pathologies();
    let fixed = ["image_id", "patient_id", "dataset"];
    for h in header.iter() {
        let h = h.trim();
        if !fixed.contains(&h) && !LOCATION_COLUMNS.contains(&h) && !vocab.contains(&h) {
            return Err(Error::UnknownPathology(h.to_string()));
        }
    }
    let mut loc = [0; 5];
    for (slot, name) in loc.iter_mut().zip(LOCATION_COLUMNS) {
        *slot = find(name)?;
    }
    Ok(Columns {
        image_id: find("image_id")?,
        patient_id: find("patient_id")?,
        dataset: find("dataset")?,
        pathologies: vocab.iter().map(|n| find(n)).collect::<Result<_>>()?,
        loc,
    })
}

fn parse_bit(field: &str, what: &str) -> std::result::Result<bool, String> {
    match field.trim() {
        "1" => Ok(true),
        "0" | "" => Ok(false),
        other => Err(format!("{what} must be 0 or 1, got `{other}`")),
    }
}

struct Row {
    record: SampleRecord,
    location: Option<LocatedFinding>,
}

fn parse_row(
    row: &csv::StringRecord,
    cols: &Columns,
    dataset: Dataset,
) -> std::result::Result<Row, String> {
    let tag: Dataset = row[cols.dataset]
        .parse()
        .map_err(|e: Error| e.to_string())?;
    if tag != dataset {
        return Err(format!("dataset column says {tag}, expected {dataset}"));
    }
    let mut findings = Vec::new();
    for (name, &c) in dataset.pathologies().iter().zip(&cols.pathologies) {
        if parse_bit(&row[c], name)? {
            findings.push(name.to_string());
        }
    }
    let disease = row[cols.loc[0]].trim();
    let location = if disease.is_empty() {
        None
    } else {
        let side: Side = row[cols.loc[1]].parse().map_err(|e: Error| e.to_string())?;
        let fifth: Fifth = row[cols.loc[2]].parse().map_err(|e: Error| e.to_string())?;
        let diffuse = parse_bit(&row[cols.loc[3]], "loc_diffuse")?;
        Some(LocatedFinding {
            disease: disease.to_string(),
            annotation: LocationAnnotation::new(side, fifth, diffuse),
        })
    };
    Ok(Row {
        record: SampleRecord {
            image_id: row[cols.image_id].trim().to_string(),
            patient_id: row[cols.patient_id].trim().to_string(),
            dataset,
            findings,
            locations: Vec::new(),
            location_available: parse_bit(&row[cols.loc[4]], "loc_available")?,
        },
        location,
    })
}

/// Reads and validates a manifest. Image files are expected under
/// `<manifest dir>/images/`.
pub fn load_manifest(path: &Path, dataset: Dataset) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header = reader.headers()?.clone();
    let cols = resolve_columns(path, &header, dataset)?;
    let mut records: Vec<SampleRecord> = Vec::new();
    let mut lines: Vec<u64> = Vec::new();
    let mut last_had_location = false;
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let at = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let parsed = parse_row(&row, &cols, dataset).map_err(at)?;
        let continues = match records.last() {
            Some(prev) if prev.image_id == parsed.record.image_id => {
                let mut same = prev.clone();
                same.locations.clear();
                if same != parsed.record || !last_had_location || parsed.location.is_none() {
                    return Err(Error::DuplicateImage(parsed.record.image_id));
                }
                true
            }
            _ => false,
        };
        last_had_location = parsed.location.is_some();
        if continues {
            let prev = records.last_mut().expect("continuation has a previous row");
            prev.locations.extend(parsed.location);
        } else {
            let mut rec = parsed.record;
            rec.locations.extend(parsed.location);
            records.push(rec);
            lines.push(line);
        }
    }
    for (r, &line) in records.iter().zip(&lines) {
        if let Err(e) = r.validate() {
            return Err(match e {
                Error::UnknownPathology(_) => e,
                other => Error::Manifest {
                    path: path.to_path_buf(),
                    line,
                    message: other.to_string(),
                },
            });
        }
    }
    let mut manifest = Manifest::new(dataset, records)?;
    manifest.root = path.parent().map(|p| p.to_path_buf());
    Ok(manifest)
}

/// Writes `manifest` in the format read by [`load_manifest`].
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    w.write_record(manifest_header(manifest.dataset))?;
    for r in &manifest.records {
        let mut base = vec![
            r.image_id.clone(),
            r.patient_id.clone(),
            r.dataset.to_string(),
        ];
        base.extend(
            manifest
                .dataset
                .pathologies()
                .iter()
                .map(|n| if r.has_finding(n) { "1" } else { "0" }.to_string()),
        );
        let avail = if r.location_available { "1" } else { "0" }.to_string();
        if r.locations.is_empty() {
            let mut row = base.clone();
            row.extend(["".into(), "".into(), "".into(), "".into(), avail.clone()]);
            w.write_record(&row)?;
        }
        for loc in &r.locations {
            let a = loc.annotation;
            let mut row = base.clone();
            row.extend([
                loc.disease.clone(),
                a.side.to_string(),
                a.fifth.to_string(),
                if a.diffuse { "1" } else { "0" }.into(),
                avail.clone(),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        File::create(&p)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        p
    }

    fn plco_header() -> String {
        manifest_header(Dataset::Plco).join(",")
    }

    fn plco_row(id: &str, patient: &str, findings: &[&str], loc: &str) -> String {
        let bits: Vec<&str> = Dataset::Plco
            .pathologies()
            .iter()
            .map(|n| if findings.contains(n) { "1" } else { "0" })
            .collect();
        format!("{id},{patient},PLCO,{},{loc}", bits.join(","))
    }

    #[test]
    fn continuation_rows_merge() {
        let dir = tempfile::tempdir().unwrap();
        let text = [
            plco_header(),
            plco_row("a", "p1", &["Mass", "Nodule"], "Mass,left,f2,0,1"),
            plco_row("a", "p1", &["Mass", "Nodule"], "Nodule,right,f5,0,1"),
            plco_row("b", "p1", &[], ",,,,1"),
        ]
        .join("\n");
        let m = load_manifest(&write(dir.path(), "m.csv", &text), Dataset::Plco).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].locations.len(), 2);
        assert_eq!(m.stats().patients, 1);
        let out = dir.path().join("out.csv");
        write_manifest(&out, &m).unwrap();
        let back = load_manifest(&out, Dataset::Plco).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn plain_duplicate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = [
            plco_header(),
            plco_row("a", "p1", &[], ",,,,0"),
            plco_row("a", "p1", &[], ",,,,0"),
        ]
        .join("\n");
        match load_manifest(&write(dir.path(), "m.csv", &text), Dataset::Plco) {
            Err(Error::DuplicateImage(id)) => assert_eq!(id, "a"),
            other => panic!("{other:?}"),
        }
        // Same id, located rows but differing findings: also a duplicate.
        let text = [
            plco_header(),
            plco_row("a", "p1", &["Mass"], "Mass,left,f1,0,1"),
            plco_row("a", "p1", &["Mass", "COPD"], "Mass,left,f2,0,1"),
        ]
        .join("\n");
        assert!(matches!(
            load_manifest(&write(dir.path(), "m2.csv", &text), Dataset::Plco),
            Err(Error::DuplicateImage(_))
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = plco_row("b", "p2", &[], ",,,,0");
        bad = bad.replacen(",0,", ",7,", 1);
        let text = [plco_header(), plco_row("a", "p1", &[], ",,,,0"), bad].join("\n");
        match load_manifest(&write(dir.path(), "m.csv", &text), Dataset::Plco) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_column_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = plco_header().replace("COPD", "Asthma");
        let text = format!("{header}\n");
        assert!(matches!(
            load_manifest(&write(dir.path(), "m.csv", &text), Dataset::Plco),
            Err(Error::UnknownPathology(name)) if name == "Asthma"
        ));
    }
}
