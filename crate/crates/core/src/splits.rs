//! Patient-wise train/validation/test splits, leakage audits and split files.
//!
//! Split files are `train.txt`, `val.txt` and `test.txt`: UTF-8, one
//! image_id per line, sorted ascending, LF-terminated.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Ratios are compared in millionths so sizing is exact integer arithmetic.
const RATIO_SCALE: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(Error::InvalidArgument(format!("unknown subset `{other}`"))),
        }
    }
}

/// Subset membership of every image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub images: BTreeMap<String, Subset>,
}

impl SplitAssignment {
    pub fn subset_of(&self, image_id: &str) -> Option<Subset> {
        self.images.get(image_id).copied()
    }

    /// Sorted image ids of one subset.
    pub fn image_ids(&self, subset: Subset) -> Vec<&str> {
        self.images
            .iter()
            .filter(|(_, &s)| s == subset)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.images.values().filter(|&&s| s == subset).count()
    }

    /// SHA-256 over the sorted ids of `subset`, one per line.
    pub fn subset_hash(&self, subset: Subset) -> String {
        hash_ids(self.image_ids(subset))
    }

    fn merge(&mut self, other: SplitAssignment) -> Result<()> {
        for (id, s) in other.images {
            if self.images.insert(id.clone(), s).is_some() {
                return Err(Error::DuplicateImage(id));
            }
        }
        Ok(())
    }
}

pub fn hash_ids<'a, I: IntoIterator<Item = &'a str>>(ids: I) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn quantize_ratios(ratios: [f64; 3]) -> Result<[u64; 3]> {
    let mut q = [0u64; 3];
    for (slot, &r) in q.iter_mut().zip(&ratios) {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ratio {r} must be finite and >= 0"
            )));
        }
        *slot = (r * RATIO_SCALE as f64).round() as u64;
    }
    if q.iter().sum::<u64>() != RATIO_SCALE {
        return Err(Error::InvalidArgument(format!(
            "ratios {ratios:?} must sum to 1 (to 1e-6)"
        )));
    }
    Ok(q)
}

/// Subset sizes for `n` units: floors of `n * ratio`, with the leftover
/// units going to the largest fractional parts (earlier subset on ties).
pub fn subset_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let q = quantize_ratios(ratios)?;
    let n = n as u64;
    let mut sizes = [0u64; 3];
    let mut rems = [0u64; 3];
    for i in 0..3 {
        sizes[i] = n * q[i] / RATIO_SCALE;
        rems[i] = n * q[i] % RATIO_SCALE;
    }
    let mut left = n - sizes.iter().sum::<u64>();
    let mut order = [0usize, 1, 2];
    order.sort_by_key(|&i| (std::cmp::Reverse(rems[i]), i));
    for i in order {
        if left == 0 {
            break;
        }
        if q[i] > 0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    Ok([sizes[0] as usize, sizes[1] as usize, sizes[2] as usize])
}

fn partition<'a>(
    units: &mut [&'a str],
    ratios: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(&'a str, Subset)>> {
    let sizes = subset_sizes(units.len(), ratios)?;
    units.shuffle(rng);
    let mut out = Vec::with_capacity(units.len());
    let mut start = 0;
    for s in Subset::ALL {
        for u in &units[start..start + sizes[s.index()]] {
            out.push((*u, s));
        }
        start += sizes[s.index()];
    }
    Ok(out)
}

/// Patient-wise split: patients in lexicographic order are shuffled with
/// `seed` and cut by patient count; every image follows its patient.
pub fn patient_split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let q = quantize_ratios(ratios)?;
    let patients: BTreeSet<&str> = manifest.patients();
    let needed = q.iter().filter(|&&v| v > 0).count();
    if patients.len() < needed {
        return Err(Error::InvalidArgument(format!(
            "{} patients cannot fill {needed} non-empty subsets",
            patients.len()
        )));
    }
    let mut units: Vec<&str> = patients.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_patient: HashMap<&str, Subset> = partition(&mut units, ratios, &mut rng)?
        .into_iter()
        .collect();
    let images = manifest
        .records
        .iter()
        .map(|r| (r.image_id.clone(), by_patient[r.patient_id.as_str()]))
        .collect();
    Ok(SplitAssignment { images })
}

/// Splits each manifest independently, each with its own seed stream.
pub fn patient_split_all(
    manifests: &[&Manifest],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    let mut all = SplitAssignment::default();
    for m in manifests {
        let s = seed::derive(seed, "split", m.dataset.index() as u64);
        all.merge(patient_split(m, ratios, s)?)?;
    }
    Ok(all)
}

/// Image-wise random split that ignores patients. It exists to
/// demonstrate leakage and is never used for training runs.
pub fn image_split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let mut units: Vec<&str> = manifest
        .records
        .iter()
        .map(|r| r.image_id.as_str())
        .collect();
    units.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = partition(&mut units, ratios, &mut rng)?
        .into_iter()
        .map(|(id, s)| (id.to_string(), s))
        .collect();
    Ok(SplitAssignment { images })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetStats {
    pub subset: Subset,
    pub images: usize,
    pub patients: usize,
    pub images_per_patient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageViolation {
    pub patient_id: String,
    pub subsets: Vec<Subset>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    /// Patients whose images fall in more than one subset, sorted by id.
    pub violations: Vec<LeakageViolation>,
    pub subsets: Vec<SubsetStats>,
    /// Manifest images missing from the assignment.
    pub unassigned: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.subsets {
            writeln!(
                f,
                "{:<5} images={:<7} patients={:<6} images/patient={:.3}",
                s.subset.as_str(),
                s.images,
                s.patients,
                s.images_per_patient
            )?;
        }
        if self.unassigned > 0 {
            writeln!(f, "unassigned images: {}", self.unassigned)?;
        }
        if self.violations.is_empty() {
            writeln!(f, "leakage: none")
        } else {
            writeln!(
                f,
                "leakage: {} patients span several subsets",
                self.violations.len()
            )?;
            for v in &self.violations {
                let names: Vec<&str> = v.subsets.iter().map(|s| s.as_str()).collect();
                writeln!(f, "  {} -> {}", v.patient_id, names.join(","))?;
            }
            Ok(())
        }
    }
}

/// Lists every patient present in more than one subset.
pub fn verify_no_leakage(assignment: &SplitAssignment, manifests: &[&Manifest]) -> AuditReport {
    let mut seen: BTreeMap<&str, BTreeSet<Subset>> = BTreeMap::new();
    let mut images = [0usize; 3];
    let mut patients: [BTreeSet<&str>; 3] = Default::default();
    let mut unassigned = 0;
    for m in manifests {
        for r in &m.records {
            match assignment.subset_of(&r.image_id) {
                Some(s) => {
                    seen.entry(r.patient_id.as_str()).or_default().insert(s);
                    images[s.index()] += 1;
                    patients[s.index()].insert(r.patient_id.as_str());
                }
                None => unassigned += 1,
            }
        }
    }
    let violations = seen
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(p, s)| LeakageViolation {
            patient_id: p.to_string(),
            subsets: s.into_iter().collect(),
        })
        .collect();
    let subsets = Subset::ALL
        .iter()
        .map(|&s| {
            let (i, p) = (images[s.index()], patients[s.index()].len());
            SubsetStats {
                subset: s,
                images: i,
                patients: p,
                images_per_patient: if p == 0 { 0.0 } else { i as f64 / p as f64 },
            }
        })
        .collect();
    AuditReport {
        violations,
        subsets,
        unassigned,
    }
}

/// Writes one file per non-empty subset; stale files for empty subsets are
/// removed so the directory always mirrors the assignment.
pub fn write_split_files(dir: &Path, assignment: &SplitAssignment) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for s in Subset::ALL {
        let path = dir.join(s.file_name());
        let ids = assignment.image_ids(s);
        if ids.is_empty() {
            if path.exists() {
                fs::remove_file(&path)
                    .map_err(|e| Error::io(format!("removing {}", path.display()), e))?;
            }
            continue;
        }
        let mut text = String::with_capacity(ids.iter().map(|i| i.len() + 1).sum());
        for id in ids {
            text.push_str(id);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

/// Reads whichever split files exist in `dir`. Every id must name an image
/// of one of `manifests`; leakage is not checked here.
pub fn read_split_files(dir: &Path, manifests: &[&Manifest]) -> Result<SplitAssignment> {
    let known: BTreeSet<&str> = manifests
        .iter()
        .flat_map(|m| m.records.iter().map(|r| r.image_id.as_str()))
        .collect();
    let mut out = SplitAssignment::default();
    let mut found = false;
    for s in Subset::ALL {
        let path = dir.join(s.file_name());
        if !path.exists() {
            continue;
        }
        found = true;
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        for line in text.lines() {
            let id = line.trim();
            if id.is_empty() {
                continue;
            }
            if !known.contains(id) {
                return Err(Error::UnknownImage {
                    path: path.clone(),
                    image_id: id.to_string(),
                });
            }
            if out.images.insert(id.to_string(), s).is_some() {
                return Err(Error::DuplicateImage(id.to_string()));
            }
        }
    }
    if !found {
        return Err(Error::InvalidArgument(format!(
            "no split files in {}",
            dir.display()
        )));
    }
    Ok(out)
}
