//! The combined 35-class label vocabulary.
//!
//! Positions are frozen and every other component indexes into them:
//!
//! | positions | entries                                                       |
//! |-----------|---------------------------------------------------------------|
//! | 0..14     | ChestX-Ray14 pathologies                                      |
//! | 14..26    | PLCO pathologies                                              |
//! | 26..35    | location classes `f1..f5, wildcard, side_left, side_right, diffuse` |
//!
//! A sample only supervises the positions owned by its dataset; the
//! [`MaskVector`] records which ones.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 35;
pub const NUM_LOCATION: usize = 9;

pub const CXR14_PATHOLOGIES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural Thickening",
    "Hernia",
];

pub const PLCO_PATHOLOGIES: [&str; 12] = [
    "Nodule",
    "Mass",
    "Granuloma",
    "Infiltrate",
    "Scaring",
    "Fibrosis",
    "Bone/Soft Tissue Lesion",
    "Cardiac Abnormality",
    "COPD",
    "Effusion",
    "Atelectasis",
    "Hilar Abnormality",
];

/// PLCO pathologies that carry side/fifth/diffuse annotations.
pub const LOCATED_PATHOLOGIES: [&str; 5] = [
    "Nodule",
    "Mass",
    "Infiltrate",
    "Atelectasis",
    "Hilar Abnormality",
];

pub const LOCATION_CLASSES: [&str; NUM_LOCATION] = [
    "loc_f1",
    "loc_f2",
    "loc_f3",
    "loc_f4",
    "loc_f5",
    "loc_wildcard",
    "loc_side_left",
    "loc_side_right",
    "loc_diffuse",
];

// Offsets inside the 9-bit location block.
const WILDCARD_BIT: usize = 5;
const SIDE_LEFT_BIT: usize = 6;
const SIDE_RIGHT_BIT: usize = 7;
const DIFFUSE_BIT: usize = 8;

const CXR14_RANGE: Range<usize> = 0..14;
const PLCO_RANGE: Range<usize> = 14..26;
const LOCATION_RANGE: Range<usize> = 26..35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "CXR14")]
    Cxr14,
    #[serde(rename = "PLCO")]
    Plco,
}

impl Dataset {
    pub const ALL: [Dataset; 2] = [Dataset::Cxr14, Dataset::Plco];

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Cxr14 => "CXR14",
            Dataset::Plco => "PLCO",
        }
    }

    /// Pathology vocabulary in canonical order.
    pub fn pathologies(self) -> &'static [&'static str] {
        match self {
            Dataset::Cxr14 => &CXR14_PATHOLOGIES,
            Dataset::Plco => &PLCO_PATHOLOGIES,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Dataset::Cxr14 => 0,
            Dataset::Plco => 1,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "CXR14" | "cxr14" => Ok(Dataset::Cxr14),
            "PLCO" | "plco" => Ok(Dataset::Plco),
            other => Err(Error::InvalidArgument(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Pathology,
    LocSide,
    LocFifth,
    LocWildcard,
    LocDiffuse,
}

impl LabelKind {
    pub fn is_location(self) -> bool {
        !matches!(self, LabelKind::Pathology)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub name: String,
    pub dataset: Dataset,
    pub kind: LabelKind,
    pub located: bool,
}

impl LabelDef {
    /// Column name used in logs and score files: `CXR14:Mass`, or the bare
    /// name for location classes.
    pub fn column_name(&self) -> String {
        if self.kind.is_location() {
            self.name.clone()
        } else {
            format!("{}:{}", self.dataset.as_str(), self.name)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    labels: Vec<LabelDef>,
}

/// Builds the canonical ordered 35-entry label space.
pub fn build_combined_labelspace() -> LabelSpace {
    let mut labels = Vec::with_capacity(NUM_CLASSES);
    for name in CXR14_PATHOLOGIES {
        labels.push(LabelDef {
            name: name.to_string(),
            dataset: Dataset::Cxr14,
            kind: LabelKind::Pathology,
            located: false,
        });
    }
    for name in PLCO_PATHOLOGIES {
        labels.push(LabelDef {
            name: name.to_string(),
            dataset: Dataset::Plco,
            kind: LabelKind::Pathology,
            located: LOCATED_PATHOLOGIES.contains(&name),
        });
    }
    for (i, name) in LOCATION_CLASSES.iter().enumerate() {
        let kind = match i {
            0..=4 => LabelKind::LocFifth,
            WILDCARD_BIT => LabelKind::LocWildcard,
            SIDE_LEFT_BIT | SIDE_RIGHT_BIT => LabelKind::LocSide,
            _ => LabelKind::LocDiffuse,
        };
        labels.push(LabelDef {
            name: name.to_string(),
            dataset: Dataset::Plco,
            kind,
            located: false,
        });
    }
    LabelSpace { labels }
}

impl Default for LabelSpace {
    fn default() -> Self {
        build_combined_labelspace()
    }
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceDoc {
    format: String,
    version: u32,
    labels: Vec<LabelEntryDoc>,
}

#[derive(Serialize, Deserialize)]
struct LabelEntryDoc {
    position: usize,
    #[serde(flatten)]
    def: LabelDef,
}

const LABELSPACE_FORMAT: &str = "chestloc-labelspace";
const LABELSPACE_VERSION: u32 = 1;

impl LabelSpace {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    pub fn get(&self, position: usize) -> Option<&LabelDef> {
        self.labels.get(position)
    }

    /// Positions of a dataset's pathology columns (location classes excluded).
    pub fn pathology_range(&self, dataset: Dataset) -> Range<usize> {
        match dataset {
            Dataset::Cxr14 => CXR14_RANGE,
            Dataset::Plco => PLCO_RANGE,
        }
    }

    pub fn location_range(&self) -> Range<usize> {
        LOCATION_RANGE
    }

    /// Position of a pathology by dataset-local name.
    pub fn position(&self, dataset: Dataset, name: &str) -> Option<usize> {
        self.pathology_range(dataset)
            .find(|&i| self.labels[i].name == name)
    }

    /// Positions of the five location-annotated PLCO pathologies, in
    /// label-space order.
    pub fn located_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i].located)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = LabelSpaceDoc {
            format: LABELSPACE_FORMAT.to_string(),
            version: LABELSPACE_VERSION,
            labels: self
                .labels
                .iter()
                .enumerate()
                .map(|(position, def)| LabelEntryDoc {
                    position,
                    def: def.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a label-space document and checks it agrees with the
    /// canonical ordering compiled into this build.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LabelSpaceDoc = serde_json::from_str(text)?;
        if doc.format != LABELSPACE_FORMAT || doc.version != LABELSPACE_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported label-space document {} v{}",
                doc.format, doc.version
            )));
        }
        let canonical = build_combined_labelspace();
        if doc.labels.len() != canonical.len() {
            return Err(Error::InvalidArgument(format!(
                "label-space has {} entries, expected {}",
                doc.labels.len(),
                canonical.len()
            )));
        }
        for (i, entry) in doc.labels.iter().enumerate() {
            if entry.position != i || entry.def != canonical.labels[i] {
                return Err(Error::InvalidArgument(format!(
                    "label-space entry {i} (`{}`) disagrees with canonical ordering",
                    entry.def.name
                )));
            }
        }
        Ok(canonical)
    }

    /// Binary targets for one sample.
    pub fn label_vector(&self, sample: &SampleRecord) -> Result<LabelVector> {
        let mut values = vec![0u8; self.len()];
        let range = self.pathology_range(sample.dataset);
        for name in &sample.findings {
            let pos = self
                .position(sample.dataset, name)
                .ok_or_else(|| Error::UnknownPathology(name.clone()))?;
            debug_assert!(range.contains(&pos));
            values[pos] = 1;
        }
        if sample.dataset == Dataset::Plco && sample.location_available {
            let annotations = sample.present_annotations()?;
            let bits = encode_location(&annotations)?;
            values[LOCATION_RANGE].copy_from_slice(&bits);
        }
        Ok(LabelVector(values))
    }

    /// Supervision mask for one sample.
    pub fn mask_vector(&self, sample: &SampleRecord) -> MaskVector {
        let mut values = vec![0u8; self.len()];
        for v in &mut values[self.pathology_range(sample.dataset)] {
            *v = 1;
        }
        if sample.dataset == Dataset::Plco && !sample.location_missing() {
            for v in &mut values[LOCATION_RANGE] {
                *v = 1;
            }
        }
        MaskVector(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fifth {
    F1,
    F2,
    F3,
    F4,
    F5,
    Multiple,
    None,
}

impl Fifth {
    pub const SINGLE: [Fifth; 5] = [Fifth::F1, Fifth::F2, Fifth::F3, Fifth::F4, Fifth::F5];

    /// Zero-based band index for `F1..F5`.
    pub fn index(self) -> Option<usize> {
        match self {
            Fifth::F1 => Some(0),
            Fifth::F2 => Some(1),
            Fifth::F3 => Some(2),
            Fifth::F4 => Some(3),
            Fifth::F5 => Some(4),
            Fifth::Multiple | Fifth::None => None,
        }
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            "none" | "" => Ok(Side::None),
            other => Err(Error::Location(format!("unknown side `{other}`"))),
        }
    }
}

impl FromStr for Fifth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f1" => Ok(Fifth::F1),
            "f2" => Ok(Fifth::F2),
            "f3" => Ok(Fifth::F3),
            "f4" => Ok(Fifth::F4),
            "f5" => Ok(Fifth::F5),
            "multiple" => Ok(Fifth::Multiple),
            "none" | "" => Ok(Fifth::None),
            other => Err(Error::Location(format!("unknown fifth `{other}`"))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::None => "none",
        })
    }
}

impl fmt::Display for Fifth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fifth::F1 => "f1",
            Fifth::F2 => "f2",
            Fifth::F3 => "f3",
            Fifth::F4 => "f4",
            Fifth::F5 => "f5",
            Fifth::Multiple => "multiple",
            Fifth::None => "none",
        })
    }
}

/// Where one located disease sits in the lungs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocationAnnotation {
    pub side: Side,
    pub fifth: Fifth,
    pub diffuse: bool,
}

impl LocationAnnotation {
    pub fn new(side: Side, fifth: Fifth, diffuse: bool) -> Self {
        LocationAnnotation {
            side,
            fifth,
            diffuse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.diffuse && self.fifth != Fifth::None {
            return Err(Error::Location(format!(
                "diffuse annotation cannot also name fifth {}",
                self.fifth
            )));
        }
        if self.fifth != Fifth::None && self.side == Side::None {
            return Err(Error::Location(format!(
                "fifth {} given without a lung side",
                self.fifth
            )));
        }
        if self.side == Side::None && self.fifth == Fifth::None && !self.diffuse {
            return Err(Error::Location(
                "empty annotation (no side, fifth or diffuse flag)".into(),
            ));
        }
        Ok(())
    }
}

/// Located disease name plus its annotation, as carried by a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocatedFinding {
    pub disease: String,
    pub annotation: LocationAnnotation,
}

/// Union-encodes annotations into the nine location bits
/// `[f1..f5, wildcard, side_left, side_right, diffuse]`.
///
/// Exactly one distinct fifth sets that fifth's bit; two or more distinct
/// fifths, or any `multiple`, set only the wildcard among the six lobe bits.
pub fn encode_location(annotations: &[LocationAnnotation]) -> Result<[u8; NUM_LOCATION]> {
    let mut bits = [0u8; NUM_LOCATION];
    let mut fifths = [false; 5];
    let mut multiple = false;
    for a in annotations {
        a.validate()?;
        match a.side {
            Side::Left => bits[SIDE_LEFT_BIT] = 1,
            Side::Right => bits[SIDE_RIGHT_BIT] = 1,
            Side::None => {}
        }
        match a.fifth {
            Fifth::Multiple => multiple = true,
            Fifth::None => {}
            single => fifths[single.index().expect("single fifth")] = true,
        }
        if a.diffuse {
            bits[DIFFUSE_BIT] = 1;
        }
    }
    let distinct = fifths.iter().filter(|&&f| f).count();
    if multiple || distinct > 1 {
        bits[WILDCARD_BIT] = 1;
    } else if let Some(i) = fifths.iter().position(|&f| f) {
        bits[i] = 1;
    }
    Ok(bits)
}

/// Reconstructs a set of annotations whose encoding reproduces `bits`.
///
/// The result is not unique in general (the encoding is lossy); it is the
/// smallest annotation list such that `encode_location(decode) == bits`.
pub fn decode_location(bits: &[u8; NUM_LOCATION]) -> Result<Vec<LocationAnnotation>> {
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::Location("location bits must be 0 or 1".into()));
    }
    let lobe: Vec<usize> = (0..=WILDCARD_BIT).filter(|&i| bits[i] == 1).collect();
    if lobe.len() > 1 {
        return Err(Error::Location(
            "more than one lobe-position bit is set".into(),
        ));
    }
    let fifth = match lobe.first() {
        Some(&WILDCARD_BIT) => Fifth::Multiple,
        Some(&i) => Fifth::SINGLE[i],
        None => Fifth::None,
    };
    let mut sides = Vec::new();
    if bits[SIDE_LEFT_BIT] == 1 {
        sides.push(Side::Left);
    }
    if bits[SIDE_RIGHT_BIT] == 1 {
        sides.push(Side::Right);
    }
    if fifth != Fifth::None && sides.is_empty() {
        return Err(Error::Location(
            "lobe-position bit set without a side bit".into(),
        ));
    }
    let diffuse = bits[DIFFUSE_BIT] == 1;

    let mut out: Vec<LocationAnnotation> = sides
        .iter()
        .map(|&side| LocationAnnotation::new(side, fifth, false))
        .collect();
    if diffuse {
        if fifth == Fifth::None && !out.is_empty() {
            out[0].diffuse = true;
        } else {
            out.push(LocationAnnotation::new(Side::None, Fifth::None, true));
        }
    }
    Ok(out)
}

/// Per-sample binary targets over the label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector(Vec<u8>);

/// Per-sample supervision mask over the label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector(Vec<u8>);

macro_rules! binary_vector {
    ($ty:ident) => {
        impl $ty {
            pub fn new(values: Vec<u8>) -> Result<Self> {
                if let Some(v) = values.iter().find(|&&v| v > 1) {
                    return Err(Error::InvalidArgument(format!(
                        concat!(stringify!($ty), " value {} is not binary"),
                        v
                    )));
                }
                Ok($ty(values))
            }

            pub fn values(&self) -> &[u8] {
                &self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn get(&self, i: usize) -> u8 {
                self.0[i]
            }

            pub fn count_ones(&self) -> usize {
                self.0.iter().filter(|&&v| v == 1).count()
            }
        }
    };
}

binary_vector!(LabelVector);
binary_vector!(MaskVector);

impl MaskVector {
    /// Same mask with the nine location positions switched off.
    pub fn without_location(&self) -> MaskVector {
        let mut values = self.0.clone();
        for v in &mut values[LOCATION_RANGE] {
            *v = 0;
        }
        MaskVector(values)
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.0[i] = value as u8;
    }
}

impl LabelVector {
    pub fn location_bits(&self) -> [u8; NUM_LOCATION] {
        let mut bits = [0u8; NUM_LOCATION];
        bits.copy_from_slice(&self.0[LOCATION_RANGE]);
        bits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(side: Side, fifth: Fifth, diffuse: bool) -> LocationAnnotation {
        LocationAnnotation::new(side, fifth, diffuse)
    }

    fn sample(dataset: Dataset, findings: &[&str]) -> SampleRecord {
        SampleRecord {
            image_id: "img".into(),
            patient_id: "p".into(),
            dataset,
            findings: findings.iter().map(|s| s.to_string()).collect(),
            locations: Vec::new(),
            location_available: true,
        }
    }

    #[test]
    fn combined_space_shape() {
        let space = build_combined_labelspace();
        assert_eq!(space.len(), 35);
        assert_eq!(space.get(1).unwrap().name, "Cardiomegaly");
        assert_eq!(space.get(1).unwrap().dataset, Dataset::Cxr14);
        let loc: Vec<_> = space
            .labels()
            .iter()
            .filter(|l| l.kind.is_location())
            .collect();
        assert_eq!(loc.len(), 9);
        let count = |k: LabelKind| loc.iter().filter(|l| l.kind == k).count();
        assert_eq!(count(LabelKind::LocFifth), 5);
        assert_eq!(count(LabelKind::LocWildcard), 1);
        assert_eq!(count(LabelKind::LocSide), 2);
        assert_eq!(count(LabelKind::LocDiffuse), 1);
        let cxr = space
            .labels()
            .iter()
            .filter(|l| l.dataset == Dataset::Cxr14)
            .count();
        let plco_path = space
            .labels()
            .iter()
            .filter(|l| l.dataset == Dataset::Plco && l.kind == LabelKind::Pathology)
            .count();
        assert_eq!((cxr, plco_path), (14, 12));
    }

    #[test]
    fn located_entries() {
        let space = build_combined_labelspace();
        let located: Vec<&str> = space
            .located_positions()
            .into_iter()
            .map(|i| space.get(i).unwrap().name.as_str())
            .collect();
        assert_eq!(
            located,
            [
                "Nodule",
                "Mass",
                "Infiltrate",
                "Atelectasis",
                "Hilar Abnormality"
            ]
        );
        for l in space.labels() {
            if l.located {
                assert_eq!(l.kind, LabelKind::Pathology);
                assert_eq!(l.dataset, Dataset::Plco);
            }
        }
    }

    #[test]
    fn names_unique_within_dataset() {
        let space = build_combined_labelspace();
        for ds in Dataset::ALL {
            let mut names: Vec<_> = space
                .labels()
                .iter()
                .filter(|l| l.dataset == ds)
                .map(|l| &l.name)
                .collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n);
        }
    }

    #[test]
    fn encode_single_fifth() {
        let bits = encode_location(&[ann(Side::Right, Fifth::F2, false)]).unwrap();
        assert_eq!(bits, [0, 1, 0, 0, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn encode_distinct_fifths_gives_wildcard() {
        let bits = encode_location(&[
            ann(Side::Left, Fifth::F1, false),
            ann(Side::Left, Fifth::F4, false),
        ])
        .unwrap();
        assert_eq!(bits, [0, 0, 0, 0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn encode_same_fifth_twice_keeps_fifth() {
        let bits = encode_location(&[
            ann(Side::Left, Fifth::F3, false),
            ann(Side::Right, Fifth::F3, false),
        ])
        .unwrap();
        assert_eq!(bits, [0, 0, 1, 0, 0, 0, 1, 1, 0]);
    }

    #[test]
    fn encode_diffuse() {
        let bits = encode_location(&[ann(Side::Left, Fifth::None, true)]).unwrap();
        assert_eq!(bits, [0, 0, 0, 0, 0, 0, 1, 0, 1]);
    }

    #[test]
    fn encode_explicit_multiple() {
        let bits = encode_location(&[ann(Side::Right, Fifth::Multiple, false)]).unwrap();
        assert_eq!(bits, [0, 0, 0, 0, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn encode_rejects_empty_and_inconsistent() {
        assert!(matches!(
            encode_location(&[ann(Side::None, Fifth::None, false)]),
            Err(Error::Location(_))
        ));
        assert!(encode_location(&[ann(Side::Left, Fifth::F1, true)]).is_err());
        assert!(encode_location(&[ann(Side::None, Fifth::F1, false)]).is_err());
        assert_eq!(encode_location(&[]).unwrap(), [0; 9]);
    }

    #[test]
    fn decode_roundtrips_every_single_annotation() {
        let sides = [Side::Left, Side::Right, Side::None];
        let fifths = [
            Fifth::F1,
            Fifth::F2,
            Fifth::F3,
            Fifth::F4,
            Fifth::F5,
            Fifth::Multiple,
            Fifth::None,
        ];
        let mut checked = 0;
        for side in sides {
            for fifth in fifths {
                for diffuse in [false, true] {
                    let a = ann(side, fifth, diffuse);
                    if a.validate().is_err() {
                        continue;
                    }
                    let bits = encode_location(&[a]).unwrap();
                    let back = decode_location(&bits).unwrap();
                    assert_eq!(encode_location(&back).unwrap(), bits, "{a:?}");
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 17);
    }

    #[test]
    fn label_vector_cxr14_single() {
        let space = build_combined_labelspace();
        let lv = space
            .label_vector(&sample(Dataset::Cxr14, &["Effusion"]))
            .unwrap();
        assert_eq!(lv.get(2), 1);
        assert_eq!(lv.count_ones(), 1);
    }

    #[test]
    fn label_vector_plco_empty() {
        let space = build_combined_labelspace();
        let lv = space.label_vector(&sample(Dataset::Plco, &[])).unwrap();
        assert_eq!(lv.count_ones(), 0);
        assert_eq!(lv.len(), 35);
    }

    #[test]
    fn label_vector_plco_located_mass() {
        let space = build_combined_labelspace();
        let mut s = sample(Dataset::Plco, &["Mass"]);
        s.locations.push(LocatedFinding {
            disease: "Mass".into(),
            annotation: ann(Side::Right, Fifth::F3, false),
        });
        let lv = space.label_vector(&s).unwrap();
        let mass = space.position(Dataset::Plco, "Mass").unwrap();
        assert_eq!(mass, 15);
        let ones: Vec<usize> = (0..35).filter(|&i| lv.get(i) == 1).collect();
        assert_eq!(ones, vec![15, 28, 33]);
    }

    #[test]
    fn label_vector_rejects_unknown_name() {
        let space = build_combined_labelspace();
        // Granuloma only exists in the PLCO vocabulary.
        let err = space
            .label_vector(&sample(Dataset::Cxr14, &["Granuloma"]))
            .unwrap_err();
        assert!(matches!(err, Error::UnknownPathology(ref n) if n == "Granuloma"));
    }

    #[test]
    fn masks() {
        let space = build_combined_labelspace();
        let m = space.mask_vector(&sample(Dataset::Cxr14, &["Mass"]));
        let expected: Vec<u8> = [vec![1u8; 14], vec![0; 21]].concat();
        assert_eq!(m.values(), expected.as_slice());

        let m = space.mask_vector(&sample(Dataset::Plco, &["Mass"]));
        let expected: Vec<u8> = [vec![0u8; 14], vec![1; 21]].concat();
        assert_eq!(m.values(), expected.as_slice());

        let mut s = sample(Dataset::Plco, &["Mass"]);
        s.location_available = false;
        let m = space.mask_vector(&s);
        let expected: Vec<u8> = [vec![0u8; 14], vec![1; 12], vec![0; 9]].concat();
        assert_eq!(m.values(), expected.as_slice());
        assert_eq!(m.without_location().count_ones(), 12);

        // No located disease present: absence of location is known.
        let mut s = sample(Dataset::Plco, &["COPD"]);
        s.location_available = false;
        assert_eq!(space.mask_vector(&s).count_ones(), 21);
    }

    #[test]
    fn json_roundtrip_and_rejects_reordering() {
        let space = build_combined_labelspace();
        let text = space.to_json().unwrap();
        assert_eq!(LabelSpace::from_json(&text).unwrap(), space);
        let tampered = text.replacen("Cardiomegaly", "Cardio", 1);
        assert!(LabelSpace::from_json(&tampered).is_err());
    }
}
