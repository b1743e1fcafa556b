//! Sample records, manifests, image preparation, batching and the synthetic
//! corpus generator.

pub mod adapters;
pub mod image;
pub mod manifest;
pub mod sampler;
pub mod synth;

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{
    Dataset, LabelSpace, LabelVector, LocatedFinding, LocationAnnotation, MaskVector,
    LOCATED_PATHOLOGIES,
};
use crate::netcore::Tensor4;

pub use self::image::{
    histogram_normalize, standardize, GrayImage, Normalization, RawImage, Standardizer,
};
pub use manifest::{load_manifest, write_manifest};
pub use sampler::{mixed_batch_sampler, SamplerMode};
pub use synth::{synth_generate, SynthConfig, SynthCorpus};

/// One image and its annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_id: String,
    pub patient_id: String,
    pub dataset: Dataset,
    /// Present pathologies, by dataset-local name.
    pub findings: Vec<String>,
    pub locations: Vec<LocatedFinding>,
    pub location_available: bool,
}

impl SampleRecord {
    pub fn has_finding(&self, name: &str) -> bool {
        self.findings.iter().any(|f| f == name)
    }

    /// Annotations of located diseases that are present.
    pub fn present_annotations(&self) -> Result<Vec<LocationAnnotation>> {
        let mut out = Vec::with_capacity(self.locations.len());
        for loc in &self.locations {
            if !self.has_finding(&loc.disease) {
                return Err(Error::Location(format!(
                    "{}: annotation for absent disease `{}`",
                    self.image_id, loc.disease
                )));
            }
            out.push(loc.annotation);
        }
        Ok(out)
    }

    /// A located disease is present but its location was not recorded.
    pub fn location_missing(&self) -> bool {
        !self.location_available
            && self
                .findings
                .iter()
                .any(|f| LOCATED_PATHOLOGIES.contains(&f.as_str()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("{}: {m}", self.image_id)));
        if self.image_id.trim().is_empty() {
            return Err(Error::InvalidArgument("empty image_id".into()));
        }
        if self.patient_id.trim().is_empty() {
            return bad("empty patient_id".into());
        }
        let vocab = self.dataset.pathologies();
        let mut seen = HashSet::new();
        for f in &self.findings {
            if !vocab.contains(&f.as_str()) {
                return Err(Error::UnknownPathology(f.clone()));
            }
            if !seen.insert(f.as_str()) {
                return bad(format!("finding `{f}` listed twice"));
            }
        }
        for loc in &self.locations {
            if self.dataset != Dataset::Plco || !LOCATED_PATHOLOGIES.contains(&loc.disease.as_str())
            {
                return Err(Error::Location(format!(
                    "{}: `{}` does not carry location annotations",
                    self.image_id, loc.disease
                )));
            }
            loc.annotation.validate()?;
        }
        self.present_annotations()?;
        if self.location_available && self.dataset == Dataset::Plco {
            for f in &self.findings {
                if LOCATED_PATHOLOGIES.contains(&f.as_str())
                    && !self.locations.iter().any(|l| &l.disease == f)
                {
                    return Err(Error::Location(format!(
                        "{}: `{f}` present with location available but no annotation",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub images: usize,
    pub patients: usize,
    pub images_per_patient: f64,
}

impl ManifestStats {
    pub fn compute(records: &[SampleRecord]) -> Self {
        let patients: HashSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
        ManifestStats {
            images: records.len(),
            patients: patients.len(),
            images_per_patient: if patients.is_empty() {
                0.0
            } else {
                records.len() as f64 / patients.len() as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dataset: Dataset,
    pub records: Vec<SampleRecord>,
    stats: ManifestStats,
    /// Directory holding `images/<image_id>.png`, when loaded from disk.
    pub root: Option<PathBuf>,
}

impl Manifest {
    /// Validates every record and rejects duplicate image ids.
    pub fn new(dataset: Dataset, records: Vec<SampleRecord>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if r.dataset != dataset {
                return Err(Error::InvalidArgument(format!(
                    "{}: {} record in a {} manifest",
                    r.image_id, r.dataset, dataset
                )));
            }
            r.validate()?;
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateImage(r.image_id.clone()));
            }
        }
        let stats = ManifestStats::compute(&records);
        Ok(Manifest {
            dataset,
            records,
            stats,
            root: None,
        })
    }

    pub fn stats(&self) -> ManifestStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| image_path(r, image_id))
    }
}

pub fn image_path(root: &Path, image_id: &str) -> PathBuf {
    root.join("images").join(format!("{image_id}.png"))
}

/// A sample ready for batching: 8-bit pixels plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub image_id: String,
    pub patient_id: String,
    pub dataset: Dataset,
    pub image: GrayImage,
    pub label: LabelVector,
    pub mask: MaskVector,
}

/// Model-ready mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<LabelVector>,
    pub masks: Vec<MaskVector>,
    pub provenance: Vec<Dataset>,
    pub image_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Builds label and mask vectors for each record and pairs them with images.
pub fn prepare_samples(
    space: &LabelSpace,
    records: &[SampleRecord],
    images: Vec<GrayImage>,
) -> Result<Vec<PreparedSample>> {
    if records.len() != images.len() {
        return Err(Error::Shape(format!(
            "{} records but {} images",
            records.len(),
            images.len()
        )));
    }
    records
        .iter()
        .zip(images)
        .map(|(r, image)| {
            Ok(PreparedSample {
                image_id: r.image_id.clone(),
                patient_id: r.patient_id.clone(),
                dataset: r.dataset,
                label: space.label_vector(r)?,
                mask: space.mask_vector(r),
                image,
            })
        })
        .collect()
}

/// Reads every image of `manifest` from disk and prepares it.
pub fn load_prepared(space: &LabelSpace, manifest: &Manifest) -> Result<Vec<PreparedSample>> {
    let root = manifest.root.as_deref().ok_or_else(|| {
        Error::InvalidArgument(format!("{} manifest has no image root", manifest.dataset))
    })?;
    let images: Vec<GrayImage> = manifest
        .records
        .par_iter()
        .map(|r| RawImage::read_png(&image_path(root, &r.image_id))?.prepare())
        .collect::<Result<_>>()?;
    prepare_samples(space, &manifest.records, images)
}

/// Manifests of a corpus directory laid out as `<dir>/<dataset>/manifest.csv`.
/// Datasets without a subdirectory are skipped; at least one must exist.
pub fn load_corpus_manifests(dir: &Path) -> Result<Vec<Manifest>> {
    let mut out = Vec::new();
    for ds in Dataset::ALL {
        let path = dir.join(ds.as_str().to_lowercase()).join("manifest.csv");
        if path.is_file() {
            out.push(load_manifest(&path, ds)?);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no <dataset>/manifest.csv under {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Stacks the indexed samples into a standardized 3-channel batch.
pub fn assemble_batch(
    samples: &[PreparedSample],
    indices: &[usize],
    norm: &Normalization,
) -> Result<Batch> {
    let first = indices
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (samples[*first].image.height, samples[*first].image.width);
    let plane = h * w;
    let mut data = vec![0.0; indices.len() * 3 * plane];
    let mut batch = Batch {
        images: Tensor4::zeros([0, 3, h, w]),
        labels: Vec::with_capacity(indices.len()),
        masks: Vec::with_capacity(indices.len()),
        provenance: Vec::with_capacity(indices.len()),
        image_ids: Vec::with_capacity(indices.len()),
    };
    for (slot, &i) in indices.iter().enumerate() {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::Shape(format!(
                "{} is {}x{}, batch is {h}x{w}",
                s.image_id, s.image.height, s.image.width
            )));
        }
        let std = norm.for_dataset(s.dataset)?;
        standardize(
            &s.image,
            std,
            &mut data[slot * 3 * plane..(slot + 1) * 3 * plane],
        )?;
        batch.labels.push(s.label.clone());
        batch.masks.push(s.mask.clone());
        batch.provenance.push(s.dataset);
        batch.image_ids.push(s.image_id.clone());
    }
    batch.images = Tensor4::from_vec([indices.len(), 3, h, w], data)?;
    Ok(batch)
}
