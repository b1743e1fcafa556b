//! Synthetic chest-film corpus with planted pathology signatures.
//!
//! Each image is a stylized frontal film: body silhouette, two dark lung
//! fields split into five horizontal bands ("fifths") each, and a heart
//! shadow offset to the patient's left. Every present pathology stamps its
//! own signature (shape, size, intensity) onto the film. Located
//! pathologies are stamped inside the lung region named by their
//! annotation when location correlation is on, and anywhere in the lungs
//! otherwise. The patient's right lung is on the image's left.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{GrayImage, RawImage, RawPixels};
use super::manifest::write_manifest;
use super::{image_path, prepare_samples, Manifest, PreparedSample, SampleRecord};
use crate::error::{Error, Result};
use crate::labelspace::{
    Dataset, Fifth, LabelSpace, LocatedFinding, LocationAnnotation, Side, LOCATED_PATHOLOGIES,
};
use crate::seed;

/// Signature geometry. Lengths are in pixels of a 64-pixel image and scale
/// with the configured size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlobShape {
    Disk {
        radius: f64,
    },
    Ring {
        radius: f64,
        thickness: f64,
    },
    Bar {
        length: f64,
        width: f64,
        angle_deg: f64,
    },
    Cross {
        length: f64,
        width: f64,
    },
    Square {
        side: f64,
    },
    Pair {
        radius: f64,
        gap: f64,
    },
    Cluster {
        radius: f64,
        spread: f64,
    },
    Haze {
        sigma: f64,
    },
    /// Enlarged heart shadow.
    HeartGrow {
        factor: f64,
    },
    /// Opacity filling the lower part of one lung.
    BaseFill {
        fraction: f64,
    },
    /// Uniform change over both lung fields.
    LungShift,
    /// Symmetric hazy patches in both lungs.
    Bilateral {
        sigma: f64,
    },
}

/// Where a non-located signature is stamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Lung,
    LungEdge,
    Apex,
    Midline,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSignature {
    pub pathology: String,
    pub shape: BlobShape,
    /// Added intensity on the 0..255 scale (negative darkens).
    pub intensity: f64,
    pub placement: Placement,
}

fn sig(pathology: &str, shape: BlobShape, intensity: f64, placement: Placement) -> BlobSignature {
    BlobSignature {
        pathology: pathology.to_string(),
        shape,
        intensity,
        placement,
    }
}

/// One signature per distinct pathology name. Names shared by both
/// vocabularies (or near-synonyms) share a signature.
pub fn default_signatures() -> Vec<BlobSignature> {
    use BlobShape::*;
    use Placement::*;
    let atel = Bar {
        length: 18.0,
        width: 4.0,
        angle_deg: 0.0,
    };
    let heart = HeartGrow { factor: 1.35 };
    let effusion = BaseFill { fraction: 0.22 };
    let infil = Haze { sigma: 5.0 };
    let mass = Disk { radius: 8.0 };
    let nodule = Disk { radius: 3.5 };
    let fibrosis = Cross {
        length: 15.0,
        width: 3.0,
    };
    vec![
        sig("Atelectasis", atel, 75.0, Lung),
        sig("Cardiomegaly", heart, 0.0, Global),
        sig("Effusion", effusion, 75.0, Global),
        sig("Infiltration", infil, 70.0, Lung),
        sig("Infiltrate", infil, 70.0, Lung),
        sig("Mass", mass, 80.0, Lung),
        sig("Nodule", nodule, 120.0, Lung),
        sig(
            "Pneumonia",
            Cluster {
                radius: 2.5,
                spread: 4.5,
            },
            90.0,
            Lung,
        ),
        sig("Pneumothorax", Disk { radius: 9.0 }, -45.0, Lung),
        sig("Consolidation", Square { side: 12.0 }, 65.0, Lung),
        sig("Edema", Bilateral { sigma: 5.0 }, 50.0, Global),
        sig("Emphysema", LungShift, -28.0, Global),
        sig("COPD", LungShift, -28.0, Global),
        sig("Fibrosis", fibrosis, 80.0, Lung),
        sig(
            "Pleural Thickening",
            Bar {
                length: 20.0,
                width: 3.0,
                angle_deg: 90.0,
            },
            85.0,
            LungEdge,
        ),
        sig("Hernia", Disk { radius: 6.0 }, 80.0, Midline),
        sig(
            "Granuloma",
            Ring {
                radius: 6.0,
                thickness: 2.5,
            },
            95.0,
            Lung,
        ),
        sig(
            "Scaring",
            Bar {
                length: 18.0,
                width: 3.0,
                angle_deg: 45.0,
            },
            75.0,
            Lung,
        ),
        sig("Bone/Soft Tissue Lesion", Disk { radius: 5.0 }, 90.0, Apex),
        sig("Cardiac Abnormality", heart, 0.0, Global),
        sig(
            "Hilar Abnormality",
            Pair {
                radius: 3.5,
                gap: 9.0,
            },
            90.0,
            Lung,
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSynth {
    pub dataset: Dataset,
    pub patients: usize,
    /// Target images per patient, in `[1, 6]`.
    pub images_per_patient: f64,
    /// Marginal prevalence of each pathology.
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub seed: u64,
    pub datasets: Vec<DatasetSynth>,
    pub signatures: Vec<BlobSignature>,
    /// Stamp located pathologies where their annotation says.
    pub location_correlated: bool,
    /// Std of additive pixel noise on the 0..255 scale.
    pub noise_std: f64,
    /// Fraction of PLCO images whose location annotation is withheld.
    pub location_unavailable_rate: f64,
    /// Chance that a patient's finding persists into each follow-up image.
    pub persistence: f64,
}

impl Default for SynthConfig {
    /// 64x64 films, about ten thousand images over both datasets.
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            seed: 0,
            datasets: vec![
                DatasetSynth {
                    dataset: Dataset::Cxr14,
                    patients: 1500,
                    images_per_patient: 3.6,
                    prevalence: 0.1,
                },
                DatasetSynth {
                    dataset: Dataset::Plco,
                    patients: 1400,
                    images_per_patient: 3.3,
                    prevalence: 0.1,
                },
            ],
            signatures: default_signatures(),
            location_correlated: true,
            noise_std: 8.0,
            location_unavailable_rate: 0.1,
            persistence: 0.85,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size < 32 || !self.image_size.is_multiple_of(4) {
            return bad(format!(
                "image size {} must be a multiple of 4 and >= 32",
                self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.location_unavailable_rate)
            || !(0.0..=1.0).contains(&self.persistence)
        {
            return bad("rates must lie in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std {}", self.noise_std));
        }
        let mut seen = Vec::new();
        for d in &self.datasets {
            if seen.contains(&d.dataset) {
                return bad(format!("{} configured twice", d.dataset));
            }
            seen.push(d.dataset);
            if !(1.0..=6.0).contains(&d.images_per_patient) {
                return bad(format!(
                    "images per patient {} outside [1, 6]",
                    d.images_per_patient
                ));
            }
            if !(0.0..1.0).contains(&d.prevalence) {
                return bad(format!("prevalence {} outside [0, 1)", d.prevalence));
            }
            for p in d.dataset.pathologies() {
                if self.signature(p).is_none() {
                    return bad(format!("no signature for `{p}`"));
                }
            }
        }
        Ok(())
    }

    pub fn signature(&self, pathology: &str) -> Option<&BlobSignature> {
        self.signatures.iter().find(|s| s.pathology == pathology)
    }
}

/// A stamped signature, recorded for auditing the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub pathology: String,
    pub centers: Vec<(f64, f64)>,
    pub diffuse: bool,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub manifests: Vec<Manifest>,
    /// Parallel to each manifest's records.
    pub images: Vec<Vec<RawImage>>,
    pub stamps: Vec<Vec<Vec<Stamp>>>,
}

/// Lung-field geometry of the template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LungTemplate {
    pub size: f64,
    pub top: f64,
    pub bottom: f64,
    /// Horizontal span of the patient's right lung (image left).
    pub right: (f64, f64),
    pub left: (f64, f64),
}

impl LungTemplate {
    pub fn new(size: usize) -> Self {
        let s = size as f64;
        LungTemplate {
            size: s,
            top: 0.14 * s,
            bottom: 0.86 * s,
            right: (0.08 * s, 0.44 * s),
            left: (0.56 * s, 0.92 * s),
        }
    }

    pub fn span(&self, side: Side) -> (f64, f64) {
        match side {
            Side::Left => self.left,
            _ => self.right,
        }
    }

    /// Vertical band `[y0, y1)` of fifth `k` (0 = apex).
    pub fn band(&self, k: usize) -> (f64, f64) {
        let h = (self.bottom - self.top) / 5.0;
        (self.top + h * k as f64, self.top + h * (k + 1) as f64)
    }

    /// Lung side and fifth containing a point, if inside a lung box.
    pub fn locate(&self, x: f64, y: f64) -> Option<(Side, Fifth)> {
        if y < self.top || y >= self.bottom {
            return None;
        }
        let side = if x >= self.right.0 && x < self.right.1 {
            Side::Right
        } else if x >= self.left.0 && x < self.left.1 {
            Side::Left
        } else {
            return None;
        };
        let k = (((y - self.top) / (self.bottom - self.top)) * 5.0).floor() as usize;
        Some((side, Fifth::SINGLE[k.min(4)]))
    }

    fn inside_lung(&self, x: f64, y: f64) -> bool {
        let ell = |(x0, x1): (f64, f64)| {
            let cx = 0.5 * (x0 + x1);
            let cy = 0.5 * (self.top + self.bottom);
            let rx = 0.5 * (x1 - x0);
            let ry = 0.5 * (self.bottom - self.top);
            let u = ((x - cx) / rx).abs();
            let v = ((y - cy) / ry).abs();
            u.powi(4) + v.powi(4) <= 1.0
        };
        ell(self.right) || ell(self.left)
    }
}

/// Annotation implied by stamped centers, independent of the labels.
pub fn annotation_from_stamp(template: &LungTemplate, stamp: &Stamp) -> Option<LocationAnnotation> {
    if stamp.diffuse {
        return Some(LocationAnnotation::new(Side::None, Fifth::None, true));
    }
    let cells: Vec<(Side, Fifth)> = stamp
        .centers
        .iter()
        .map(|&(x, y)| template.locate(x, y))
        .collect::<Option<_>>()?;
    let (side, fifth) = *cells.first()?;
    if cells.iter().any(|c| c.0 != side) {
        return None;
    }
    let multiple = cells.iter().any(|c| c.1 != fifth);
    Some(LocationAnnotation::new(
        side,
        if multiple { Fifth::Multiple } else { fifth },
        false,
    ))
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn add_sdf<F: Fn(f64, f64) -> f64>(&mut self, amp: f64, bounds: (f64, f64, f64, f64), sdf: F) {
        let (x0, y0, x1, y1) = bounds;
        let s = self.size as isize;
        let clampi = |v: f64| (v.floor() as isize).clamp(0, s - 1) as usize;
        for yi in clampi(y0 - 1.0)..=clampi(y1 + 1.0) {
            for xi in clampi(x0 - 1.0)..=clampi(x1 + 1.0) {
                let d = sdf(xi as f64 + 0.5, yi as f64 + 0.5);
                let cover = (0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    self.px[yi * self.size + xi] += amp * cover;
                }
            }
        }
    }

    fn add_gauss(&mut self, amp: f64, cx: f64, cy: f64, sigma: f64) {
        let r = 3.0 * sigma;
        self.add_field((cx - r, cy - r, cx + r, cy + r), |x, y| {
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            amp * (-d2 / (2.0 * sigma * sigma)).exp()
        });
    }

    fn add_field<F: Fn(f64, f64) -> f64>(&mut self, bounds: (f64, f64, f64, f64), f: F) {
        let (x0, y0, x1, y1) = bounds;
        let s = self.size as isize;
        let clampi = |v: f64| (v.floor() as isize).clamp(0, s - 1) as usize;
        for yi in clampi(y0)..=clampi(y1) {
            for xi in clampi(x0)..=clampi(x1) {
                self.px[yi * self.size + xi] += f(xi as f64 + 0.5, yi as f64 + 0.5);
            }
        }
    }
}

fn box_sdf(u: f64, v: f64, hu: f64, hv: f64) -> f64 {
    let du = u.abs() - hu;
    let dv = v.abs() - hv;
    du.max(dv).min(0.0) + (du.max(0.0).powi(2) + dv.max(0.0).powi(2)).sqrt()
}

/// Stamps a compact shape centered at `(cx, cy)`; `k` scales lengths.
fn stamp_shape(c: &mut Canvas, shape: &BlobShape, amp: f64, cx: f64, cy: f64, k: f64) {
    match *shape {
        BlobShape::Disk { radius } => {
            let r = radius * k;
            c.add_sdf(amp, (cx - r, cy - r, cx + r, cy + r), |x, y| {
                ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r
            });
        }
        BlobShape::Ring { radius, thickness } => {
            let (r, t) = (radius * k, thickness * k);
            let o = r + t;
            c.add_sdf(amp, (cx - o, cy - o, cx + o, cy + o), |x, y| {
                (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r).abs() - 0.5 * t
            });
        }
        BlobShape::Bar {
            length,
            width,
            angle_deg,
        } => {
            let (hl, hw) = (0.5 * length * k, 0.5 * width * k);
            let (sn, cs) = angle_deg.to_radians().sin_cos();
            let o = hl + hw;
            c.add_sdf(amp, (cx - o, cy - o, cx + o, cy + o), |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                box_sdf(dx * cs + dy * sn, -dx * sn + dy * cs, hl, hw)
            });
        }
        BlobShape::Cross { length, width } => {
            let (hl, hw) = (0.5 * length * k, 0.5 * width * k);
            c.add_sdf(amp, (cx - hl, cy - hl, cx + hl, cy + hl), |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                box_sdf(dx, dy, hl, hw).min(box_sdf(dx, dy, hw, hl))
            });
        }
        BlobShape::Square { side } => {
            let h = 0.5 * side * k;
            c.add_sdf(amp, (cx - h, cy - h, cx + h, cy + h), |x, y| {
                box_sdf(x - cx, y - cy, h, h)
            });
        }
        BlobShape::Pair { radius, gap } => {
            let (r, g) = (radius * k, 0.5 * gap * k);
            c.add_sdf(amp, (cx - g - r, cy - r, cx + g + r, cy + r), |x, y| {
                let a = ((x - cx + g).powi(2) + (y - cy).powi(2)).sqrt();
                let b = ((x - cx - g).powi(2) + (y - cy).powi(2)).sqrt();
                a.min(b) - r
            });
        }
        BlobShape::Cluster { radius, spread } => {
            let (r, s) = (radius * k, spread * k);
            let offsets = [
                (-s, -0.6 * s),
                (s, -0.4 * s),
                (-0.3 * s, s),
                (0.7 * s, 0.8 * s),
            ];
            let o = s + r;
            c.add_sdf(amp, (cx - o, cy - o, cx + o, cy + o), |x, y| {
                offsets
                    .iter()
                    .map(|(ox, oy)| ((x - cx - ox).powi(2) + (y - cy - oy).powi(2)).sqrt() - r)
                    .fold(f64::INFINITY, f64::min)
            });
        }
        BlobShape::Haze { sigma } | BlobShape::Bilateral { sigma } => {
            c.add_gauss(amp, cx, cy, sigma * k)
        }
        BlobShape::HeartGrow { .. } | BlobShape::BaseFill { .. } | BlobShape::LungShift => {}
    }
}

fn compact_extent(shape: &BlobShape) -> f64 {
    match *shape {
        BlobShape::Disk { radius } => radius,
        BlobShape::Ring { radius, thickness } => radius + thickness,
        BlobShape::Bar { length, .. } => 0.5 * length,
        BlobShape::Cross { length, .. } => 0.5 * length,
        BlobShape::Square { side } => 0.5 * side,
        BlobShape::Pair { radius, gap } => 0.5 * gap + radius,
        BlobShape::Cluster { radius, spread } => spread + radius,
        BlobShape::Haze { sigma } | BlobShape::Bilateral { sigma } => 1.5 * sigma,
        _ => 0.0,
    }
}

struct ImagePlan {
    findings: Vec<String>,
    locations: Vec<LocatedFinding>,
}

/// Point inside the given lung and fifth band, keeping `margin` from the box.
fn point_in(
    t: &LungTemplate,
    side: Side,
    band: (f64, f64),
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let (x0, x1) = t.span(side);
    let inset = margin.min(0.5 * (x1 - x0) - 0.5);
    let x = rng.random_range(x0 + inset..x1 - inset);
    let y = rng.random_range(band.0 + 0.5..band.1 - 0.5);
    (x, y)
}

fn draw_annotation(rng: &mut ChaCha8Rng) -> LocationAnnotation {
    let side = if rng.random_bool(0.5) {
        Side::Left
    } else {
        Side::Right
    };
    let u: f64 = rng.random();
    if u < 0.7 {
        LocationAnnotation::new(side, Fifth::SINGLE[rng.random_range(0..5)], false)
    } else if u < 0.85 {
        LocationAnnotation::new(side, Fifth::Multiple, false)
    } else {
        LocationAnnotation::new(Side::None, Fifth::None, true)
    }
}

fn render(
    cfg: &SynthConfig,
    t: &LungTemplate,
    plan: &ImagePlan,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<Stamp>) {
    let size = cfg.image_size;
    let k = size as f64 / 64.0;
    let s = size as f64;
    let offset = rng.random_range(-8.0..8.0);
    let heart_dx = rng.random_range(-2.0..2.0) * k;
    let lung_level = 55.0 + offset;
    let mut c = Canvas {
        size,
        px: vec![0.0; size * size],
    };
    let sig = |name: &str| cfg.signature(name).expect("validated signature");
    let lung_shift: f64 = plan
        .findings
        .iter()
        .filter(|f| matches!(sig(f).shape, BlobShape::LungShift))
        .map(|f| sig(f).intensity)
        .next()
        .unwrap_or(0.0);
    let heart_factor = plan
        .findings
        .iter()
        .find_map(|f| match sig(f).shape {
            BlobShape::HeartGrow { factor } => Some(factor),
            _ => None,
        })
        .unwrap_or(1.0);

    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let body =
                ((x - 0.5 * s) / (0.49 * s)).powi(2) + ((y - 0.5 * s) / (0.54 * s)).powi(2) <= 1.0;
            let mut v = if body { 125.0 + offset } else { 15.0 };
            if t.inside_lung(x, y) {
                v = lung_level + lung_shift;
            }
            c.px[yi * size + xi] = v;
        }
    }
    // Heart shadow: ellipse low and to the patient's left.
    let (hx, hy) = (0.55 * s + heart_dx, 0.68 * s);
    let (rx, ry) = (0.15 * s * heart_factor, 0.12 * s * heart_factor);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            if ((x - hx) / rx).powi(2) + ((y - hy) / ry).powi(2) <= 1.0 {
                c.px[yi * size + xi] = 150.0 + offset;
            }
        }
    }

    let mut stamps = Vec::new();
    for name in &plan.findings {
        let sg = sig(name);
        let located = LOCATED_PATHOLOGIES.contains(&name.as_str())
            && cfg.location_correlated
            && plan.locations.iter().any(|l| &l.disease == name);
        let margin = compact_extent(&sg.shape) * k;
        let mut centers = Vec::new();
        let mut diffuse = false;
        match sg.shape {
            BlobShape::HeartGrow { .. } | BlobShape::LungShift => {}
            BlobShape::BaseFill { fraction } => {
                let side = if rng.random_bool(0.5) {
                    Side::Left
                } else {
                    Side::Right
                };
                let (x0, x1) = t.span(side);
                let y_top = t.bottom - fraction * (t.bottom - t.top);
                let curve = rng.random_range(2.0..5.0) * k;
                let cx = 0.5 * (x0 + x1);
                c.add_field((x0, y_top - curve, x1, t.bottom), |x, y| {
                    let surface = y_top + curve * (((x - cx) / (x1 - x0)) * 2.0).powi(2) - curve;
                    if t.inside_lung(x, y) && y >= surface {
                        sg.intensity
                    } else {
                        0.0
                    }
                });
            }
            BlobShape::Bilateral { .. } => {
                let band = t.band(rng.random_range(1..4));
                let y = 0.5 * (band.0 + band.1);
                for side in [Side::Right, Side::Left] {
                    let (x0, x1) = t.span(side);
                    let x = 0.5 * (x0 + x1);
                    stamp_shape(&mut c, &sg.shape, sg.intensity, x, y, k);
                }
            }
            _ if located => {
                let ann = plan
                    .locations
                    .iter()
                    .find(|l| &l.disease == name)
                    .expect("located finding has annotation")
                    .annotation;
                if ann.diffuse {
                    diffuse = true;
                    for i in 0..3 {
                        let side = if i % 2 == 0 { Side::Right } else { Side::Left };
                        let p = point_in(t, side, t.band(rng.random_range(0..5)), margin, rng);
                        stamp_shape(&mut c, &sg.shape, 0.8 * sg.intensity, p.0, p.1, 0.8 * k);
                        centers.push(p);
                    }
                } else if ann.fifth == Fifth::Multiple {
                    let a = rng.random_range(0..5);
                    let b = (a + rng.random_range(1..5)) % 5;
                    for f in [a, b] {
                        let p = point_in(t, ann.side, t.band(f), margin, rng);
                        stamp_shape(&mut c, &sg.shape, sg.intensity, p.0, p.1, k);
                        centers.push(p);
                    }
                } else {
                    let f = ann.fifth.index().expect("single fifth");
                    let p = point_in(t, ann.side, t.band(f), margin, rng);
                    stamp_shape(&mut c, &sg.shape, sg.intensity, p.0, p.1, k);
                    centers.push(p);
                }
            }
            _ => {
                let p = match sg.placement {
                    Placement::Lung | Placement::Global => {
                        let side = if rng.random_bool(0.5) {
                            Side::Left
                        } else {
                            Side::Right
                        };
                        point_in(t, side, (t.top + margin, t.bottom - margin), margin, rng)
                    }
                    Placement::LungEdge => {
                        let side = if rng.random_bool(0.5) {
                            Side::Left
                        } else {
                            Side::Right
                        };
                        let (x0, x1) = t.span(side);
                        let x = if side == Side::Right {
                            x0 + 2.0 * k
                        } else {
                            x1 - 2.0 * k
                        };
                        (x, rng.random_range(t.band(1).0..t.band(3).1))
                    }
                    Placement::Apex => (
                        rng.random_range(0.2 * s..0.8 * s),
                        rng.random_range(0.05 * s..0.09 * s),
                    ),
                    Placement::Midline => (0.5 * s + rng.random_range(-2.0..2.0) * k, 0.9 * s),
                };
                stamp_shape(&mut c, &sg.shape, sg.intensity, p.0, p.1, k);
                centers.push(p);
            }
        }
        stamps.push(Stamp {
            pathology: name.clone(),
            centers,
            diffuse,
        });
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise");
        for v in &mut c.px {
            *v += noise.sample(rng);
        }
    }
    (c.px, stamps)
}

fn quantize(px: &[f64], dataset: Dataset) -> RawPixels {
    match dataset {
        Dataset::Cxr14 => RawPixels::U8(
            px.iter()
                .map(|v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
        ),
        // A detector-like response: nonlinear, offset and wide-range.
        Dataset::Plco => RawPixels::U16(
            px.iter()
                .map(|v| {
                    let u = (v / 255.0).clamp(0.0, 1.0);
                    (1500.0 + 60000.0 * u.powf(1.6)).round() as u16
                })
                .collect(),
        ),
    }
}

/// Images per patient: `1 + Binomial(5, (mean - 1) / 5)`, then nudged one
/// image at a time until the total is `round(patients * mean)`.
fn image_counts(patients: usize, mean: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let p = ((mean - 1.0) / 5.0).clamp(0.0, 1.0);
    let binom = Binomial::new(5, p).expect("valid binomial");
    let mut counts: Vec<usize> = (0..patients)
        .map(|_| 1 + binom.sample(rng) as usize)
        .collect();
    let target = (patients as f64 * mean).round() as usize;
    let mut total: usize = counts.iter().sum();
    while total != target && patients > 0 {
        let i = rng.random_range(0..patients);
        if total > target && counts[i] > 1 {
            counts[i] -= 1;
            total -= 1;
        } else if total < target && counts[i] < 6 {
            counts[i] += 1;
            total += 1;
        }
    }
    counts
}

fn generate_patient(
    cfg: &SynthConfig,
    ds: &DatasetSynth,
    t: &LungTemplate,
    patient: usize,
    count: usize,
) -> Vec<(SampleRecord, RawImage, Vec<Stamp>)> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, ds.dataset.as_str(), patient as u64));
    let vocab = ds.dataset.pathologies();
    let p = ds.prevalence;
    let keep = cfg.persistence;
    // Onset rate that keeps each image's marginal prevalence at `p`.
    let onset = if p > 0.0 {
        (p * (1.0 - keep) / (1.0 - p)).min(1.0)
    } else {
        0.0
    };
    let latent: Vec<bool> = vocab.iter().map(|_| rng.random_bool(p)).collect();
    let annotations: Vec<LocationAnnotation> =
        vocab.iter().map(|_| draw_annotation(&mut rng)).collect();
    let prefix = ds.dataset.as_str().to_lowercase();
    let patient_id = format!("{prefix}_p{patient:05}");
    let mut out = Vec::with_capacity(count);
    for img in 0..count {
        let mut findings = Vec::new();
        let mut locations = Vec::new();
        for (j, name) in vocab.iter().enumerate() {
            let present = if latent[j] {
                rng.random_bool(keep)
            } else {
                rng.random_bool(onset)
            };
            if present {
                findings.push(name.to_string());
                if ds.dataset == Dataset::Plco && LOCATED_PATHOLOGIES.contains(name) {
                    locations.push(LocatedFinding {
                        disease: name.to_string(),
                        annotation: annotations[j],
                    });
                }
            }
        }
        let plan = ImagePlan {
            findings,
            locations,
        };
        let (px, stamps) = render(cfg, t, &plan, &mut rng);
        let available =
            ds.dataset == Dataset::Plco && !rng.random_bool(cfg.location_unavailable_rate);
        let record = SampleRecord {
            image_id: format!("{patient_id}_i{img:02}"),
            patient_id: patient_id.clone(),
            dataset: ds.dataset,
            findings: plan.findings,
            locations: if available {
                plan.locations
            } else {
                Vec::new()
            },
            location_available: available,
        };
        let image = RawImage {
            width: cfg.image_size,
            height: cfg.image_size,
            pixels: quantize(&px, ds.dataset),
        };
        out.push((record, image, stamps));
    }
    out
}

/// Generates the corpus described by `config`. The seed alone fixes every
/// record and pixel; patients render in parallel without affecting output.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let t = LungTemplate::new(config.image_size);
    let mut corpus = SynthCorpus {
        config: config.clone(),
        manifests: Vec::new(),
        images: Vec::new(),
        stamps: Vec::new(),
    };
    for ds in &config.datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            config.seed,
            "counts",
            ds.dataset.index() as u64,
        ));
        let counts = image_counts(ds.patients, ds.images_per_patient, &mut rng);
        let per_patient: Vec<_> = counts
            .par_iter()
            .enumerate()
            .map(|(p, &n)| generate_patient(config, ds, &t, p, n))
            .collect();
        let mut records = Vec::new();
        let mut images = Vec::new();
        let mut stamps = Vec::new();
        for (r, i, s) in per_patient.into_iter().flatten() {
            records.push(r);
            images.push(i);
            stamps.push(s);
        }
        corpus.manifests.push(Manifest::new(ds.dataset, records)?);
        corpus.images.push(images);
        corpus.stamps.push(stamps);
    }
    Ok(corpus)
}

impl SynthCorpus {
    pub fn template(&self) -> LungTemplate {
        LungTemplate::new(self.config.image_size)
    }

    /// Normalized 8-bit images paired with targets, dataset by dataset.
    pub fn prepared(&self, space: &LabelSpace) -> Result<Vec<PreparedSample>> {
        let mut out = Vec::new();
        for (m, imgs) in self.manifests.iter().zip(&self.images) {
            let gray: Vec<GrayImage> = imgs
                .par_iter()
                .map(|i| i.prepare())
                .collect::<Result<_>>()?;
            out.extend(prepare_samples(space, &m.records, gray)?);
        }
        Ok(out)
    }

    /// Writes `<dir>/<dataset>/manifest.csv`, the PNGs beside it, and the
    /// generator config as `<dir>/synth_config.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut paths = Vec::new();
        for (m, imgs) in self.manifests.iter().zip(&self.images) {
            let root = dir.join(m.dataset.as_str().to_lowercase());
            fs::create_dir_all(root.join("images"))
                .map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
            let manifest_path = root.join("manifest.csv");
            write_manifest(&manifest_path, m)?;
            m.records
                .par_iter()
                .zip(imgs)
                .try_for_each(|(r, img)| img.write_png(&image_path(&root, &r.image_id)))?;
            paths.push(manifest_path);
        }
        let cfg_path = dir.join("synth_config.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?)
            .map_err(|e| Error::io(format!("writing {}", cfg_path.display()), e))?;
        Ok(paths)
    }
}
