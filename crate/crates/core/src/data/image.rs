//! Pixel containers, PNG I/O, histogram equalization and standardization.

use std::path::Path;

use image::{ImageBuffer, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::Dataset;

/// 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawPixels {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

/// Image as stored on disk, before normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: RawPixels,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height || pixels.is_empty() {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }
}

impl RawImage {
    /// 16-bit images are histogram-equalized; 8-bit images pass through.
    pub fn prepare(&self) -> Result<GrayImage> {
        let pixels = match &self.pixels {
            RawPixels::U8(p) => p.clone(),
            RawPixels::U16(p) => histogram_normalize(p)?,
        };
        GrayImage::new(self.width, self.height, pixels)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?
            .decode()?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let pixels = match img {
            image::DynamicImage::ImageLuma8(b) => RawPixels::U8(b.into_raw()),
            image::DynamicImage::ImageLuma16(b) => RawPixels::U16(b.into_raw()),
            other => RawPixels::U8(other.into_luma8().into_raw()),
        };
        Ok(RawImage {
            width,
            height,
            pixels,
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let shape_err = || Error::Shape(format!("pixel buffer does not fit {w}x{h}"));
        match &self.pixels {
            RawPixels::U8(p) => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, p.clone())
                .ok_or_else(shape_err)?
                .save(path)?,
            RawPixels::U16(p) => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, p.clone())
                .ok_or_else(shape_err)?
                .save(path)?,
        }
        Ok(())
    }
}

/// Global histogram equalization of a 16-bit image onto `0..=255`.
///
/// `out(v) = round(255 * (cdf(v) - cdf_min) / (n - cdf_min))`, where
/// `cdf_min` is the count of the darkest present level. A constant image
/// maps to all zeros. Computed in integers, so rounding is exact
/// (half rounds up).
pub fn histogram_normalize(pixels: &[u16]) -> Result<Vec<u8>> {
    if pixels.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let mut hist = vec![0u64; 1 << 16];
    for &p in pixels {
        hist[p as usize] += 1;
    }
    let n = pixels.len() as u64;
    let mut cdf = hist;
    let mut acc = 0u64;
    let mut cdf_min = 0u64;
    for c in cdf.iter_mut() {
        acc += *c;
        if cdf_min == 0 && acc > 0 {
            cdf_min = acc;
        }
        *c = acc;
    }
    let denom = n - cdf_min;
    if denom == 0 {
        return Ok(vec![0; pixels.len()]);
    }
    Ok(pixels
        .iter()
        .map(|&p| {
            let num = 255 * (cdf[p as usize] - cdf_min);
            ((2 * num + denom) / (2 * denom)) as u8
        })
        .collect())
}

/// Per-channel `(x / 255 - mean) / std` for the three replicated channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Standardizer {
    pub const IMAGENET: Standardizer = Standardizer {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn uniform(mean: f64, std: f64) -> Result<Self> {
        let s = Standardizer {
            mean: [mean; 3],
            std: [std; 3],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (&m, &s) in self.mean.iter().zip(&self.std) {
            if !m.is_finite() || !s.is_finite() || s <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "standardizer needs finite mean and std > 0, got mean {m} std {s}"
                )));
            }
        }
        Ok(())
    }

    /// Population mean and std of `pixel / 255` over all given images.
    pub fn fit<'a, I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a GrayImage>,
    {
        let (mut n, mut s1, mut s2) = (0u128, 0u128, 0u128);
        for img in images {
            for &p in &img.pixels {
                n += 1;
                s1 += p as u128;
                s2 += (p as u128) * (p as u128);
            }
        }
        if n == 0 {
            return Err(Error::InvalidArgument(
                "no pixels to fit statistics on".into(),
            ));
        }
        // Var = (n*s2 - s1^2) / n^2, all exact in integers.
        let var_num = n * s2 - s1 * s1;
        let nf = n as f64;
        let mean = s1 as f64 / nf / 255.0;
        let std = (var_num as f64).sqrt() / nf / 255.0;
        if std == 0.0 {
            return Err(Error::InvalidArgument(
                "training images have zero variance; cannot standardize".into(),
            ));
        }
        Standardizer::uniform(mean, std)
    }

    pub fn apply(&self, channel: usize, pixel: u8) -> f64 {
        (pixel as f64 / 255.0 - self.mean[channel]) / self.std[channel]
    }

    /// Maps a standardized value back to the `[0, 1]` intensity scale.
    pub fn invert(&self, channel: usize, value: f64) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// Writes the three standardized channel planes of `img` into `out`.
pub fn standardize(img: &GrayImage, s: &Standardizer, out: &mut [f64]) -> Result<()> {
    s.validate()?;
    let plane = img.pixels.len();
    if out.len() != 3 * plane {
        return Err(Error::Shape(format!(
            "output holds {} values, need {}",
            out.len(),
            3 * plane
        )));
    }
    for c in 0..3 {
        for (o, &p) in out[c * plane..(c + 1) * plane].iter_mut().zip(&img.pixels) {
            *o = s.apply(c, p);
        }
    }
    Ok(())
}

/// Which statistics standardize each dataset's images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub per_dataset: Vec<(Dataset, Standardizer)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    Dataset,
    Imagenet,
}

impl Normalization {
    pub fn imagenet() -> Self {
        Normalization {
            per_dataset: Dataset::ALL
                .iter()
                .map(|&d| (d, Standardizer::IMAGENET))
                .collect(),
        }
    }

    /// Fits one standardizer per dataset on the given (training) samples.
    pub fn fit<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Dataset, &'a GrayImage)>,
    {
        let mut groups: Vec<(Dataset, Vec<&GrayImage>)> = Vec::new();
        for (d, img) in samples {
            match groups.iter_mut().find(|(g, _)| *g == d) {
                Some((_, v)) => v.push(img),
                None => groups.push((d, vec![img])),
            }
        }
        groups.sort_by_key(|(d, _)| *d);
        let per_dataset = groups
            .into_iter()
            .map(|(d, imgs)| Ok((d, Standardizer::fit(imgs)?)))
            .collect::<Result<_>>()?;
        Ok(Normalization { per_dataset })
    }

    pub fn for_dataset(&self, dataset: Dataset) -> Result<&Standardizer> {
        self.per_dataset
            .iter()
            .find(|(d, _)| *d == dataset)
            .map(|(_, s)| s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no normalization statistics for {dataset}"))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bimodal_maps_to_extremes() {
        let px: Vec<u16> = (0..100)
            .map(|i| if i % 2 == 0 { 0 } else { 65535 })
            .collect();
        let out = histogram_normalize(&px).unwrap();
        for (i, o) in out.iter().enumerate() {
            assert_eq!(*o, if i % 2 == 0 { 0 } else { 255 });
        }
    }

    #[test]
    fn constant_maps_to_zero() {
        assert_eq!(histogram_normalize(&[777; 16]).unwrap(), vec![0; 16]);
        assert!(histogram_normalize(&[]).is_err());
    }

    #[test]
    fn four_levels_match_direct_cdf() {
        let px = [0u16, 100, 200, 300];
        // cdf = 1,2,3,4; cdf_min = 1; out = round(255 * (k - 1) / 3).
        let expected: Vec<u8> = (1..=4u32)
            .map(|k| (255.0 * (k - 1) as f64 / 3.0).round() as u8)
            .collect();
        let out = histogram_normalize(&px).unwrap();
        assert_eq!(out, expected);
        assert!(out.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn standardize_basics() {
        let s = Standardizer::uniform(100.0 / 255.0, 20.0 / 255.0).unwrap();
        let img = GrayImage::new(2, 1, vec![100, 120]).unwrap();
        let mut out = vec![0.0; 6];
        standardize(&img, &s, &mut out).unwrap();
        for c in 0..3 {
            assert!(out[2 * c].abs() < 1e-12);
            assert!((out[2 * c + 1] - 1.0).abs() < 1e-12);
        }
        assert!(Standardizer::uniform(0.5, 0.0).is_err());
        let flat = GrayImage::new(2, 2, vec![9; 4]).unwrap();
        assert!(Standardizer::fit([&flat]).is_err());
    }

    #[test]
    fn png_roundtrip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        for raw in [
            RawImage {
                width: 3,
                height: 2,
                pixels: RawPixels::U8(vec![0, 1, 2, 250, 128, 255]),
            },
            RawImage {
                width: 2,
                height: 2,
                pixels: RawPixels::U16(vec![0, 300, 65535, 4096]),
            },
        ] {
            let p = dir.path().join("x.png");
            raw.write_png(&p).unwrap();
            assert_eq!(RawImage::read_png(&p).unwrap(), raw);
        }
    }

    proptest! {
        #[test]
        fn equalization_preserves_order(px in proptest::collection::vec(any::<u16>(), 1..300)) {
            let out = histogram_normalize(&px).unwrap();
            for i in 0..px.len() {
                for j in 0..px.len() {
                    if px[i] <= px[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        }

        #[test]
        fn standardize_inverts(px in proptest::collection::vec(any::<u8>(), 1..64),
                               mean in 0.0f64..1.0, std in 0.01f64..2.0) {
            let s = Standardizer::uniform(mean, std).unwrap();
            let img = GrayImage::new(px.len(), 1, px.clone()).unwrap();
            let mut out = vec![0.0; 3 * px.len()];
            standardize(&img, &s, &mut out).unwrap();
            for c in 0..3 {
                for (i, &p) in px.iter().enumerate() {
                    let back = s.invert(c, out[c * px.len() + i]);
                    prop_assert!((back - p as f64 / 255.0).abs() < 1e-12);
                }
            }
        }
    }
}
