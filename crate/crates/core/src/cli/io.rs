//! Raster and tensor I/O, input discovery, and the run manifest.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::dprt::{write_atomic, Tensor};
use crate::field_ops::{RealImage, ValueRange};
use crate::forward_model::MeasurementSet;
use crate::{Error, Result};

/// Reads an 8-bit raster (grayscale or RGB) or a DPRT float image.
pub fn read_image(path: &Path) -> Result<RealImage> {
    if path.extension().is_some_and(|e| e == "dprt") {
        return Tensor::read_file(path)?.to_image(ValueRange::Unit);
    }
    let img = image::open(path)?;
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = if gray {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    // interleaved → planar
    let mut data = vec![0.0; h * w * channels];
    for (i, &b) in bytes.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * h * w + pix] = f64::from(b) / 255.0;
    }
    RealImage::from_vec(h, w, channels, data, ValueRange::Unit)
}

/// Encodes a unit-range image with 1 or 3 channels as 8-bit PNG.
pub fn png_bytes(img: &RealImage) -> Result<Vec<u8>> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut raw = vec![0u8; h * w * c];
    for ch in 0..c {
        for (pix, &v) in img.plane(ch).iter().enumerate() {
            raw[pix * c + ch] = q(v);
        }
    }
    let dynimg = match c {
        1 => DynamicImage::ImageLuma8(image::GrayImage::from_raw(w as u32, h as u32, raw).expect("sized")),
        3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w as u32, h as u32, raw).expect("sized")),
        _ => return Err(Error::Argument(format!("cannot write a {c}-channel raster"))),
    };
    let mut buf = Cursor::new(Vec::new());
    dynimg.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects the outputs of one run and writes them atomically.
#[derive(Debug, Default)]
pub struct OutputSet {
    pub dir: PathBuf,
    pub records: Vec<OutputRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    /// Absent for files that carry wall-clock measurements.
    pub sha256: Option<String>,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.write_with(name, bytes, true)
    }

    pub fn write_with(&mut self, name: &str, bytes: &[u8], hashed: bool) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.records.push(OutputRecord {
            path: name.to_string(),
            sha256: hashed.then(|| sha256_hex(bytes)),
        });
        Ok(path)
    }

    /// `<name>.png` when the channel count allows, plus `<name>.dprt`.
    pub fn write_image(&mut self, name: &str, img: &RealImage) -> Result<()> {
        if img.channels == 1 || img.channels == 3 {
            self.write(&format!("{name}.png"), &png_bytes(img)?)?;
        }
        self.write(&format!("{name}.dprt"), &Tensor::from_image(img).encode())?;
        Ok(())
    }

    pub fn write_measurement(&mut self, stem: &str, m: &MeasurementSet) -> Result<()> {
        let t = Tensor::real(m.meta.geometry.out_dims(), m.y.iter().map(|&v| v as f32).collect())?;
        self.write(&format!("{stem}.dprt"), &t.encode())?;
        self.write(
            &format!("{stem}.json"),
            serde_json::to_string_pretty(&m.meta)?.as_bytes(),
        )?;
        Ok(())
    }
}

/// Written as `manifest.json` in the output directory of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub outputs: Vec<OutputRecord>,
    /// Per-item details keyed by item name: residuals, sampler manifests.
    pub items: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }

    /// Names of hashed outputs whose recorded digest differs from `other`.
    pub fn mismatches(&self, other: &Manifest) -> Vec<String> {
        let theirs: BTreeMap<&str, &Option<String>> =
            other.outputs.iter().map(|r| (r.path.as_str(), &r.sha256)).collect();
        self.outputs
            .iter()
            .filter(|r| r.sha256.is_some() && theirs.get(r.path.as_str()) != Some(&&r.sha256))
            .map(|r| r.path.clone())
            .collect()
    }
}

/// Expands directories to the measurement sidecars they contain.
pub fn measurement_stems(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut stems = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| {
                    q.extension().is_some_and(|e| e == "json") && q.file_stem().is_some_and(|s| s != "manifest")
                })
                .map(|q| q.with_extension(""))
                .collect();
            found.sort();
            stems.extend(found);
        } else if p.exists() || p.with_extension("json").exists() {
            stems.push(p.with_extension(""));
        } else {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("input {} does not exist", p.display()),
            )));
        }
    }
    Ok(stems)
}

/// Splits `name_c<k>` into `(name, k)`.
pub fn split_channel(stem: &str) -> (&str, Option<usize>) {
    if let Some((base, k)) = stem.rsplit_once("_c") {
        if let Ok(k) = k.parse() {
            return (base, Some(k));
        }
    }
    (stem, None)
}

/// Loads measurement sets and groups the channels of each image, ordered by
/// channel index.
pub fn load_grouped(inputs: &[PathBuf]) -> Result<Vec<(String, Vec<MeasurementSet>)>> {
    let mut groups: BTreeMap<String, Vec<(usize, MeasurementSet)>> = BTreeMap::new();
    for stem in measurement_stems(inputs)? {
        let file = stem
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let (base, k) = split_channel(&file);
        let m = MeasurementSet::load(&stem)?;
        groups
            .entry(base.to_string())
            .or_default()
            .push((k.unwrap_or(m.meta.channel), m));
    }
    groups
        .into_iter()
        .map(|(name, mut chans)| {
            chans.sort_by_key(|c| c.0);
            if chans.iter().enumerate().any(|(i, c)| c.0 != i) {
                return Err(Error::Argument(format!(
                    "channels of `{name}` are not 0..{}",
                    chans.len()
                )));
            }
            Ok((name, chans.into_iter().map(|c| c.1).collect()))
        })
        .collect()
}

pub fn file_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}
