//! Dataset loading, normalization and synthetic fixtures.
//!
//! Labels travel with a [`Dataset`] for evaluation only. Every training entry
//! point in this crate takes the image tensor, never the dataset.
//!
//! # USPS matrix format
//!
//! A text header line `n h w kind` followed by `n` records, where `kind` is
//! `f64` or `u8`:
//!
//! * `f64`: one text line per instance, `label v_1 ... v_{h*w}`, values
//!   whitespace-separated in row-major order.
//! * `u8`: raw binary records right after the header's newline, each one
//!   label byte followed by `h*w` pixel bytes.
//!
//! Values are mapped affinely onto `[-1, 1]` using the global min and max,
//! unless they already span exactly `[-1, 1]`, in which case they are kept
//! bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How raw values were mapped to the stored ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    Identity,
    /// `x / divisor`.
    Scale { divisor: f64 },
    /// `[min, max]` mapped linearly onto `[lo, hi]`.
    Affine { min: f64, max: f64, lo: f64, hi: f64 },
}

impl Normalization {
    pub fn apply(&self, raw: f64) -> f64 {
        match *self {
            Normalization::Identity => raw,
            Normalization::Scale { divisor } => raw / divisor,
            Normalization::Affine { min, max, lo, hi } => lo + (raw - min) * (hi - lo) / (max - min),
        }
    }

    pub fn invert(&self, value: f64) -> f64 {
        match *self {
            Normalization::Identity => value,
            Normalization::Scale { divisor } => value * divisor,
            Normalization::Affine { min, max, lo, hi } => min + (value - lo) * (max - min) / (hi - lo),
        }
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for v in out.data_mut() {
            *v = self.invert(*v);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `n × c × h × w`.
    pub images: Tensor,
    /// Ground truth for evaluation.
    pub labels: Option<Vec<usize>>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[c, h, w]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Number of distinct ground-truth classes, if labeled.
    pub fn classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// A uniform sample of `m` instances, kept in original order.
    pub fn subsample(&self, m: usize, seed: u64) -> Result<Dataset> {
        if m == 0 || m > self.len() {
            return Err(Error::InvalidArgument(format!("cannot sample {m} of {} instances", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), m).into_vec();
        idx.sort_unstable();
        Ok(self.select(&idx))
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.images.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            normalization: self.normalization.clone(),
        }
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason: "file ends inside the header".into(),
        })
}

/// Parses an IDX image file and, optionally, its label file. Pixels are
/// divided by 255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let fmt = |offset: usize, reason: String| Error::Format {
        path: images_path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let magic = read_u32(&bytes, 0, images_path)?;
    if magic != IDX_IMAGES {
        return Err(fmt(0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = read_u32(&bytes, 4, images_path)? as usize;
    let h = read_u32(&bytes, 8, images_path)? as usize;
    let w = read_u32(&bytes, 12, images_path)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() != need {
        return Err(fmt(
            bytes.len().min(need),
            format!("expected {need} bytes for {n} images of {h}x{w}, found {}", bytes.len()),
        ));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(fmt(4, "empty image set".into()));
    }
    let scale = Normalization::Scale { divisor: 255.0 };
    let data = bytes[16..].iter().map(|&b| scale.apply(b as f64)).collect();
    let images = Tensor::new(vec![n, 1, h, w], data)?;

    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lb = fs::read(lp).map_err(|e| Error::io(lp, e))?;
            let lfmt = |offset: usize, reason: String| Error::Format {
                path: lp.to_path_buf(),
                offset: offset as u64,
                reason,
            };
            let magic = read_u32(&lb, 0, lp)?;
            if magic != IDX_LABELS {
                return Err(lfmt(0, format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
            }
            let ln = read_u32(&lb, 4, lp)? as usize;
            if ln != n {
                return Err(lfmt(4, format!("{ln} labels for {n} images")));
            }
            if lb.len() != 8 + n {
                return Err(lfmt(lb.len().min(8 + n), format!("expected {} bytes", 8 + n)));
            }
            Some(lb[8..].iter().map(|&b| b as usize).collect())
        }
    };
    Ok(Dataset {
        name: images_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        images,
        labels,
        normalization: scale,
    })
}

/// Writes images (values in `[0, 1]`, rounded to bytes) and optional labels
/// as IDX files.
pub fn write_idx(images_path: &Path, labels_path: Option<&Path>, images: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "IDX images must be n × 1 × h × w".into(),
        });
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(images_path, out).map_err(|e| Error::io(images_path, e))?;
    if let (Some(lp), Some(l)) = (labels_path, labels) {
        let mut out = Vec::with_capacity(8 + l.len());
        out.extend_from_slice(&IDX_LABELS.to_be_bytes());
        out.extend_from_slice(&(l.len() as u32).to_be_bytes());
        for &y in l {
            out.push(u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} does not fit a byte")))?);
        }
        fs::write(lp, out).map_err(|e| Error::io(lp, e))?;
    }
    Ok(())
}

/// Loads the four standard MNIST files from `dir` and concatenates the
/// training and test sets (70000 instances).
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let part = |img: &str, lab: &str| load_idx(&dir.join(img), Some(&dir.join(lab)));
    let train = part("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = part("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let mut labels = train.labels.expect("loaded with labels");
    labels.extend(test.labels.expect("loaded with labels"));
    Ok(Dataset {
        name: "mnist".into(),
        images: Tensor::vstack(&[train.images, test.images])?,
        labels: Some(labels),
        normalization: train.normalization,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UspsKind {
    F64,
    U8,
}

pub fn load_usps(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt(0, "missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| fmt(0, "header is not text".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |i: usize| -> Result<usize> {
        fields
            .get(i)
            .and_then(|f| f.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| fmt(0, format!("header `{header}` needs `n h w kind` with positive sizes")))
    };
    let (n, h, w) = (parse_dim(0)?, parse_dim(1)?, parse_dim(2)?);
    let kind = match fields.get(3).copied() {
        Some("f64") => UspsKind::F64,
        Some("u8") => UspsKind::U8,
        _ => return Err(fmt(0, format!("header `{header}` has unknown kind"))),
    };
    if fields.len() != 4 {
        return Err(fmt(0, format!("header `{header}` has extra fields")));
    }
    let hw = h * w;
    let body = &bytes[header_end + 1..];
    let mut labels = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n * hw);
    match kind {
        UspsKind::U8 => {
            let rec = hw + 1;
            if body.len() != n * rec {
                return Err(fmt(
                    header_end + 1 + body.len().min(n * rec),
                    format!("expected {n} records of {rec} bytes, found {} bytes", body.len()),
                ));
            }
            for r in body.chunks_exact(rec) {
                labels.push(r[0] as usize);
                raw.extend(r[1..].iter().map(|&b| b as f64));
            }
        }
        UspsKind::F64 => {
            let text = std::str::from_utf8(body).map_err(|_| fmt(header_end + 1, "body is not text".into()))?;
            let mut offset = header_end + 1;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for i in 0..n {
                let line = lines
                    .next()
                    .ok_or_else(|| fmt(bytes.len(), format!("header promises {n} rows, found {i}")))?;
                let mut it = line.split_whitespace();
                // integral floats such as `6.0000` are accepted as labels
                let label = it
                    .next()
                    .and_then(|t| {
                        t.parse::<usize>().ok().or_else(|| {
                            t.parse::<f64>()
                                .ok()
                                .filter(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v))
                                .map(|v| v as usize)
                        })
                    })
                    .ok_or_else(|| fmt(offset, format!("row {i}: bad label")))?;
                let before = raw.len();
                for tok in it {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| fmt(offset, format!("row {i}: `{tok}` is not a number")))?;
                    raw.push(v);
                }
                if raw.len() - before != hw {
                    return Err(fmt(offset, format!("row {i}: expected {hw} values, found {}", raw.len() - before)));
                }
                labels.push(label);
                offset += line.len() + 1;
            }
            if lines.next().is_some() {
                return Err(fmt(offset, format!("more than {n} rows")));
            }
        }
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("values in {}", path.display())));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalization = if min == -1.0 && max == 1.0 {
        Normalization::Identity
    } else if max > min {
        Normalization::Affine {
            min,
            max,
            lo: -1.0,
            hi: 1.0,
        }
    } else {
        return Err(fmt(header_end + 1, "all values are equal; cannot normalize".into()));
    };
    for v in &mut raw {
        *v = normalization.apply(*v);
    }
    Ok(Dataset {
        name: "usps".into(),
        images: Tensor::new(vec![n, 1, h, w], raw)?,
        labels: Some(labels),
        normalization,
    })
}

/// Writes the USPS matrix format. `u8` requires integer values in `0..=255`.
pub fn write_usps(path: &Path, images: &Tensor, labels: &[usize], kind: UspsKind) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || labels.len() != s[0] {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected n × 1 × h × w images with n labels".into(),
        });
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    match kind {
        UspsKind::F64 => {
            let mut out = format!("{n} {h} {w} f64\n");
            for (row, &y) in images.iter_rows().zip(labels) {
                let _ = write!(out, "{y}");
                for v in row {
                    let _ = write!(out, " {v}");
                }
                out.push('\n');
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        UspsKind::U8 => {
            let mut out = format!("{n} {h} {w} u8\n").into_bytes();
            for (row, &y) in images.iter_rows().zip(labels) {
                let byte = |v: f64| -> Result<u8> {
                    if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                        Ok(v as u8)
                    } else {
                        Err(Error::InvalidArgument(format!("{v} is not a pixel byte")))
                    }
                };
                out.push(byte(y as f64)?);
                for &v in row {
                    out.push(byte(v)?);
                }
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
    }
}

/// `classes` random templates in `[0, 1]`, each repeated `per_class` times
/// with independent `N(0, sigma)` pixel noise. Instances are grouped by
/// class.
pub fn make_synthetic_blobs(classes: usize, per_class: usize, image_size: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || image_size == 0 || !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(
            "classes, per_class and image_size must be positive and sigma non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = image_size * image_size;
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..pixels).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(classes * per_class * pixels);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(t.iter().map(|&v| if sigma == 0.0 { v } else { v + noise.sample(&mut rng) }));
            labels.push(c);
        }
    }
    Ok(Dataset {
        name: format!("blobs-{classes}x{per_class}"),
        images: Tensor::new(vec![classes * per_class, 1, image_size, image_size], data)?,
        labels: Some(labels),
        normalization: Normalization::Identity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_shapes_and_noise() {
        let d = make_synthetic_blobs(3, 100, 8, 0.1, 1).unwrap();
        assert_eq!(d.len(), 300);
        assert_eq!(d.image_shape(), [1, 8, 8]);
        let clean = make_synthetic_blobs(2, 4, 5, 0.0, 1).unwrap();
        for i in 1..4 {
            assert_eq!(clean.images.row(0), clean.images.row(i));
        }
        let other = make_synthetic_blobs(2, 4, 5, 0.0, 2).unwrap();
        assert_ne!(clean.images.row(0), other.images.row(0));
    }

    #[test]
    fn normalization_inverts() {
        let a = Normalization::Affine {
            min: 0.0,
            max: 2.0,
            lo: -1.0,
            hi: 1.0,
        };
        assert_eq!(a.apply(2.0), 1.0);
        assert_eq!(a.invert(a.apply(0.5)), 0.5);
        let s = Normalization::Scale { divisor: 255.0 };
        assert!((s.invert(s.apply(37.0)) - 37.0).abs() < 1e-12);
    }

    #[test]
    fn subsample_is_seeded() {
        let d = make_synthetic_blobs(2, 10, 4, 0.1, 0).unwrap();
        let a = d.subsample(5, 9).unwrap();
        assert_eq!(a, d.subsample(5, 9).unwrap());
        assert_eq!(a.len(), 5);
        assert!(d.subsample(21, 0).is_err());
    }
}
