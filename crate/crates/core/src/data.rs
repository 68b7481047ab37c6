//! Image/label I/O (binary PPM/PGM) and a deterministic synthetic
//! segmentation dataset with flat and textured regions, so patch entropies
//! span the routing range by construction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Sentinel class id excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Dense per-pixel class ids for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, fill: u8) -> Self {
        LabelMap {
            h,
            w,
            data: vec![fill; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }
}

/// One segmentation sample: RGB image in [0,1] plus its label map.
#[derive(Clone, Debug)]
pub struct SegSample<S: Scalar> {
    pub id: String,
    pub image: Tensor<S>,
    pub label: LabelMap,
}

/// Configuration of the synthetic dataset.
#[derive(Clone, Debug)]
pub struct ToyDatasetSpec {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Peak amplitude of the per-pixel texture noise (same value added to
    /// all three channels, so luma spans 2x this range).
    pub texture_amplitude: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            num_samples: 64,
            height: 128,
            width: 128,
            num_classes: 4,
            seed: 1,
            texture_amplitude: 0.25,
            min_shapes: 1,
            max_shapes: 3,
        }
    }
}

impl ToyDatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::invalid(format!(
                "toy dataset size {}x{} must be divisible by 32",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 || self.num_classes > 200 {
            return Err(Error::invalid("num_classes must be in 2..=200"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::invalid("min_shapes exceeds max_shapes"));
        }
        Ok(())
    }
}

/// Distinct base colors; class c uses entry c mod 8.
const PALETTE: [(f64, f64, f64); 8] = [
    (0.12, 0.12, 0.14),
    (0.82, 0.22, 0.16),
    (0.18, 0.74, 0.22),
    (0.20, 0.28, 0.84),
    (0.86, 0.80, 0.18),
    (0.74, 0.18, 0.78),
    (0.16, 0.78, 0.78),
    (0.94, 0.58, 0.22),
];

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generates sample `index` of the dataset; a pure function of
/// (spec.seed, index).
pub fn generate_toy_sample<S: Scalar>(spec: &ToyDatasetSpec, index: usize) -> Result<SegSample<S>> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    let (h, w) = (spec.height, spec.width);
    let mut image = Tensor::<S>::zeros(&[1, 3, h, w]);
    let mut label = LabelMap::new(h, w, 0);

    // flat background in the class-0 color with a small per-sample jitter
    let bg = PALETTE[0];
    let jit = rng.gen_range(-0.04..0.04);
    let bg = [bg.0 + jit, bg.1 + jit, bg.2 + jit];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                image.set4(0, c, y, x, S::from_f64(bg[c].clamp(0.0, 1.0)));
            }
        }
    }

    let num_shapes = if spec.max_shapes == 0 {
        0
    } else {
        rng.gen_range(spec.min_shapes..=spec.max_shapes)
    };
    for _ in 0..num_shapes {
        let class = rng.gen_range(1..spec.num_classes) as u8;
        let base = PALETTE[class as usize % PALETTE.len()];
        let jit = rng.gen_range(-0.04..0.04);
        let color = [base.0 + jit, base.1 + jit, base.2 + jit];
        let is_disc = rng.gen_bool(0.5);
        let cy = rng.gen_range(0..h) as isize;
        let cx = rng.gen_range(0..w) as isize;
        let half = rng.gen_range(h / 8..=h / 3) as isize;
        let textured = spec.texture_amplitude > 0.0 && rng.gen_bool(0.5);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let inside = if is_disc {
                    (y - cy) * (y - cy) + (x - cx) * (x - cx) <= half * half
                } else {
                    (y - cy).abs() <= half && (x - cx).abs() <= half
                };
                if !inside {
                    continue;
                }
                let noise = if textured {
                    rng.gen_range(-spec.texture_amplitude..spec.texture_amplitude)
                } else {
                    0.0
                };
                for c in 0..3 {
                    image.set4(
                        0,
                        c,
                        y as usize,
                        x as usize,
                        S::from_f64((color[c] + noise).clamp(0.0, 1.0)),
                    );
                }
                label.set(y as usize, x as usize, class);
            }
        }
    }
    Ok(SegSample {
        id: format!("toy_{index:04}"),
        image,
        label,
    })
}

pub fn generate_toy_dataset<S: Scalar>(spec: &ToyDatasetSpec) -> Result<Vec<SegSample<S>>> {
    (0..spec.num_samples)
        .map(|i| generate_toy_sample(spec, i))
        .collect()
}

// --- Binary PPM (P6) / PGM (P5), maxval 255 ---

fn read_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::BadMagic {
            expected: magic.to_string(),
            found,
        });
    }
    // magic, then three whitespace-separated integers; '#' starts a comment
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated(format!("{} header", path.display())));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Truncated(format!("{} header", path.display())))?;
        fields.push(v);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Truncated(format!("{} header", path.display())));
    }
    pos += 1; // single whitespace before payload
    Ok((fields[0], fields[1], pos))
}

/// Reads a binary PPM (P6, maxval 255) into a `1 x 3 x H x W` tensor with
/// values v/255.
pub fn read_ppm<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (w, h, payload) = read_header(&bytes, "P6", path)?;
    let maxval_end = payload - 1;
    let maxval = parse_maxval(&bytes, maxval_end, path)?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let need = w * h * 3;
    let data = &bytes[payload..];
    if data.len() < need {
        return Err(Error::Truncated(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            data.len(),
            need
        )));
    }
    let mut out = Tensor::zeros(&[1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * 3;
            for c in 0..3 {
                out.set4(0, c, y, x, S::from_f64(data[o + c] as f64 / 255.0));
            }
        }
    }
    Ok(out)
}

fn parse_maxval(bytes: &[u8], header_end: usize, path: &Path) -> Result<u32> {
    // re-scan the third header field (width, height, maxval)
    let mut pos = 2;
    let mut last = 0u32;
    for _ in 0..3 {
        while pos < header_end && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < header_end && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < header_end && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        last = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Truncated(format!("{} header", path.display())))?;
    }
    Ok(last)
}

/// Writes a `1 x 3 x H x W` tensor in [0,1] as binary PPM; values map to
/// round(v*255), clamped.
pub fn write_ppm<S: Scalar>(image: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "write_ppm expects 1x3xHxW, got {:?}",
            image.shape()
        )));
    }
    let mut buf = Vec::with_capacity(20 + h * w * 3);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (image.get4(0, ch, y, x).as_f64() * 255.0).round().clamp(0.0, 255.0);
                buf.push(v as u8);
            }
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a binary PGM (P5, maxval 255) as a label map; pixel value is the
/// class id (255 = ignore).
pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (w, h, payload) = read_header(&bytes, "P5", path)?;
    let maxval = parse_maxval(&bytes, payload - 1, path)?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let data = &bytes[payload..];
    if data.len() < w * h {
        return Err(Error::Truncated(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            data.len(),
            w * h
        )));
    }
    Ok(LabelMap {
        h,
        w,
        data: data[..w * h].to_vec(),
    })
}

pub fn write_label_pgm(label: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_pgm_gray(label.h, label.w, &label.data, path)
}

/// Writes raw 8-bit gray values as binary PGM (P5, maxval 255).
pub fn write_pgm_gray(h: usize, w: usize, data: &[u8], path: impl AsRef<Path>) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::shape(format!(
            "pgm payload {} bytes vs {}x{}",
            data.len(),
            h,
            w
        )));
    }
    let mut buf = Vec::with_capacity(20 + h * w);
    buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    buf.extend_from_slice(data);
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Loads matching `.ppm`/`.pgm` pairs from two directories. Basenames are
/// matched and ordered lexicographically; pairs whose sizes disagree are
/// skipped and reported in the returned warning list.
pub fn ingest_folder<S: Scalar>(
    img_dir: impl AsRef<Path>,
    label_dir: impl AsRef<Path>,
) -> Result<(Vec<SegSample<S>>, Vec<String>)> {
    let list = |dir: &Path, ext: &str| -> Result<BTreeMap<String, std::path::PathBuf>> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(ext) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), path);
                }
            }
        }
        Ok(out)
    };
    let images = list(img_dir.as_ref(), "ppm")?;
    let labels = list(label_dir.as_ref(), "pgm")?;
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (stem, img_path) in images.iter() {
        let Some(label_path) = labels.get(stem) else {
            continue;
        };
        let image: Tensor<S> = read_ppm(img_path)?;
        let label = read_label_pgm(label_path)?;
        let (_, _, h, w) = image.dims4()?;
        if label.h != h || label.w != w {
            warnings.push(format!(
                "{stem}: image {h}x{w} vs label {}x{}, skipped",
                label.h, label.w
            ));
            continue;
        }
        samples.push(SegSample {
            id: stem.clone(),
            image,
            label,
        });
    }
    if samples.is_empty() && warnings.is_empty() {
        return Err(Error::invalid(
            "no matching image/label basenames between the two directories",
        ));
    }
    Ok((samples, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_is_deterministic() {
        let spec = ToyDatasetSpec {
            num_samples: 3,
            ..Default::default()
        };
        let a = generate_toy_dataset::<f32>(&spec).unwrap();
        let b = generate_toy_dataset::<f32>(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.as_slice(), y.image.as_slice());
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn background_only_sample_is_flat_class_zero() {
        let spec = ToyDatasetSpec {
            num_samples: 1,
            min_shapes: 0,
            max_shapes: 0,
            ..Default::default()
        };
        let s = generate_toy_sample::<f32>(&spec, 0).unwrap();
        assert!(s.label.data.iter().all(|&v| v == 0));
        let map = crate::entropy::compute_entropy_map(&s.image, 32).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_stay_in_class_range() {
        let spec = ToyDatasetSpec {
            num_samples: 8,
            ..Default::default()
        };
        for s in generate_toy_dataset::<f32>(&spec).unwrap() {
            assert!(s.label.data.iter().all(|&v| (v as usize) < spec.num_classes));
            assert!(s
                .image
                .as_slice()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn textured_samples_span_the_entropy_range() {
        let spec = ToyDatasetSpec {
            num_samples: 12,
            seed: 5,
            ..Default::default()
        };
        let mut hi = 0.0f64;
        let mut lo = f64::INFINITY;
        for s in generate_toy_dataset::<f32>(&spec).unwrap() {
            let map = crate::entropy::compute_entropy_map(&s.image, 32).unwrap();
            for &v in &map.values {
                hi = hi.max(v);
                lo = lo.min(v);
            }
        }
        assert!(hi > 1.0, "max entropy over dataset {hi}");
        assert!(lo < 0.1, "min entropy over dataset {lo}");
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        // quantized grid: every value exactly representable as k/255
        let mut img = Tensor::<f32>::zeros(&[1, 3, 4, 5]);
        let mut k = 0u32;
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    img.set4(0, c, y, x, (k % 256) as f32 / 255.0);
                    k = k.wrapping_mul(37).wrapping_add(11);
                }
            }
        }
        write_ppm(&img, &path).unwrap();
        let back: Tensor<f32> = read_ppm(&path).unwrap();
        assert_eq!(back.as_slice(), img.as_slice());
    }

    #[test]
    fn ppm_white_file_reads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.ppm");
        fs::write(&path, [b"P6\n2 2\n255\n".as_ref(), &[255u8; 12]].concat()).unwrap();
        let img: Tensor<f64> = read_ppm(&path).unwrap();
        assert!(img.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.ppm");
        fs::write(&bad_magic, b"P3\n2 2\n255\n").unwrap();
        assert!(matches!(
            read_ppm::<f32>(&bad_magic).unwrap_err(),
            Error::BadMagic { .. }
        ));

        let truncated = dir.path().join("trunc.ppm");
        fs::write(&truncated, [b"P6\n2 2\n255\n".as_ref(), &[0u8; 5]].concat()).unwrap();
        assert!(matches!(
            read_ppm::<f32>(&truncated).unwrap_err(),
            Error::Truncated(_)
        ));

        let maxval = dir.path().join("maxval.ppm");
        fs::write(&maxval, [b"P6\n1 1\n65535\n".as_ref(), &[0u8; 6]].concat()).unwrap();
        assert!(matches!(
            read_ppm::<f32>(&maxval).unwrap_err(),
            Error::UnsupportedMaxval(65535)
        ));
    }

    #[test]
    fn pgm_label_round_trip_preserves_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.pgm");
        let mut label = LabelMap::new(3, 4, 0);
        label.set(0, 0, 3);
        label.set(2, 3, IGNORE_LABEL);
        write_label_pgm(&label, &path).unwrap();
        let back = read_label_pgm(&path).unwrap();
        assert_eq!(back, label);
    }

    #[test]
    fn pgm_rejects_wrong_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, [b"P5\n2 2\n15\n".as_ref(), &[0u8; 4]].concat()).unwrap();
        assert!(matches!(
            read_label_pgm(&path).unwrap_err(),
            Error::UnsupportedMaxval(15)
        ));
    }

    #[test]
    fn ingest_folder_matches_and_reports_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("images");
        let labs = dir.path().join("labels");
        fs::create_dir_all(&imgs).unwrap();
        fs::create_dir_all(&labs).unwrap();
        for (name, (h, w), (lh, lw)) in [
            ("a", (4, 4), (4, 4)),
            ("b", (4, 4), (2, 2)), // size mismatch, must be skipped
            ("c", (4, 4), (4, 4)),
        ] {
            let img = Tensor::<f32>::full(&[1, 3, h, w], 0.5);
            write_ppm(&img, imgs.join(format!("{name}.ppm"))).unwrap();
            write_label_pgm(&LabelMap::new(lh, lw, 0), labs.join(format!("{name}.pgm"))).unwrap();
        }
        let (samples, warnings) = ingest_folder::<f32>(&imgs, &labs).unwrap();
        assert_eq!(
            samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
            vec!["a", "c"]
        );
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains('b'));
    }

    #[test]
    fn ingest_folder_empty_intersection_errors() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("images");
        let labs = dir.path().join("labels");
        fs::create_dir_all(&imgs).unwrap();
        fs::create_dir_all(&labs).unwrap();
        write_ppm(&Tensor::<f32>::zeros(&[1, 3, 2, 2]), imgs.join("x.ppm")).unwrap();
        write_label_pgm(&LabelMap::new(2, 2, 0), labs.join("y.pgm")).unwrap();
        assert!(ingest_folder::<f32>(&imgs, &labs).is_err());
    }
}
