//! Image ingestion (PGM), bilinear resizing, directory-labeled dataset
//! loading with deterministic splits, and a synthetic uneven-illumination
//! defect-image generator that stands in for a real inspection corpus.
//!
//! On-disk interchange is plain PGM (binary P5 or ASCII P2, maxval up to
//! 65535 with big-endian two-byte samples). Directory layout is one
//! subdirectory per class: `<root>/<class_name>/*.pgm`. Class order is the
//! case-sensitive byte-wise sort of the subdirectory names, except in binary
//! mode where `bad` is remapped to index 0 and `OK` to index 1.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// One labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` tensor with values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Source path, or a descriptor string for generated images.
    pub source: String,
}

/// Ordered, labeled sample collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// PGM parsing and writing
// ---------------------------------------------------------------------------

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmCursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and `#` comment lines.
    fn skip_space(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(b) = self.peek() {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self) -> Result<u64> {
        self.skip_space();
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an unsigned decimal number"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are ASCII");
        text.parse().map_err(|_| self.err("number out of range"))
    }
}

/// Parses a P5 (binary) or P2 (ASCII) PGM image into a `[1, H, W]` tensor
/// with pixel values divided by maxval.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = PgmCursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(cur.err("file too short for a PGM magic"));
    }
    let magic = &bytes[0..2];
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        other => {
            return Err(cur.err(format!(
                "unsupported magic {:?} (only P2/P5 grayscale PGM)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    cur.pos = 2;
    let width = cur.read_number()? as usize;
    let height = cur.read_number()? as usize;
    let maxval = cur.read_number()?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.err(format!("maxval {maxval} outside 1..=65535")));
    }
    let n = width * height;
    let mut data = Vec::with_capacity(n);
    if binary {
        // Exactly one whitespace byte separates maxval from the raster.
        match cur.peek() {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(cur.err("expected whitespace before binary raster")),
        }
        let bytes_per = if maxval > 255 { 2 } else { 1 };
        let need = n * bytes_per;
        if bytes.len() - cur.pos < need {
            cur.pos = bytes.len();
            return Err(cur.err(format!(
                "truncated raster: need {need} bytes, have {}",
                bytes.len() - cur.pos
            )));
        }
        for i in 0..n {
            let base = cur.pos + i * bytes_per;
            let raw = if bytes_per == 2 {
                u16::from_be_bytes([bytes[base], bytes[base + 1]]) as u64
            } else {
                bytes[base] as u64
            };
            if raw > maxval {
                cur.pos = base;
                return Err(cur.err(format!("sample {raw} exceeds maxval {maxval}")));
            }
            data.push(raw as f64 / maxval as f64);
        }
    } else {
        for _ in 0..n {
            let raw = cur.read_number()?;
            if raw > maxval {
                return Err(cur.err(format!("sample {raw} exceeds maxval {maxval}")));
            }
            data.push(raw as f64 / maxval as f64);
        }
    }
    Tensor::from_data(&[1, height, width], data)
}

/// Reads a PGM file from disk.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref())?;
    parse_pgm(&bytes)
}

/// Encodes a `[1, H, W]` tensor as binary P5 PGM with maxval 255, rounding
/// each value to the nearest 8-bit level.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    let (h, w) = match shape {
        &[1, h, w] => (h, w),
        other => return Err(Error::Shape(format!("expected [1,H,W] image, got {other:?}"))),
    };
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("writing to a Vec cannot fail");
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

/// Writes a `[1, H, W]` tensor to disk as 8-bit binary PGM.
pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let bytes = encode_pgm(image)?;
    fs::write(path.as_ref(), bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

/// Corner-aligned bilinear resize of a `[1, H, W]` image. Identity extents
/// reproduce the input bitwise.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        &[1, h, w] => (h, w),
        other => return Err(Error::Shape(format!("expected [1,H,W] image, got {other:?}"))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target extent must be >= 1".into()));
    }
    if out_h == h && out_w == w {
        return Ok(image.clone());
    }
    let src_coord = |i: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n > 1 {
            i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        } else {
            (in_n - 1) as f64 / 2.0
        }
    };
    let inp = image.data();
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = src_coord(y, out_h, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = src_coord(x, out_w, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v00 = inp[y0 * w + x0];
            let v01 = inp[y0 * w + x1];
            let v10 = inp[y1 * w + x0];
            let v11 = inp[y1 * w + x1];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            data.push(top + (bot - top) * fy);
        }
    }
    Tensor::from_data(&[1, out_h, out_w], data)
}

// ---------------------------------------------------------------------------
// Directory loading and splitting
// ---------------------------------------------------------------------------

/// True when the sorted class list is exactly the binary OK/bad pair, which
/// gets the fixed mapping bad=0, OK=1.
fn is_binary_ok_bad(names: &[String]) -> bool {
    names.len() == 2 && names.iter().any(|n| n == "OK") && names.iter().any(|n| n == "bad")
}

/// Loads `<root>/<class>/*.pgm`, resizing every image to the target extents.
pub fn load_dataset_dir(
    root: impl AsRef<Path>,
    target_h: usize,
    target_w: usize,
) -> Result<Dataset> {
    let root = root.as_ref();
    let mut class_names: Vec<String> = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            class_names.push(name);
        }
    }
    if class_names.is_empty() {
        return Err(Error::Dataset(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }
    class_names.sort();
    if is_binary_ok_bad(&class_names) {
        class_names = vec!["bad".into(), "OK".into()];
    }

    let mut samples = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        files.sort();
        for path in files {
            let raw = load_pgm(&path).map_err(|e| match e {
                Error::Parse { offset, msg } => Error::Parse {
                    offset,
                    msg: format!("{}: {msg}", path.display()),
                },
                other => other,
            })?;
            let image = resize_bilinear(&raw, target_h, target_w)?;
            samples.push(Sample {
                image,
                label,
                source: path.display().to_string(),
            });
        }
    }
    Ok(Dataset { samples, class_names })
}

/// Per-class stratified split: `ceil(val_fraction * n_c)` samples of each
/// class go to the validation set, chosen by a seeded permutation.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Range(format!(
            "val_fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut to_val = vec![false; dataset.samples.len()];
    for class in 0..dataset.class_names.len() {
        let mut idxs: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        let n_val = (val_fraction * idxs.len() as f64).ceil() as usize;
        rng.shuffle(&mut idxs);
        for &i in idxs.iter().take(n_val) {
            to_val[i] = true;
        }
    }
    let pick = |val: bool| Dataset {
        samples: dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| to_val[*i] == val)
            .map(|(_, s)| s.clone())
            .collect(),
        class_names: dataset.class_names.clone(),
    };
    Ok((pick(false), pick(true)))
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Defect overlays supported by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    None,
    Scratch,
    Pit,
    Patch,
}

/// Parameters of one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Base gray level in `[0, 1]`.
    pub base_level: f64,
    /// Left-to-right linear intensity drop as a fraction of base per width.
    pub illum_slope: f64,
    pub noise_sigma: f64,
    pub defect_kind: DefectKind,
    pub seed: u64,
}

// Fixed defect rendering constants. Chosen so defects stay visible under the
// strongest illumination slope (0.5).
const SCRATCH_DEPTH: f64 = 0.3;
const PIT_DEPTH: f64 = 0.4;
const PATCH_DEPTH: f64 = 0.2;

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // SplitMix64 finalizer over seed + salt; decorrelates derived streams.
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Distance from point `p` to the segment `a`-`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders the defect overlay mask (values <= 0) for `spec`.
fn defect_mask(spec: &SynthSpec, rng: &mut Rng) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let mut mask = vec![0.0; w * h];
    match spec.defect_kind {
        DefectKind::None => {}
        DefectKind::Scratch => {
            // Line segment between two random endpoints, width 1..3 px.
            let a = (
                rng.next_f64() * (w - 1) as f64,
                rng.next_f64() * (h - 1) as f64,
            );
            let b = (
                rng.next_f64() * (w - 1) as f64,
                rng.next_f64() * (h - 1) as f64,
            );
            let width = 1.0 + rng.next_f64() * 2.0;
            for y in 0..h {
                for x in 0..w {
                    let d = segment_distance((x as f64, y as f64), a, b);
                    // Anti-aliased coverage ramp over one pixel.
                    let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                    mask[y * w + x] = -SCRATCH_DEPTH * cover;
                }
            }
        }
        DefectKind::Pit => {
            let rx = 2.0 + rng.next_f64() * 4.0; // 2..6 px
            let ry = 2.0 + rng.next_f64() * 4.0;
            let cx = rng.next_f64() * (w - 1) as f64;
            let cy = rng.next_f64() * (h - 1) as f64;
            for y in 0..h {
                for x in 0..w {
                    let nx = (x as f64 - cx) / rx;
                    let ny = (y as f64 - cy) / ry;
                    if nx * nx + ny * ny <= 1.0 {
                        mask[y * w + x] = -PIT_DEPTH;
                    }
                }
            }
        }
        DefectKind::Patch => {
            // Side lengths 8..25% of the image width.
            let side = |r: &mut Rng| ((0.08 + r.next_f64() * 0.17) * w as f64).round().max(2.0) as usize;
            let pw = side(rng).min(w);
            let ph = side(rng).min(h);
            let x0 = rng.next_below(w - pw + 1);
            let y0 = rng.next_below(h - ph + 1);
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    mask[y * w + x] = -PATCH_DEPTH;
                }
            }
        }
    }
    mask
}

/// Generates one image: uneven left-to-right illumination, optional defect
/// overlay, Gaussian noise, clamped to `[0, 1]`. Labels follow the binary
/// convention: 1 ("OK") when defect-free, else 0.
pub fn synth_image(spec: &SynthSpec) -> Sample {
    let (w, h) = (spec.width, spec.height);
    let mut geo_rng = Rng::new(mix_seed(spec.seed, 1));
    let mut noise_rng = Rng::new(mix_seed(spec.seed, 2));
    let mask = defect_mask(spec, &mut geo_rng);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let illum = spec.base_level * (1.0 - spec.illum_slope * x as f64 / w as f64);
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * noise_rng.next_gaussian()
            } else {
                0.0
            };
            data.push((illum + mask[y * w + x] + noise).clamp(0.0, 1.0));
        }
    }
    let image = Tensor::from_data(&[1, h, w], data).expect("clamped finite pixels");
    let kind = match spec.defect_kind {
        DefectKind::None => "none",
        DefectKind::Scratch => "scratch",
        DefectKind::Pit => "pit",
        DefectKind::Patch => "patch",
    };
    Sample {
        image,
        label: usize::from(spec.defect_kind == DefectKind::None),
        source: format!("synth:{kind}:seed={}", spec.seed),
    }
}

/// Class layout of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthClasses {
    /// `bad` (scratch/pit/patch, cycling) vs `OK` (defect-free).
    Binary,
    /// `patches` vs `scratches`, both defective.
    PatchesVsScratches,
}

impl std::str::FromStr for SynthClasses {
    type Err = Error;

    fn from_str(s: &str) -> Result<SynthClasses> {
        match s {
            "binary" => Ok(SynthClasses::Binary),
            "defects" => Ok(SynthClasses::PatchesVsScratches),
            other => Err(Error::Config(format!(
                "unknown synth mode {other:?} (expected binary or defects)"
            ))),
        }
    }
}

/// Balanced synthetic dataset: `n_per_class` images per class, illumination
/// slope varied per sample in `[0.2, 0.5]`.
pub fn synth_dataset(
    n_per_class: usize,
    width: usize,
    height: usize,
    seed: u64,
    classes: SynthClasses,
) -> Dataset {
    let class_names: Vec<String> = match classes {
        SynthClasses::Binary => vec!["bad".into(), "OK".into()],
        SynthClasses::PatchesVsScratches => vec!["patches".into(), "scratches".into()],
    };
    let mut samples = Vec::with_capacity(2 * n_per_class);
    for (label, _) in class_names.iter().enumerate() {
        for i in 0..n_per_class {
            let sample_seed = mix_seed(seed, ((label as u64) << 32) | i as u64);
            let mut knobs = Rng::new(mix_seed(sample_seed, 3));
            let illum_slope = 0.2 + knobs.next_f64() * 0.3;
            let base_level = 0.85;
            let defect_kind = match (classes, label) {
                (SynthClasses::Binary, 1) => DefectKind::None,
                (SynthClasses::Binary, _) => match i % 3 {
                    0 => DefectKind::Scratch,
                    1 => DefectKind::Pit,
                    _ => DefectKind::Patch,
                },
                (SynthClasses::PatchesVsScratches, 0) => DefectKind::Patch,
                (SynthClasses::PatchesVsScratches, _) => DefectKind::Scratch,
            };
            let spec = SynthSpec {
                width,
                height,
                base_level,
                illum_slope,
                noise_sigma: 0.01,
                defect_kind,
                seed: sample_seed,
            };
            let mut sample = synth_image(&spec);
            sample.label = label;
            samples.push(sample);
        }
    }
    Dataset { samples, class_names }
}
