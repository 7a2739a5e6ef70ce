//! Hyperspectral cubes: file I/O, patch extraction, augmentation,
//! normalization, stratified splitting and synthetic scene generation.
//!
//! # File formats
//!
//! Cube file (`.hsc`), little-endian throughout:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `HSC1`                            |
//! | 4      | 4    | `m` (rows, u32)                         |
//! | 8      | 4    | `n` (columns, u32)                      |
//! | 12     | 4    | `l` (bands, u32)                        |
//! | 16     | 4    | dtype code: 1 = f32, 2 = f64            |
//! | 20     | ...  | `l * m * n` values, band-major, row-major within a band |
//!
//! Label file (`.hsl`, same stem as the cube): magic `HSL1`, u32 `m`,
//! u32 `n`, then `m * n` u16 labels row-major. Label 0 means unlabeled.
//!
//! [`save_cube`] writes f32 whenever every value survives the f32 round trip
//! exactly and f64 otherwise, so save-then-load is always bit exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const LABEL_MAGIC: &[u8; 4] = b"HSL1";
const DTYPE_F32: u32 = 1;
const DTYPE_F64: u32 = 2;

/// An `m x n` image with `l` bands plus its label raster.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    /// `[l, m, n]`, band-major.
    pub values: Tensor,
    /// Row-major `m * n`; 0 = unlabeled, `1..=c` = class.
    pub labels: Vec<u16>,
}

impl HsiCube {
    pub fn new(values: Tensor, labels: Vec<u16>) -> Result<Self> {
        let [_, m, n] = *values.shape() else {
            return arg_err(format!(
                "cube values must be [bands, rows, cols], got {:?}",
                values.shape()
            ));
        };
        if labels.len() != m * n {
            return arg_err(format!(
                "label raster has {} entries, cube has {m}x{n} pixels",
                labels.len()
            ));
        }
        Ok(HsiCube { values, labels })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn label(&self, i: usize, j: usize) -> u16 {
        self.labels[i * self.cols() + j]
    }

    /// Largest label value present.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Pixel count per class, index 0 holding the unlabeled count.
    pub fn class_populations(&self) -> Vec<usize> {
        let mut pop = vec![0; self.num_classes() + 1];
        for &l in &self.labels {
            pop[l as usize] += 1;
        }
        pop
    }

    /// Spectrum of pixel `(i, j)`.
    pub fn spectrum(&self, i: usize, j: usize) -> Vec<f64> {
        let (m, n) = (self.rows(), self.cols());
        let v = self.values.data();
        (0..self.bands()).map(|b| v[(b * m + i) * n + j]).collect()
    }

    /// Labeled pixel coordinates in row-major order.
    pub fn labeled_pixels(&self) -> Vec<(usize, usize)> {
        let n = self.cols();
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(k, _)| (k / n, k % n))
            .collect()
    }
}

/// Path of the label file that accompanies a cube file.
pub fn labels_path(cube_path: &Path) -> PathBuf {
    cube_path.with_extension("hsl")
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset: offset as u64,
        message: message.into(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return parse_err(
                self.pos,
                format!(
                    "truncated {what}: need {len} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            );
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return parse_err(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            );
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return parse_err(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn checked_len(dims: &[u32], offset: usize) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .map_or_else(|| parse_err(offset, format!("dimensions {dims:?} overflow")), Ok)
}

pub fn encode_cube_values(values: &Tensor) -> Result<Vec<u8>> {
    let [l, m, n] = *values.shape() else {
        return arg_err("cube values must be rank 3");
    };
    let exact_f32 = values.data().iter().all(|&v| (v as f32) as f64 == v || v.is_nan());
    let mut out = Vec::with_capacity(20 + values.len() * if exact_f32 { 4 } else { 8 });
    out.extend_from_slice(CUBE_MAGIC);
    for d in [m, n, l] {
        let d = u32::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    if exact_f32 {
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for &v in values.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    } else {
        out.extend_from_slice(&DTYPE_F64.to_le_bytes());
        for &v in values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_cube_values(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CUBE_MAGIC)?;
    let m = r.u32("header")?;
    let n = r.u32("header")?;
    let l = r.u32("header")?;
    let dtype_at = r.pos;
    let dtype = r.u32("header")?;
    let count = checked_len(&[m, n, l], 4)?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return parse_err(dtype_at, format!("unknown dtype code {other}")),
    };
    let payload_len = count
        .checked_mul(width)
        .map_or_else(|| parse_err(4, "payload size overflows"), Ok)?;
    if bytes.len() - r.pos != payload_len {
        return parse_err(
            r.pos,
            format!(
                "header declares {m}x{n}x{l} values ({payload_len} bytes) but payload has {} bytes",
                bytes.len() - r.pos
            ),
        );
    }
    let payload = r.take(payload_len, "payload")?;
    let data: Vec<f64> = if dtype == DTYPE_F32 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    r.finish()?;
    Tensor::from_vec(&[l as usize, m as usize, n as usize], data)
}

pub fn encode_labels(labels: &[u16], m: usize, n: usize) -> Result<Vec<u8>> {
    if labels.len() != m * n {
        return arg_err(format!("label raster has {} entries, expected {m}x{n}", labels.len()));
    }
    let mut out = Vec::with_capacity(12 + 2 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    for d in [m, n] {
        let d = u32::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

/// Returns `(rows, cols, labels)`.
pub fn decode_labels(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    let m = r.u32("header")?;
    let n = r.u32("header")?;
    let count = checked_len(&[m, n, 2], 4)?;
    if bytes.len() - r.pos != count {
        return parse_err(
            r.pos,
            format!(
                "header declares {m}x{n} labels but payload has {} bytes",
                bytes.len() - r.pos
            ),
        );
    }
    let labels = r
        .take(count, "labels")?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((m as usize, n as usize, labels))
}

/// Write `cube` to `path` and its labels next to it (see [`labels_path`]).
pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    fs::write(path, encode_cube_values(&cube.values)?)?;
    fs::write(
        labels_path(path),
        encode_labels(&cube.labels, cube.rows(), cube.cols())?,
    )?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let values = decode_cube_values(&fs::read(path)?)?;
    let (m, n, labels) = decode_labels(&fs::read(labels_path(path))?)?;
    if [m, n] != values.shape()[1..] {
        return parse_err(
            4,
            format!(
                "label raster is {m}x{n} but cube is {}x{}",
                values.shape()[1],
                values.shape()[2]
            ),
        );
    }
    HsiCube::new(values, labels)
}

/// One sample: `l / g` steps of `[g, p, p]` band groups, centred on `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub steps: Vec<Tensor>,
    pub label: u16,
    pub origin: (usize, usize),
}

impl PatchSequence {
    pub fn patch_size(&self) -> usize {
        self.steps[0].shape()[1]
    }

    /// Zero-based class index used by the classifier.
    pub fn class_index(&self) -> Result<usize> {
        if self.label == 0 {
            return arg_err(format!("pixel {:?} is unlabeled", self.origin));
        }
        Ok(self.label as usize - 1)
    }

    pub fn reversed(&self) -> PatchSequence {
        PatchSequence {
            steps: self.steps.iter().rev().cloned().collect(),
            label: self.label,
            origin: self.origin,
        }
    }
}

/// Half-sample mirror of an index into `0..len`: `-1 -> 0`, `len -> len - 1`.
fn mirror(idx: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let r = idx.rem_euclid(period);
    if r < len as isize {
        r as usize
    } else {
        (period - 1 - r) as usize
    }
}

pub fn is_valid_patch_size(p: usize) -> bool {
    p >= 2 && p.is_power_of_two()
}

/// Extract the `p x p` window spanning rows `i - p/2 ..= i + p/2 - 1` (same for
/// columns), mirroring across the image border, and group bands `g` at a time.
pub fn extract_patch(cube: &HsiCube, i: usize, j: usize, p: usize, g: usize) -> Result<PatchSequence> {
    let (m, n, l) = (cube.rows(), cube.cols(), cube.bands());
    if i >= m || j >= n {
        return arg_err(format!("pixel ({i}, {j}) outside {m}x{n} cube"));
    }
    if !is_valid_patch_size(p) {
        return arg_err(format!("patch size must be a power of two, got {p}"));
    }
    if g == 0 || l % g != 0 {
        return arg_err(format!("band group {g} does not divide {l} bands"));
    }
    let half = (p / 2) as isize;
    let rows: Vec<usize> = (0..p).map(|r| mirror(i as isize - half + r as isize, m)).collect();
    let cols: Vec<usize> = (0..p).map(|c| mirror(j as isize - half + c as isize, n)).collect();
    let v = cube.values.data();
    let mut steps = Vec::with_capacity(l / g);
    for s in 0..l / g {
        let mut data = Vec::with_capacity(g * p * p);
        for b in s * g..(s + 1) * g {
            let plane = &v[b * m * n..(b + 1) * m * n];
            for &r in &rows {
                data.extend(cols.iter().map(|&c| plane[r * n + c]));
            }
        }
        steps.push(Tensor::from_vec(&[g, p, p], data)?);
    }
    Ok(PatchSequence {
        steps,
        label: cube.label(i, j),
        origin: (i, j),
    })
}

/// The eight square-patch transforms, in output order of [`augment8`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Rot90FlipH,
    Rot90FlipV,
}

impl Transform {
    pub const ALL: [Transform; 8] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::FlipH,
        Transform::FlipV,
        Transform::Rot90FlipH,
        Transform::Rot90FlipV,
    ];

    /// Source coordinate that output `(r, c)` reads from in a `p x p` patch.
    /// Rotations are anticlockwise; the composite ones flip first, then rotate.
    pub fn source(self, r: usize, c: usize, p: usize) -> (usize, usize) {
        let q = p - 1;
        let rot90 = |r: usize, c: usize| (c, q - r);
        let flip_h = |r: usize, c: usize| (r, q - c);
        let flip_v = |r: usize, c: usize| (q - r, c);
        match self {
            Transform::Identity => (r, c),
            Transform::Rot90 => rot90(r, c),
            Transform::Rot180 => (q - r, q - c),
            Transform::Rot270 => (q - c, r),
            Transform::FlipH => flip_h(r, c),
            Transform::FlipV => flip_v(r, c),
            Transform::Rot90FlipH => {
                let (a, b) = rot90(r, c);
                flip_h(a, b)
            }
            Transform::Rot90FlipV => {
                let (a, b) = rot90(r, c);
                flip_v(a, b)
            }
        }
    }

    pub fn apply(self, image: &Tensor) -> Result<Tensor> {
        let [ch, h, w] = *image.shape() else {
            return arg_err(format!("expected [channels, p, p], got {:?}", image.shape()));
        };
        if h != w {
            return arg_err(format!("augmentation needs square patches, got {h}x{w}"));
        }
        let p = h;
        let src = image.data();
        let mut out = Vec::with_capacity(src.len());
        for c in 0..ch {
            let plane = &src[c * p * p..(c + 1) * p * p];
            for r in 0..p {
                for col in 0..p {
                    let (sr, sc) = self.source(r, col, p);
                    out.push(plane[sr * p + sc]);
                }
            }
        }
        Tensor::from_vec(image.shape(), out)
    }
}

/// Identity, three rotations, two flips and the two rotated flips.
pub fn augment8(seq: &PatchSequence) -> Result<Vec<PatchSequence>> {
    Transform::ALL
        .iter()
        .map(|t| {
            let steps = seq.steps.iter().map(|s| t.apply(s)).collect::<Result<_>>()?;
            Ok(PatchSequence {
                steps,
                label: seq.label,
                origin: seq.origin,
            })
        })
        .collect()
}

/// Per-band statistics used for standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Population mean and standard deviation of each band over `pixels`.
    pub fn from_pixels(cube: &HsiCube, pixels: &[(usize, usize)]) -> Result<Self> {
        if pixels.is_empty() {
            return arg_err("normalization needs at least one training pixel");
        }
        let (m, n) = (cube.rows(), cube.cols());
        let v = cube.values.data();
        let count = pixels.len() as f64;
        let mut mean = Vec::with_capacity(cube.bands());
        let mut std = Vec::with_capacity(cube.bands());
        for b in 0..cube.bands() {
            let plane = &v[b * m * n..(b + 1) * m * n];
            let mu = pixels.iter().map(|&(i, j)| plane[i * n + j]).sum::<f64>() / count;
            let var = pixels
                .iter()
                .map(|&(i, j)| (plane[i * n + j] - mu).powi(2))
                .sum::<f64>()
                / count;
            mean.push(mu);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, cube: &HsiCube) -> Result<HsiCube> {
        if self.mean.len() != cube.bands() || self.std.len() != cube.bands() {
            return arg_err(format!(
                "normalization stats cover {} bands, cube has {}",
                self.mean.len(),
                cube.bands()
            ));
        }
        let plane = cube.rows() * cube.cols();
        let mut values = cube.values.clone();
        for (b, chunk) in values.data_mut().chunks_exact_mut(plane).enumerate() {
            let (mu, sd) = (self.mean[b], self.std[b]);
            chunk.iter_mut().for_each(|x| *x = (*x - mu) / sd);
        }
        HsiCube::new(values, cube.labels.clone())
    }
}

/// Standardize every band with statistics from the training pixels only.
pub fn normalize(cube: &HsiCube, train_pixels: &[(usize, usize)]) -> Result<(HsiCube, NormStats)> {
    let stats = NormStats::from_pixels(cube, train_pixels)?;
    Ok((stats.apply(cube)?, stats))
}

/// How many pixels of each class go to training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAmount {
    Fraction(f64),
    /// Per class, in class order `1..=c`.
    Counts(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub amount: SplitAmount,
    pub seed: u64,
}

impl SplitSpec {
    pub fn fraction(fraction: f64, seed: u64) -> Self {
        SplitSpec {
            amount: SplitAmount::Fraction(fraction),
            seed,
        }
    }
}

/// Train/test pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

/// Number of training pixels drawn from a class of `population` pixels.
pub fn train_count(fraction: f64, population: usize) -> usize {
    ((fraction * population as f64).round() as usize).clamp(1, population)
}

/// Per-class random partition of the labeled pixels. Class `k` is shuffled
/// with `Rng::new(seed).fork(k)`; the first `train_count` pixels train.
pub fn stratified_split(cube: &HsiCube, spec: &SplitSpec) -> Result<Split> {
    let classes = cube.num_classes();
    if classes == 0 {
        return arg_err("cube has no labeled pixels");
    }
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); classes];
    for (i, j) in cube.labeled_pixels() {
        by_class[cube.label(i, j) as usize - 1].push((i, j));
    }
    match &spec.amount {
        SplitAmount::Fraction(f) if !(*f > 0.0 && *f < 1.0) => {
            return arg_err(format!("training fraction must lie in (0, 1), got {f}"))
        }
        SplitAmount::Counts(c) if c.len() != classes => {
            return arg_err(format!("{} per-class counts given for {classes} classes", c.len()))
        }
        _ => {}
    }
    let root = Rng::new(spec.seed);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (k, mut pixels) in by_class.into_iter().enumerate() {
        let pop = pixels.len();
        if pop == 0 {
            return arg_err(format!("class {} has no labeled pixels", k + 1));
        }
        let take = match &spec.amount {
            SplitAmount::Fraction(f) => train_count(*f, pop),
            SplitAmount::Counts(c) => {
                if c[k] > pop {
                    return arg_err(format!("class {} asks for {} training pixels of {pop}", k + 1, c[k]));
                }
                c[k]
            }
        };
        root.fork(k as u64).shuffle(&mut pixels);
        split.train.extend_from_slice(&pixels[..take]);
        split.test.extend_from_slice(&pixels[take..]);
    }
    Ok(split)
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub seed: u64,
    /// Ratio of between-class signature spread to per-pixel noise std.
    pub separation: f64,
    /// Bands `0..shared_bands` carry the same signature for every class.
    pub shared_bands: usize,
    /// Approximate side length of the rectangular class regions.
    pub region_size: usize,
    /// Std of the spatially smooth noise field relative to the white noise.
    pub smooth_noise: f64,
}

impl SynthSpec {
    pub fn new(classes: usize, rows: usize, cols: usize, bands: usize, seed: u64, separation: f64) -> Self {
        SynthSpec {
            classes,
            rows,
            cols,
            bands,
            seed,
            separation,
            shared_bands: 0,
            region_size: 8,
            smooth_noise: 0.5,
        }
    }
}

/// Round to the nearest f32 so generated cubes store exactly as f32.
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

fn smooth_signature(rng: &mut Rng, bands: usize) -> Vec<f64> {
    let offset = rng.uniform(0.3, 0.7);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|k| {
            (
                rng.uniform(0.05, 0.25) / (k + 1) as f64,
                rng.uniform(0.5, 3.0),
                rng.uniform(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = b as f64 / bands.max(2) as f64;
            offset
                + waves
                    .iter()
                    .map(|(amp, freq, phase)| amp * (std::f64::consts::TAU * freq * t + phase).sin())
                    .sum::<f64>()
        })
        .collect()
}

/// Rectangular class regions on a jittered grid; each class owns at least one.
fn region_labels(spec: &SynthSpec, rng: &mut Rng) -> Vec<u16> {
    let side = spec.region_size.max(1);
    let cut = |len: usize, rng: &mut Rng| -> Vec<usize> {
        let parts = (len / side).max(1);
        let mut edges = vec![0];
        for k in 1..parts {
            let base = (k * len) as f64 / parts as f64;
            let jitter = rng.uniform(-0.25, 0.25) * side as f64;
            edges.push(((base + jitter).round() as usize).clamp(edges[k - 1] + 1, len - 1));
        }
        edges.push(len);
        edges
    };
    let mut row_edges = cut(spec.rows, rng);
    let mut col_edges = cut(spec.cols, rng);
    // Enough regions for every class to appear.
    while (row_edges.len() - 1) * (col_edges.len() - 1) < spec.classes {
        let (edges, len) = if row_edges.len() <= col_edges.len() && spec.rows >= row_edges.len() {
            (&mut row_edges, spec.rows)
        } else {
            (&mut col_edges, spec.cols)
        };
        let parts = edges.len();
        *edges = (0..=parts).map(|k| k * len / parts).collect();
    }
    let regions = (row_edges.len() - 1) * (col_edges.len() - 1);
    let mut owners: Vec<u16> = (0..regions).map(|r| (r % spec.classes) as u16 + 1).collect();
    rng.shuffle(&mut owners);
    let mut labels = vec![0u16; spec.rows * spec.cols];
    for (ri, rw) in row_edges.windows(2).enumerate() {
        for (ci, cw) in col_edges.windows(2).enumerate() {
            let owner = owners[ri * (col_edges.len() - 1) + ci];
            for i in rw[0]..rw[1] {
                labels[i * spec.cols + cw[0]..i * spec.cols + cw[1]].fill(owner);
            }
        }
    }
    labels
}

/// Box-blurred white noise rescaled to unit standard deviation.
fn smooth_field(rng: &mut Rng, rows: usize, cols: usize, radius: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
    let r = radius as isize;
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            let mut count = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i as isize + di, j as isize + dj);
                    if y >= 0 && y < rows as isize && x >= 0 && x < cols as isize {
                        acc += white[y as usize * cols + x as usize];
                        count += 1.0;
                    }
                }
            }
            out[i * cols + j] = acc / count;
        }
    }
    let sd = (out.iter().map(|x| x * x).sum::<f64>() / out.len() as f64).sqrt();
    if sd > 0.0 {
        out.iter_mut().for_each(|x| *x /= sd);
    }
    out
}

/// Class signatures used by [`synth_cube_with`], indexed by class `0..c`.
pub fn synth_signatures(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(spec.seed).fork(1);
    let shared = smooth_signature(&mut rng, spec.bands);
    (0..spec.classes)
        .map(|_| {
            let own = smooth_signature(&mut rng, spec.bands);
            (0..spec.bands)
                .map(|b| f32_exact(if b < spec.shared_bands { shared[b] } else { own[b] }))
                .collect()
        })
        .collect()
}

/// Root-mean-square deviation of the class signatures from their mean over
/// the class-specific bands.
pub fn signature_spread(signatures: &[Vec<f64>], shared_bands: usize) -> f64 {
    let bands = signatures[0].len();
    let c = signatures.len() as f64;
    let mut acc = 0.0;
    let mut count = 0.0;
    for b in shared_bands..bands {
        let mean = signatures.iter().map(|s| s[b]).sum::<f64>() / c;
        for s in signatures {
            acc += (s[b] - mean).powi(2);
            count += 1.0;
        }
    }
    if count == 0.0 {
        0.0
    } else {
        (acc / count).sqrt()
    }
}

pub fn synth_cube(classes: usize, m: usize, n: usize, l: usize, seed: u64, separation: f64) -> Result<HsiCube> {
    synth_cube_with(&SynthSpec::new(classes, m, n, l, seed, separation))
}

/// Synthetic scene: rectangular class regions, smooth per-class spectra,
/// white noise with std `spread / separation` plus a spatially smooth noise
/// field scaled by `smooth_noise` relative to it. Values are f32-exact.
pub fn synth_cube_with(spec: &SynthSpec) -> Result<HsiCube> {
    if spec.classes < 2 {
        return arg_err(format!("need at least 2 classes, got {}", spec.classes));
    }
    if spec.classes > u16::MAX as usize {
        return arg_err("too many classes for a u16 label raster");
    }
    if spec.rows == 0 || spec.cols == 0 || spec.bands == 0 {
        return arg_err(format!(
            "degenerate cube dimensions {}x{}x{}",
            spec.rows, spec.cols, spec.bands
        ));
    }
    if spec.rows * spec.cols < spec.classes {
        return arg_err("cube has fewer pixels than classes");
    }
    if spec.shared_bands >= spec.bands {
        return arg_err("at least one band must differ between classes");
    }
    if !(spec.separation > 0.0) {
        return arg_err(format!("separation must be positive, got {}", spec.separation));
    }
    if !(spec.smooth_noise >= 0.0) {
        return arg_err("smooth_noise must be non-negative");
    }
    let root = Rng::new(spec.seed);
    let signatures = synth_signatures(spec);
    let labels = region_labels(spec, &mut root.fork(2));
    let noise_std = signature_spread(&signatures, spec.shared_bands) / spec.separation;

    let (m, n, l) = (spec.rows, spec.cols, spec.bands);
    let mut noise_rng = root.fork(3);
    let mut smooth_rng = root.fork(4);
    let radius = (spec.region_size / 4).max(1);
    let mut values = Vec::with_capacity(l * m * n);
    for b in 0..l {
        let field = smooth_field(&mut smooth_rng, m, n, radius);
        for k in 0..m * n {
            let class = labels[k] as usize - 1;
            let white = noise_rng.normal();
            let noise = noise_std * (white + spec.smooth_noise * field[k]);
            values.push(f32_exact(signatures[class][b] + noise));
        }
    }
    HsiCube::new(Tensor::from_vec(&[l, m, n], values)?, labels)
}
