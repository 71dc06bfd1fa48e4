//! Self-generating desk-scale datasets.
//!
//! Images show one of up to 16 class-determined figures at a random
//! position, scale and colour over low-amplitude noise. Clips show a small
//! figure drifting across a wrap-around canvas; the class is the direction
//! of motion, so no single frame carries label information.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{expect_magic, ByteReader, ByteWriter};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 16;
pub const MIN_CLASSES: usize = 2;
pub const MIN_EXTENT: usize = 16;
pub const CHANNELS: usize = 3;

const MAGIC: &[u8; 4] = b"AFDS";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Image,
    Clip,
}

impl DataKind {
    pub fn name(self) -> &'static str {
        match self {
            DataKind::Image => "image",
            DataKind::Clip => "clip",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
}

/// One example: `3 x h x w` for images, `3 x T x h x w` for clips.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// A contiguous block of examples sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    kind: DataKind,
    tag: SplitTag,
    num_classes: usize,
    frames: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl DatasetSplit {
    pub fn from_parts(
        kind: DataKind,
        tag: SplitTag,
        num_classes: usize,
        (frames, height, width): (usize, usize, usize),
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if kind == DataKind::Image && frames != 1 {
            return Err(Error::InvalidArgument("image splits have exactly one frame".into()));
        }
        if frames == 0 || height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument("dataset extents must be positive".into()));
        }
        let per = CHANNELS * frames * height * width;
        if pixels.len() != per * labels.len() {
            return Err(Error::shape("dataset", format!("{} pixels for {} examples of {per}", pixels.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes: num_classes });
        }
        Ok(Self { kind, tag, num_classes, frames, height, width, pixels, labels })
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn tag(&self) -> SplitTag {
        self.tag
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example_len(&self) -> usize {
        CHANNELS * self.frames * self.height * self.width
    }

    /// Shape of a single example, without the batch axis.
    pub fn example_shape(&self) -> Vec<usize> {
        match self.kind {
            DataKind::Image => vec![CHANNELS, self.height, self.width],
            DataKind::Clip => vec![CHANNELS, self.frames, self.height, self.width],
        }
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.example_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize) -> LabeledExample {
        LabeledExample {
            pixels: Tensor::new(self.example_shape(), self.pixels(i).to_vec()).expect("consistent split"),
            label: self.labels[i],
        }
    }

    /// Stacks the selected examples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.example_len());
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(self.example_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("consistent split"), labels)
    }

    /// The first `n` examples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.example_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Applies `f` to every example, producing a split with new spatial extents.
    pub fn map_examples(&self, height: usize, width: usize, f: impl Fn(&[f32]) -> Vec<f32>) -> Result<Self> {
        let mut pixels = Vec::with_capacity(self.len() * CHANNELS * self.frames * height * width);
        for i in 0..self.len() {
            pixels.extend(f(self.pixels(i)));
        }
        Self::from_parts(self.kind, self.tag, self.num_classes, (self.frames, height, width), pixels, self.labels.clone())
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u8(match self.kind {
            DataKind::Image => 0,
            DataKind::Clip => 1,
        });
        w.u8(match self.tag {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
        });
        w.u32(self.len() as u32);
        w.u16(self.num_classes as u16);
        w.u16(CHANNELS as u16);
        w.u16(self.frames as u16);
        w.u16(self.height as u16);
        w.u16(self.width as u16);
        for &p in &self.pixels {
            w.f32(p);
        }
        for &l in &self.labels {
            w.u16(l as u16);
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(buf);
        expect_magic(&mut r, MAGIC, "dataset")?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(FormatError::Version { what: "dataset", found: version, expected: VERSION });
        }
        let kind = match r.u8()? {
            0 => DataKind::Image,
            1 => DataKind::Clip,
            k => return Err(FormatError::CorruptHeader(format!("unknown kind byte {k}"))),
        };
        let tag = match r.u8()? {
            0 => SplitTag::Train,
            1 => SplitTag::Val,
            t => return Err(FormatError::CorruptHeader(format!("unknown split byte {t}"))),
        };
        let n = r.u32()? as usize;
        let num_classes = r.u16()? as usize;
        let channels = r.u16()? as usize;
        let frames = r.u16()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        if channels != CHANNELS || frames == 0 || height == 0 || width == 0 || num_classes == 0 {
            return Err(FormatError::CorruptHeader(format!(
                "invalid dims classes={num_classes} channels={channels} frames={frames} {height}x{width}"
            )));
        }
        if kind == DataKind::Image && frames != 1 {
            return Err(FormatError::CorruptHeader("image dataset with several frames".into()));
        }
        let count = n
            .checked_mul(CHANNELS * frames * height * width)
            .ok_or_else(|| FormatError::CorruptHeader("example count overflows".into()))?;
        if r.remaining() < count.saturating_mul(4) {
            return Err(FormatError::Truncated);
        }
        let mut pixels = Vec::with_capacity(count);
        for _ in 0..count {
            let p = r.f32()?;
            if !(0.0..=1.0).contains(&p) {
                return Err(FormatError::CorruptPayload(format!("pixel value {p} outside [0, 1]")));
            }
            pixels.push(p);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = r.u16()? as usize;
            if l >= num_classes {
                return Err(FormatError::CorruptPayload(format!("label {l} >= {num_classes} classes")));
            }
            labels.push(l);
        }
        r.finish()?;
        Ok(Self { kind, tag, num_classes, frames, height, width, pixels, labels })
    }
}

pub fn save_split(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, split.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(DatasetSplit::from_bytes(&buf)?)
}

fn example_rng(seed: u64, kind: DataKind, tag: SplitTag, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = ((kind as u64) << 48) | ((tag as u64) << 40) | index as u64;
    rng.set_stream(stream);
    rng
}

fn check_common(num_classes: usize, h: usize, w: usize, max_classes: usize) -> Result<()> {
    if !(MIN_CLASSES..=max_classes).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in [{MIN_CLASSES}, {max_classes}], got {num_classes}"
        )));
    }
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::Geometry(format!(
            "infeasible geometry: a {h}x{w} canvas cannot hold the figures (need at least {MIN_EXTENT}x{MIN_EXTENT})"
        )));
    }
    Ok(())
}

fn background(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(0.0..0.1)).collect()
}

fn random_colour(rng: &mut impl Rng) -> [f64; 3] {
    let mut c = [rng.random_range(0.15..1.0), rng.random_range(0.15..1.0), rng.random_range(0.15..1.0)];
    let peak = c.iter().copied().fold(0.0, f64::max);
    let target = rng.random_range(0.7..1.0);
    c.iter_mut().for_each(|v| *v *= target / peak);
    c
}

/// Whether normalized coordinates (x right, y down, figure spans roughly
/// [-1, 1]) fall inside figure `class`.
fn figure_contains(class: usize, x: f64, y: f64) -> bool {
    let (ax, ay) = (x.abs(), y.abs());
    let r2 = x * x + y * y;
    match class {
        0 => r2 <= 1.0,
        1 => ax <= 0.8 && ay <= 0.8,
        2 => (-0.8..=0.8).contains(&y) && ax <= (y + 0.8) / 1.6 * 0.95,
        3 => (ax <= 0.25 && ay <= 0.95) || (ay <= 0.25 && ax <= 0.95),
        4 => (0.3025..=1.0).contains(&r2),
        5 => ax <= 1.0 && ay <= 0.28,
        6 => ay <= 1.0 && ax <= 0.28,
        7 => ax <= 0.85 && ay <= 0.85 && ((x - y).abs() <= 0.3 || (x + y).abs() <= 0.3),
        8 => (0.5..=0.85).contains(&ax.max(ay)),
        9 => ax + ay <= 0.95,
        10 => x * x + (y / 0.45).powi(2) <= 1.0,
        11 => (ax - 0.5).powi(2) + y * y <= 0.14,
        12 => (-0.8..=0.8).contains(&y) && ax <= (0.8 - y) / 1.6 * 0.95,
        13 => (x + y).abs() <= 0.32 && (x - y).abs() <= 1.7,
        14 => (x - y).abs() <= 0.32 && (x + y).abs() <= 1.7,
        15 => ((-0.8..=-0.35).contains(&x) && ay <= 0.8) || ((0.35..=0.8).contains(&y) && ax <= 0.8),
        _ => unreachable!("class ids are validated"),
    }
}

/// Coverage of pixel (`px`, `py`) by a figure centred at (`cx`, `cy`), using a
/// 3x3 supersampling grid. `wrap` gives torus extents for wrap-around canvases.
fn coverage(
    class: usize,
    (px, py): (usize, usize),
    (cx, cy): (f64, f64),
    size: f64,
    wrap: Option<(f64, f64)>,
) -> f64 {
    let mut hits = 0;
    for sy in 0..3 {
        for sx in 0..3 {
            let mut dx = px as f64 + (sx as f64 + 0.5) / 3.0 - cx;
            let mut dy = py as f64 + (sy as f64 + 0.5) / 3.0 - cy;
            if let Some((w, h)) = wrap {
                dx -= w * (dx / w).round();
                dy -= h * (dy / h).round();
            }
            if figure_contains(class, dx / size, dy / size) {
                hits += 1;
            }
        }
    }
    hits as f64 / 9.0
}

fn paint(
    plane: &mut [f32],
    (h, w): (usize, usize),
    colour: [f64; 3],
    mut alpha: impl FnMut(usize, usize) -> f64,
) {
    let hw = h * w;
    for py in 0..h {
        for px in 0..w {
            let a = alpha(px, py);
            if a == 0.0 {
                continue;
            }
            for (c, &col) in colour.iter().enumerate() {
                let v = &mut plane[c * hw + py * w + px];
                *v = ((*v as f64) * (1.0 - a) + col * a).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

fn render_shape(seed: u64, tag: SplitTag, index: usize, num_classes: usize, h: usize, w: usize) -> (Vec<f32>, usize) {
    let label = index % num_classes;
    let mut rng = example_rng(seed, DataKind::Image, tag, index);
    let mut img = background(&mut rng, CHANNELS * h * w);
    let colour = random_colour(&mut rng);
    let side = h.min(w) as f64;
    let size = rng.random_range(0.2..0.36) * side;
    let cx = rng.random_range(size + 1.0..w as f64 - size - 1.0);
    let cy = rng.random_range(size + 1.0..h as f64 - size - 1.0);
    paint(&mut img, (h, w), colour, |px, py| coverage(label, (px, py), (cx, cy), size, None));
    (img, label)
}

/// Generates disjoint train/val image splits of class-determined figures.
pub fn generate_shapes(
    seed: u64,
    n_train: usize,
    n_val: usize,
    num_classes: usize,
    h: usize,
    w: usize,
) -> Result<(DatasetSplit, DatasetSplit)> {
    check_common(num_classes, h, w, MAX_CLASSES)?;
    let make = |tag: SplitTag, n: usize| {
        let mut pixels = Vec::with_capacity(n * CHANNELS * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let (img, label) = render_shape(seed, tag, i, num_classes, h, w);
            pixels.extend(img);
            labels.push(label);
        }
        DatasetSplit::from_parts(DataKind::Image, tag, num_classes, (1, h, w), pixels, labels)
    };
    Ok((make(SplitTag::Train, n_train)?, make(SplitTag::Val, n_val)?))
}

const CLIP_FIGURES: [usize; 3] = [0, 1, 3];

fn render_clip(
    seed: u64,
    tag: SplitTag,
    index: usize,
    num_classes: usize,
    (t, h, w): (usize, usize, usize),
) -> (Vec<f32>, usize) {
    let label = index % num_classes;
    let mut rng = example_rng(seed, DataKind::Clip, tag, index);
    let hw = h * w;
    let mut clip = background(&mut rng, CHANNELS * t * hw);
    let colour = random_colour(&mut rng);
    let figure = CLIP_FIGURES[rng.random_range(0..CLIP_FIGURES.len())];
    let size = rng.random_range(2.2..3.2);
    let x0 = rng.random_range(0.0..w as f64);
    let y0 = rng.random_range(0.0..h as f64);
    let speed = rng.random_range(1.0..1.5);
    let angle = 2.0 * PI * label as f64 / num_classes as f64;
    let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
    let mut frame = vec![0f32; CHANNELS * hw];
    for f in 0..t {
        let cx = x0 + vx * f as f64;
        let cy = y0 + vy * f as f64;
        for c in 0..CHANNELS {
            frame[c * hw..(c + 1) * hw].copy_from_slice(&clip[(c * t + f) * hw..(c * t + f + 1) * hw]);
        }
        paint(&mut frame, (h, w), colour, |px, py| {
            coverage(figure, (px, py), (cx, cy), size, Some((w as f64, h as f64)))
        });
        for c in 0..CHANNELS {
            clip[(c * t + f) * hw..(c * t + f + 1) * hw].copy_from_slice(&frame[c * hw..(c + 1) * hw]);
        }
    }
    (clip, label)
}

/// Generates clip splits whose class is the direction a figure drifts in.
/// The canvas wraps around, so every frame's figure position is uniformly
/// distributed whatever the class.
pub fn generate_moving_shapes(
    seed: u64,
    n_train: usize,
    n_val: usize,
    num_classes: usize,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<(DatasetSplit, DatasetSplit)> {
    check_common(num_classes, h, w, MAX_CLASSES)?;
    if frames == 0 {
        return Err(Error::InvalidArgument("clips need at least one frame".into()));
    }
    let make = |tag: SplitTag, n: usize| {
        let mut pixels = Vec::with_capacity(n * CHANNELS * frames * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let (clip, label) = render_clip(seed, tag, i, num_classes, (frames, h, w));
            pixels.extend(clip);
            labels.push(label);
        }
        DatasetSplit::from_parts(DataKind::Clip, tag, num_classes, (frames, h, w), pixels, labels)
    };
    Ok((make(SplitTag::Train, n_train)?, make(SplitTag::Val, n_val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_shapes(7, 40, 10, 8, 32, 32).unwrap();
        let b = generate_shapes(7, 40, 10, 8, 32, 32).unwrap();
        assert_eq!(a, b);
        let c = generate_shapes(8, 40, 10, 8, 32, 32).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn class_counts_near_uniform() {
        let (train, _) = generate_shapes(1, 4096, 8, 8, 16, 16).unwrap();
        for c in train.class_counts() {
            assert!((461..=563).contains(&c), "count {c}");
        }
    }

    #[test]
    fn pixels_in_unit_interval() {
        let (train, val) = generate_shapes(3, 64, 32, 16, 20, 24).unwrap();
        for s in [&train, &val] {
            assert!(s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let (clips, _) = generate_moving_shapes(3, 12, 1, 6, 4, 16, 16).unwrap();
        assert!(clips.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn train_and_val_differ() {
        let (train, val) = generate_shapes(5, 16, 16, 4, 16, 16).unwrap();
        for i in 0..16 {
            assert_ne!(train.pixels(i), val.pixels(i));
        }
    }

    #[test]
    fn infeasible_geometry_rejected() {
        assert!(matches!(generate_shapes(0, 1, 1, 8, 12, 32), Err(Error::Geometry(_))));
        assert!(generate_shapes(0, 1, 1, 1, 32, 32).is_err());
        assert!(generate_shapes(0, 1, 1, 17, 32, 32).is_err());
    }

    #[test]
    fn every_figure_is_drawn() {
        for class in 0..MAX_CLASSES {
            let n = (0..64 * 64)
                .filter(|i| figure_contains(class, (i % 64) as f64 / 32.0 - 1.0, (i / 64) as f64 / 32.0 - 1.0))
                .count();
            assert!(n > 100, "figure {class} covers only {n} samples");
        }
    }

    #[test]
    fn single_frame_clips_are_static_images() {
        let (train, _) = generate_moving_shapes(9, 6, 1, 6, 1, 16, 16).unwrap();
        assert_eq!(train.example_shape(), vec![3, 1, 16, 16]);
        assert_eq!(train.frames(), 1);
        let again = generate_moving_shapes(9, 6, 1, 6, 1, 16, 16).unwrap().0;
        assert_eq!(train, again);
    }

    #[test]
    fn round_trip_and_format_errors() {
        let (train, _) = generate_moving_shapes(2, 5, 1, 3, 2, 16, 16).unwrap();
        let bytes = train.to_bytes();
        assert_eq!(DatasetSplit::from_bytes(&bytes).unwrap(), train);

        let truncated = &bytes[..bytes.len() - 3];
        let err = DatasetSplit::from_bytes(truncated).unwrap_err();
        assert_eq!(err, FormatError::Truncated);
        assert_eq!(err.to_string(), "truncated payload");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(DatasetSplit::from_bytes(&bad).unwrap_err().to_string(), "not a dataset file");

        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(DatasetSplit::from_bytes(&ver), Err(FormatError::Version { found: 9, .. })));

        let mut kind = bytes.clone();
        kind[6] = 7;
        assert!(matches!(DatasetSplit::from_bytes(&kind), Err(FormatError::CorruptHeader(_))));
    }
}
