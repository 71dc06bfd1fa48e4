//! Universal adversarial framings: parameterisation, application and training.
//!
//! A framing of width `W` around an `h x w` interior owns
//! `2W(h + w + 2W)` border pixels. Each pixel carries one unconstrained
//! parameter per channel; the pixel value is the sigmoid of that parameter,
//! so the optimiser never has to project back into `[0, 1]`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bytes::{expect_magic, ByteReader, ByteWriter};
use crate::classifier::CnnClassifier;
use crate::composition::{compose_tape, Strategy};
use crate::dataset::DatasetSplit;
use crate::error::{Error, FormatError, Result};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::tensor::{FrameGeom, Tape, Tensor};

const MAGIC: &[u8; 4] = b"AFFR";
const VERSION: u16 = 1;

/// What the framing optimises for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Push down the log-probability of the true class.
    Untargeted,
    /// Pull every input toward this class.
    Targeted(usize),
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Untargeted => f.write_str("untargeted"),
            Objective::Targeted(t) => write!(f, "targeted:{t}"),
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "untargeted" {
            return Ok(Objective::Untargeted);
        }
        s.strip_prefix("targeted:")
            .and_then(|t| t.parse().ok())
            .map(Objective::Targeted)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Trained(Strategy),
    Random(u64),
    Black,
}

/// Parameters per border pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    /// Independent red, green and blue values.
    Color,
    /// One grey value replicated over the channels.
    Gray,
}

impl ChannelMode {
    pub fn channels(self) -> usize {
        match self {
            ChannelMode::Color => 3,
            ChannelMode::Gray => 1,
        }
    }
}

/// Canonical order of border positions: a row-major scan of the framed
/// canvas that skips the interior rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BorderLayout {
    pub width: usize,
    pub interior_h: usize,
    pub interior_w: usize,
}

impl BorderLayout {
    pub fn outer(&self) -> (usize, usize) {
        (self.interior_h + 2 * self.width, self.interior_w + 2 * self.width)
    }

    pub fn count(&self) -> usize {
        2 * self.width * (self.interior_h + self.interior_w + 2 * self.width)
    }

    pub fn is_border(&self, row: usize, col: usize) -> bool {
        let w = self.width;
        row < w || row >= w + self.interior_h || col < w || col >= w + self.interior_w
    }

    /// `(row, col)` of every border pixel, in layout order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (oh, ow) = self.outer();
        (0..oh).flat_map(move |r| (0..ow).map(move |c| (r, c))).filter(|&(r, c)| self.is_border(r, c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramingParams {
    theta_hat: Vec<f64>,
    width: usize,
    interior_h: usize,
    interior_w: usize,
    channels: ChannelMode,
    objective: Objective,
    provenance: Provenance,
}

impl FramingParams {
    pub fn new(
        theta_hat: Vec<f64>,
        width: usize,
        (interior_h, interior_w): (usize, usize),
        channels: ChannelMode,
        objective: Objective,
        provenance: Provenance,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidArgument("framing width must be at least 1".into()));
        }
        if interior_h == 0 || interior_w == 0 {
            return Err(Error::InvalidArgument("framing interior must be non-empty".into()));
        }
        let fp = Self { theta_hat, width, interior_h, interior_w, channels, objective, provenance };
        if fp.theta_hat.len() != fp.param_count() {
            return Err(Error::Geometry(format!(
                "{} parameters given, W={width} around {interior_h}x{interior_w} needs {}",
                fp.theta_hat.len(),
                fp.param_count()
            )));
        }
        if fp.theta_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("framing parameters must be finite".into()));
        }
        Ok(fp)
    }

    /// Untrained parameters drawn from a standard normal.
    pub fn standard_normal(width: usize, interior_h: usize, interior_w: usize, channels: ChannelMode, seed: u64) -> Result<Self> {
        let n = expected_len(width, interior_h, interior_w, channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(theta, width, (interior_h, interior_w), channels, Objective::Untargeted, Provenance::Random(seed))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn interior_h(&self) -> usize {
        self.interior_h
    }

    pub fn interior_w(&self) -> usize {
        self.interior_w
    }

    pub fn channels(&self) -> ChannelMode {
        self.channels
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, p: Provenance) {
        self.provenance = p;
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_hat
    }

    pub fn layout(&self) -> BorderLayout {
        BorderLayout { width: self.width, interior_h: self.interior_h, interior_w: self.interior_w }
    }

    pub fn geometry(&self) -> FrameGeom {
        FrameGeom {
            width: self.width,
            interior_h: self.interior_h,
            interior_w: self.interior_w,
            channels: self.channels.channels(),
        }
    }

    pub fn border_pixels(&self) -> usize {
        self.layout().count()
    }

    pub fn param_count(&self) -> usize {
        expected_len(self.width, self.interior_h, self.interior_w, self.channels)
    }

    /// Border pixel values in layout order, channel values interleaved.
    pub fn materialize(&self) -> Vec<f64> {
        match self.provenance {
            Provenance::Black => vec![0.0; self.theta_hat.len()],
            _ => self.theta_hat.iter().map(|&t| sigmoid(t)).collect(),
        }
    }

    pub fn materialized_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(vec![self.theta_hat.len()], self.materialize().into_iter().map(|v| v as f32).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.width as u32);
        w.u32(self.interior_h as u32);
        w.u32(self.interior_w as u32);
        w.u8(self.channels.channels() as u8);
        match self.objective {
            Objective::Untargeted => {
                w.u8(0);
                w.u32(0);
            }
            Objective::Targeted(t) => {
                w.u8(1);
                w.u32(t as u32);
            }
        }
        match self.provenance {
            Provenance::Trained(s) => {
                w.u8(0);
                w.u8(strategy_byte(s));
                w.u64(0);
            }
            Provenance::Random(seed) => {
                w.u8(1);
                w.u8(0);
                w.u64(seed);
            }
            Provenance::Black => {
                w.u8(2);
                w.u8(0);
                w.u64(0);
            }
        }
        w.u64(self.theta_hat.len() as u64);
        for &v in &self.theta_hat {
            w.f64(v);
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(buf);
        expect_magic(&mut r, MAGIC, "framing")?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(FormatError::Version { what: "framing", found: version, expected: VERSION });
        }
        let width = r.u32()? as usize;
        let interior_h = r.u32()? as usize;
        let interior_w = r.u32()? as usize;
        let channels = match r.u8()? {
            3 => ChannelMode::Color,
            1 => ChannelMode::Gray,
            c => return Err(FormatError::CorruptHeader(format!("unsupported channel count {c}"))),
        };
        let objective = match (r.u8()?, r.u32()?) {
            (0, _) => Objective::Untargeted,
            (1, t) => Objective::Targeted(t as usize),
            (o, _) => return Err(FormatError::CorruptHeader(format!("unknown objective byte {o}"))),
        };
        let provenance = match (r.u8()?, r.u8()?, r.u64()?) {
            (0, s, _) => Provenance::Trained(
                strategy_from_byte(s).ok_or_else(|| FormatError::CorruptHeader(format!("unknown strategy byte {s}")))?,
            ),
            (1, _, seed) => Provenance::Random(seed),
            (2, _, _) => Provenance::Black,
            (p, _, _) => return Err(FormatError::CorruptHeader(format!("unknown provenance byte {p}"))),
        };
        if width == 0 || interior_h == 0 || interior_w == 0 {
            return Err(FormatError::CorruptHeader("zero framing geometry".into()));
        }
        let declared = r.u64()? as usize;
        let expected = expected_len(width, interior_h, interior_w, channels);
        if declared != expected {
            return Err(FormatError::GeometryMismatch(format!(
                "declared {declared} parameters but W={width} around {interior_h}x{interior_w} needs {expected}"
            )));
        }
        let mut theta_hat = Vec::with_capacity(declared);
        for _ in 0..declared {
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(FormatError::CorruptPayload("non-finite framing parameter".into()));
            }
            theta_hat.push(v);
        }
        r.finish()?;
        Ok(Self { theta_hat, width, interior_h, interior_w, channels, objective, provenance })
    }
}

fn expected_len(width: usize, h: usize, w: usize, channels: ChannelMode) -> usize {
    2 * width * (h + w + 2 * width) * channels.channels()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn strategy_byte(s: Strategy) -> u8 {
    match s {
        Strategy::Vanilla => 0,
        Strategy::FrameAndResize => 1,
        Strategy::ResizeAndFrame => 2,
        Strategy::Occlude => 3,
    }
}

fn strategy_from_byte(b: u8) -> Option<Strategy> {
    Strategy::ALL.get(b as usize).copied()
}

pub fn save_framing(fp: &FramingParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, fp.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_framing(path: impl AsRef<Path>) -> Result<FramingParams> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FramingParams::from_bytes(&buf)?)
}

fn apply_any(input: &Tensor<f32>, fp: &FramingParams, rank: usize) -> Result<Tensor<f32>> {
    if input.rank() != rank {
        return Err(Error::shape("apply_framing", format!("expected rank {rank}, got {:?}", input.shape())));
    }
    let s = input.shape();
    let (h, w) = (s[rank - 2], s[rank - 1]);
    if (h, w) != (fp.interior_h, fp.interior_w) {
        return Err(Error::Geometry(format!(
            "framing was built for {}x{} inputs, got {h}x{w}",
            fp.interior_h, fp.interior_w
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(s);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(input.clone().reshape(shape)?);
    let border = tape.constant(fp.materialized_tensor()?);
    let y = tape.frame(x, border, fp.geometry())?;
    let out = tape.value(y).clone();
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

/// Surrounds a `3 x h x w` image with the framing; interior pixels are copied verbatim.
pub fn apply_framing(image: &Tensor<f32>, fp: &FramingParams) -> Result<Tensor<f32>> {
    apply_any(image, fp, 3)
}

/// Surrounds every frame of a `3 x T x h x w` clip with the same border.
pub fn apply_framing_clip(clip: &Tensor<f32>, fp: &FramingParams) -> Result<Tensor<f32>> {
    apply_any(clip, fp, 4)
}

/// Untrained reference framings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Independent uniform pixel values, fixed by the seed.
    Random(u64),
    Black,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "black" {
            return Ok(Baseline::Black);
        }
        s.strip_prefix("random:")
            .and_then(|t| t.parse().ok())
            .map(Baseline::Random)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline {s:?}")))
    }
}

pub fn baseline_framing(kind: Baseline, width: usize, interior_h: usize, interior_w: usize, channels: ChannelMode) -> Result<FramingParams> {
    let n = expected_len(width, interior_h, interior_w, channels);
    match kind {
        Baseline::Black => FramingParams::new(vec![0.0; n], width, (interior_h, interior_w), channels, Objective::Untargeted, Provenance::Black),
        Baseline::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = (0..n)
                .map(|_| {
                    let u: f64 = rng.random_range(1e-6..1.0 - 1e-6);
                    (u / (1.0 - u)).ln()
                })
                .collect();
            FramingParams::new(theta, width, (interior_h, interior_w), channels, Objective::Untargeted, Provenance::Random(seed))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramingConfig {
    /// Epoch budget.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor applied at 40% and 80% of the budget.
    pub decay: f64,
    /// Stop once the epoch-mean loss improves by less than this ...
    pub min_improvement: f64,
    /// ... for this many consecutive epochs.
    pub patience: usize,
    /// Train on at most this many examples from the start of the split.
    pub max_examples: Option<usize>,
    pub channels: ChannelMode,
    pub seed: u64,
}

impl Default for FramingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.1,
            decay: 0.1,
            min_improvement: 1e-4,
            patience: 2,
            max_examples: None,
            channels: ChannelMode::Color,
            seed: 0,
        }
    }
}

impl FramingConfig {
    pub fn milestones(&self) -> Vec<usize> {
        let at = |f: f64| ((self.epochs as f64) * f).round() as usize;
        vec![at(0.4), at(0.8)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramingEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramingLog {
    /// Objective over the training examples before the first update.
    pub initial_loss: f64,
    /// Objective over the training examples after the last update.
    pub final_loss: f64,
    pub epochs: Vec<FramingEpoch>,
    pub stopped_early: bool,
}

/// Mean objective of `theta` over `split`, in batches. For the untargeted
/// objective this is the mean log-probability of the true class; for a
/// target `t` it is the mean cross-entropy toward `t`.
pub fn framing_objective(
    model: &CnnClassifier,
    split: &DatasetSplit,
    fp: &FramingParams,
    strategy: Strategy,
    batch_size: usize,
) -> Result<f64> {
    let theta: Vec<f32> = fp.theta_hat.iter().map(|&v| v as f32).collect();
    let mut total = 0.0;
    let order: Vec<usize> = (0..split.len()).collect();
    for idx in order.chunks(batch_size.max(1)) {
        let (loss, _) = batch_loss(model, split, idx, &theta, fp.geometry(), strategy, fp.objective, false)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / split.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn batch_loss(
    model: &CnnClassifier,
    split: &DatasetSplit,
    idx: &[usize],
    theta: &[f32],
    geom: FrameGeom,
    strategy: Strategy,
    objective: Objective,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f32>>)> {
    let (batch, labels) = split.batch(idx);
    let mut tape = Tape::<f32>::new();
    let images = tape.constant(batch);
    let raw = Tensor::new(vec![theta.len()], theta.to_vec())?;
    let theta_var = if want_grad { tape.leaf(raw) } else { tape.constant(raw) };
    let border = tape.sigmoid(theta_var)?;
    let framed = compose_tape(&mut tape, images, border, geom, strategy)?;
    let fwd = model.forward_tape(&mut tape, framed, false)?;
    let loss = match objective {
        Objective::Untargeted => {
            let ce = tape.softmax_cross_entropy(fwd.logits, &labels)?;
            tape.scale(ce, -1.0)?
        }
        Objective::Targeted(t) => tape.softmax_cross_entropy(fwd.logits, &vec![t; labels.len()])?,
    };
    let value = tape.value(loss).item() as f64;
    if !want_grad {
        return Ok((value, None));
    }
    let mut grads = tape.backward(loss)?;
    let g = grads.take(theta_var).expect("framing parameters are trainable");
    Ok((value, Some(g.into_data())))
}

/// Trains a universal framing of width `width` against a frozen `model`.
///
/// Parameters start from a standard normal and are updated with Adam on
/// minibatches; the classifier itself is only ever borrowed immutably.
pub fn train_framing(
    train: &DatasetSplit,
    model: &CnnClassifier,
    width: usize,
    objective: Objective,
    strategy: Strategy,
    config: &FramingConfig,
) -> Result<(FramingParams, FramingLog)> {
    if model.kind() != train.kind() {
        return Err(Error::InvalidArgument(format!(
            "a {} classifier cannot be attacked with {} data",
            model.kind().name(),
            train.kind().name()
        )));
    }
    if train.is_empty() || config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument("framing training needs data, epochs and a batch size".into()));
    }
    if let Objective::Targeted(t) = objective {
        if t >= model.num_classes() {
            return Err(Error::LabelOutOfRange { label: t, classes: model.num_classes() });
        }
    }
    let (ih, iw) = strategy.framing_interior(width, (train.height(), train.width()))?;
    let subset = match config.max_examples {
        Some(n) => train.head(n),
        None => train.clone(),
    };
    let mut fp = FramingParams::standard_normal(width, ih, iw, config.channels, config.seed)?;
    fp.objective = objective;
    fp.provenance = Provenance::Trained(strategy);
    let geom = fp.geometry();

    let initial_loss = framing_objective(model, &subset, &fp, strategy, config.batch_size)?;
    let mut theta: Vec<f32> = fp.theta_hat.iter().map(|&v| v as f32).collect();
    let adam = AdamConfig::with_lr(config.lr).schedule(LrSchedule::Milestones { factor: config.decay, at: config.milestones() });
    let mut state = AdamState::<f32>::new(&[theta.len()], adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf4a3_e000);
    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut epochs = Vec::new();
    let mut stalled = 0;
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        state.start_epoch(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let (loss, grad) = batch_loss(model, &subset, idx, &theta, geom, strategy, objective, true)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss * idx.len() as f64;
            let grad = grad.expect("gradient requested");
            state.step(&mut [&mut theta], &[&grad]).map_err(|_| Error::Diverged { epoch })?;
        }
        let loss = total / subset.len() as f64;
        info!("framing W={width} {objective} {strategy} epoch {epoch}: loss {loss:.5} lr {:.1e}", state.lr());
        if let Some(prev) = epochs.last().map(|e: &FramingEpoch| e.loss) {
            if prev - loss < config.min_improvement {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
        epochs.push(FramingEpoch { epoch, lr: state.lr(), loss });
        if stalled >= config.patience {
            stopped_early = true;
            break;
        }
    }
    fp.theta_hat = theta.iter().map(|&v| v as f64).collect();
    let final_loss = framing_objective(model, &subset, &fp, strategy, config.batch_size)?;
    Ok((fp, FramingLog { initial_loss, final_loss, epochs, stopped_early }))
}
