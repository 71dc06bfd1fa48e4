//! Small convolutional victim classifiers (2-D for images, 3-D for clips).

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{expect_magic, ByteReader, ByteWriter};
use crate::dataset::{DataKind, DatasetSplit, CHANNELS};
use crate::error::{Error, FormatError, Result};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::par;
use crate::tensor::{argmax_rows, ConvSpec, FrameGeom, Scalar, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"AFCK";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub out_channels: usize,
    /// Spatial stride; temporal stride is always 1.
    pub stride: usize,
}

/// Conv/ReLU blocks, then global average pooling and a linear head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub kind: DataKind,
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
}

impl Architecture {
    /// 16-32-64-64 channels with 3x3 kernels, downsampling every other block.
    pub fn image(num_classes: usize) -> Self {
        Self::with_widths(DataKind::Image, num_classes, [16, 32, 64, 64])
    }

    /// The volumetric counterpart, narrower to keep clip training affordable.
    pub fn clip(num_classes: usize) -> Self {
        Self::with_widths(DataKind::Clip, num_classes, [8, 16, 32, 32])
    }

    pub fn with_widths(kind: DataKind, num_classes: usize, widths: [usize; 4]) -> Self {
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| BlockSpec { out_channels: c, stride: if i % 2 == 1 { 2 } else { 1 } })
            .collect();
        Self { kind, in_channels: CHANNELS, blocks, num_classes }
    }

    pub fn for_split(split: &DatasetSplit) -> Self {
        match split.kind() {
            DataKind::Image => Self::image(split.num_classes()),
            DataKind::Clip => Self::clip(split.num_classes()),
        }
    }

    fn kernel_taps(&self) -> usize {
        match self.kind {
            DataKind::Image => 9,
            DataKind::Clip => 27,
        }
    }

    /// Shapes of the parameter tensors: (weight, bias) per block, then the head.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c = self.in_channels;
        for b in &self.blocks {
            shapes.push(match self.kind {
                DataKind::Image => vec![b.out_channels, c, 3, 3],
                DataKind::Clip => vec![b.out_channels, c, 3, 3, 3],
            });
            shapes.push(vec![b.out_channels]);
            c = b.out_channels;
        }
        shapes.push(vec![self.num_classes, c]);
        shapes.push(vec![self.num_classes]);
        shapes
    }
}

/// Vars recorded by one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Post-ReLU activations of the last conv block.
    pub features: Var,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnClassifier {
    arch: Architecture,
    params: Vec<Tensor<f32>>,
}

impl CnnClassifier {
    /// Uniform fan-in initialisation: every entry drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.param_shapes();
        let taps = arch.kernel_taps();
        let mut params = Vec::with_capacity(shapes.len());
        let mut fan_in = arch.in_channels * taps;
        for (i, shape) in shapes.iter().enumerate() {
            if i == shapes.len() - 2 {
                fan_in = shape[1];
            }
            let bound = 1.0 / (fan_in as f32).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::new(shape.clone(), data).expect("param shape"));
            if i % 2 == 1 && i < shapes.len() - 2 {
                fan_in = shape[0] * taps;
            }
        }
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor<f32>>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::shape("classifier", "parameter tensors do not match the architecture"));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn kind(&self) -> DataKind {
        self.arch.kind
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    /// Always true: global average pooling frees the spatial extents.
    pub fn accepts_variable_spatial_size(&self) -> bool {
        true
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let rank = match self.arch.kind {
            DataKind::Image => 4,
            DataKind::Clip => 5,
        };
        if shape.len() != rank {
            return Err(Error::shape(
                "forward",
                format!("{} model expects rank-{rank} input, got {shape:?}", self.arch.kind.name()),
            ));
        }
        if shape[1] != self.arch.in_channels {
            return Err(Error::shape(
                "forward",
                format!("channel dimension: model expects {} channels, got {}", self.arch.in_channels, shape[1]),
            ));
        }
        Ok(())
    }

    /// Records the conv trunk on `tape`, returning the last block's activations.
    pub fn features_tape<T: Scalar>(&self, tape: &mut Tape<T>, input: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(input).shape())?;
        let mut vars = Vec::with_capacity(self.params.len());
        let mut x = input;
        for (i, block) in self.arch.blocks.iter().enumerate() {
            let w = self.param_var(tape, 2 * i, trainable);
            let b = self.param_var(tape, 2 * i + 1, trainable);
            x = match self.arch.kind {
                DataKind::Image => tape.conv2d(x, w, b, block.stride, 1)?,
                DataKind::Clip => {
                    let spec = ConvSpec::volumetric([1, block.stride, block.stride], [1, 1, 1]);
                    tape.conv3d(x, w, b, spec)?
                }
            };
            x = tape.relu(x)?;
            vars.push(w);
            vars.push(b);
        }
        Ok((x, vars))
    }

    /// Pooling and the linear head on top of trunk activations.
    pub fn head_tape<T: Scalar>(&self, tape: &mut Tape<T>, features: Var, trainable: bool) -> Result<(Var, [Var; 2])> {
        let k = self.params.len();
        let pooled = tape.global_avg_pool(features)?;
        let w = self.param_var(tape, k - 2, trainable);
        let b = self.param_var(tape, k - 1, trainable);
        Ok((tape.linear(pooled, w, b)?, [w, b]))
    }

    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, input: Var, trainable: bool) -> Result<ForwardPass> {
        let (features, mut params) = self.features_tape(tape, input, trainable)?;
        let (logits, head) = self.head_tape(tape, features, trainable)?;
        params.extend(head);
        Ok(ForwardPass { logits, features, params })
    }

    fn param_var<T: Scalar>(&self, tape: &mut Tape<T>, i: usize, trainable: bool) -> Var {
        let t = self.params[i].cast::<T>();
        if trainable {
            tape.leaf(t)
        } else {
            tape.constant(t)
        }
    }

    /// `N x num_classes` logits for a batch.
    pub fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward_tape(&mut tape, x, false)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn predict(&self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }

    /// CRC-32 over the little-endian parameter bytes.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            for v in p.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u8(kind_byte(self.arch.kind));
        w.u16(self.arch.in_channels as u16);
        w.u16(self.arch.num_classes as u16);
        w.u16(self.arch.blocks.len() as u16);
        for b in &self.arch.blocks {
            w.u16(b.out_channels as u16);
            w.u8(b.stride as u8);
        }
        let total: usize = self.params.iter().map(Tensor::len).sum();
        w.u32(total as u32);
        let start = w.len();
        for p in &self.params {
            for &v in p.data() {
                w.f32(v);
            }
        }
        let crc = crc32fast::hash(&w.as_slice()[start..]);
        w.u32(crc);
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(buf);
        expect_magic(&mut r, MAGIC, "checkpoint")?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(FormatError::Version { what: "checkpoint", found: version, expected: VERSION });
        }
        let kind = match r.u8()? {
            0 => DataKind::Image,
            1 => DataKind::Clip,
            k => return Err(FormatError::CorruptHeader(format!("unknown model kind {k}"))),
        };
        let in_channels = r.u16()? as usize;
        let num_classes = r.u16()? as usize;
        let nblocks = r.u16()? as usize;
        if in_channels == 0 || num_classes == 0 || nblocks == 0 {
            return Err(FormatError::CorruptHeader("empty layer spec".into()));
        }
        let mut blocks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let out_channels = r.u16()? as usize;
            let stride = r.u8()? as usize;
            if out_channels == 0 || stride == 0 {
                return Err(FormatError::CorruptHeader("zero width or stride in layer spec".into()));
            }
            blocks.push(BlockSpec { out_channels, stride });
        }
        let arch = Architecture { kind, in_channels, blocks, num_classes };
        let shapes = arch.param_shapes();
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let total = r.u32()? as usize;
        if total != expected {
            return Err(FormatError::CorruptHeader(format!(
                "layer spec needs {expected} parameters, header declares {total}"
            )));
        }
        let block = r.take(total * 4)?;
        let crc = r.u32()?;
        r.finish()?;
        if crc32fast::hash(block) != crc {
            return Err(FormatError::Checksum);
        }
        let mut values = block.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let params = shapes
            .into_iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s, values.by_ref().take(n).collect()).expect("sized")
            })
            .collect();
        Ok(Self { arch, params })
    }
}

fn kind_byte(kind: DataKind) -> u8 {
    match kind {
        DataKind::Image => 0,
        DataKind::Clip => 1,
    }
}

pub fn save_checkpoint(model: &CnnClassifier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CnnClassifier> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(CnnClassifier::from_bytes(&buf)?)
}

/// Loads a checkpoint and insists on the given model kind.
pub fn load_checkpoint_as(path: impl AsRef<Path>, kind: DataKind) -> Result<CnnClassifier> {
    let model = load_checkpoint(path)?;
    if model.kind() != kind {
        return Err(FormatError::KindMismatch { expected: kind.name(), found: model.kind().name() }.into());
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_period: usize,
    /// Largest width of the random context border added to training batches
    /// (0 disables it). Each batch gets a border of width `0..=pad_augment`
    /// filled with uniform noise or a flat grey level.
    pub pad_augment: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 15, batch_size: 64, lr: 1e-3, decay: 0.3, decay_period: 5, pad_augment: 4, seed: 0 }
    }
}

fn context_border(
    tape: &mut Tape<f32>,
    x: Var,
    max_width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let width = rng.random_range(0..=max_width);
    if width == 0 {
        return Ok(x);
    }
    let s = tape.value(x).shape().to_vec();
    let geom = FrameGeom { width, interior_h: s[s.len() - 2], interior_w: s[s.len() - 1], channels: CHANNELS };
    let border: Vec<f32> = if rng.random_bool(0.5) {
        (0..geom.border_len()).map(|_| rng.random::<f32>()).collect()
    } else {
        vec![rng.random::<f32>(); geom.border_len()]
    };
    let border = tape.constant(Tensor::new(vec![border.len()], border)?);
    tape.frame(x, border, geom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn train_classifier(train: &DatasetSplit, config: &ClassifierConfig) -> Result<(CnnClassifier, Vec<EpochLog>)> {
    train_with_architecture(train, Architecture::for_split(train), config)
}

pub fn train_with_architecture(
    train: &DatasetSplit,
    arch: Architecture,
    config: &ClassifierConfig,
) -> Result<(CnnClassifier, Vec<EpochLog>)> {
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("classifier training needs at least one epoch".into()));
    }
    if config.batch_size == 0 || train.is_empty() {
        return Err(Error::InvalidArgument("empty training split or zero batch size".into()));
    }
    if arch.kind != train.kind() || arch.num_classes != train.num_classes() {
        return Err(Error::InvalidArgument("architecture does not match the training split".into()));
    }
    let mut model = CnnClassifier::init(arch, config.seed);
    let lengths: Vec<usize> = model.params.iter().map(Tensor::len).collect();
    let adam = AdamConfig::with_lr(config.lr)
        .schedule(LrSchedule::Step { factor: config.decay, period: config.decay_period });
    let mut state = AdamState::<f32>::new(&lengths, adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c1a5);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        state.start_epoch(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(config.batch_size) {
            let (batch, labels) = train.batch(idx);
            let diverged = |e: Error| match e {
                Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::Diverged { epoch },
                other => other,
            };
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(batch);
            let x = if config.pad_augment > 0 { context_border(&mut tape, x, config.pad_augment, &mut rng)? } else { x };
            let fwd = model.forward_tape(&mut tape, x, true).map_err(diverged)?;
            correct += argmax_rows(tape.value(fwd.logits)).iter().zip(&labels).filter(|(p, l)| p == l).count();
            let loss = tape.softmax_cross_entropy(fwd.logits, &labels).map_err(diverged)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += lv * labels.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor<f32>> = fwd
                .params
                .iter()
                .map(|&v| grads.take(v).expect("trainable parameter has a gradient"))
                .collect();
            let gs: Vec<&[f32]> = g.iter().map(|t| t.data()).collect();
            let mut ps: Vec<&mut [f32]> = model.params.iter_mut().map(|t| t.data_mut()).collect();
            state.step(&mut ps, &gs).map_err(diverged)?;
        }
        let entry = EpochLog {
            epoch,
            lr: state.lr(),
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        };
        info!("classifier epoch {epoch}: loss {:.4} acc {:.4} lr {:.2e}", entry.loss, entry.accuracy, entry.lr);
        log.push(entry);
    }
    Ok((model, log))
}

/// Batch transformation applied before the classifier sees its input.
pub type Preprocess<'a> = &'a (dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync);

pub const EVAL_BATCH: usize = 128;

/// Predicted classes for every example, sharded by batch and merged in order.
pub fn predict_split(model: &CnnClassifier, split: &DatasetSplit, preprocess: Option<Preprocess<'_>>) -> Result<Vec<usize>> {
    let batches = split.len().div_ceil(EVAL_BATCH);
    let parts = par::map_range(batches, |b| -> Result<Vec<usize>> {
        let idx: Vec<usize> = (b * EVAL_BATCH..((b + 1) * EVAL_BATCH).min(split.len())).collect();
        let (batch, _) = split.batch(&idx);
        let batch = match preprocess {
            Some(f) => f(&batch)?,
            None => batch,
        };
        model.predict(&batch)
    });
    let mut out = Vec::with_capacity(split.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions over the whole split.
pub fn evaluate_accuracy(model: &CnnClassifier, split: &DatasetSplit, preprocess: Option<Preprocess<'_>>) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    let preds = predict_split(model, split, preprocess)?;
    let correct = preds.iter().zip(split.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_shapes;

    #[test]
    fn identical_rows_for_identical_images() {
        let (train, _) = generate_shapes(0, 1, 1, 8, 32, 32).unwrap();
        let model = CnnClassifier::init(Architecture::image(8), 3);
        let (batch, _) = train.batch(&[0, 0, 0, 0]);
        let logits = model.logits(&batch).unwrap();
        let rows: Vec<&[f32]> = logits.data().chunks(8).collect();
        assert!(rows.iter().all(|r| *r == rows[0]));
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let (train, _) = generate_shapes(1, 64, 1, 8, 32, 32).unwrap();
        let model = CnnClassifier::init(Architecture::image(8), 11);
        let (batch, labels) = train.batch(&(0..64).collect::<Vec<_>>());
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(batch);
        let out = model.forward_tape(&mut tape, x, false).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
        let ce = tape.value(loss).item() as f64;
        assert!((ce - 8f64.ln()).abs() < 0.3, "initial cross-entropy {ce}");
    }

    #[test]
    fn accepts_several_spatial_sizes() {
        let model = CnnClassifier::init(Architecture::image(8), 0);
        for side in [32, 36] {
            let out = model.logits(&Tensor::full(&[2, 3, side, side], 0.5)).unwrap();
            assert_eq!(out.shape(), &[2, 8]);
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let model = CnnClassifier::init(Architecture::image(4), 0);
        let err = model.logits(&Tensor::full(&[1, 1, 32, 32], 0.5)).unwrap_err();
        assert!(err.to_string().contains("channel"));
    }

    #[test]
    fn zero_epochs_rejected() {
        let (train, _) = generate_shapes(0, 4, 1, 2, 16, 16).unwrap();
        let cfg = ClassifierConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train_classifier(&train, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let model = CnnClassifier::init(Architecture::clip(6), 5);
        let bytes = model.to_bytes();
        let back = CnnClassifier::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);

        let mut corrupt = bytes.clone();
        let mid = bytes.len() / 2;
        corrupt[mid] ^= 0x40;
        assert_eq!(CnnClassifier::from_bytes(&corrupt).unwrap_err(), FormatError::Checksum);

        let mut magic = bytes.clone();
        magic[1] = 0;
        assert_eq!(CnnClassifier::from_bytes(&magic).unwrap_err(), FormatError::BadMagic("checkpoint"));

        let mut ver = bytes;
        ver[4] = 2;
        assert!(matches!(CnnClassifier::from_bytes(&ver), Err(FormatError::Version { .. })));
    }

    #[test]
    fn constant_predictor_accuracy() {
        // Zero weights and a bias favouring class 0 always predict class 0.
        let (_, val) = generate_shapes(2, 1, 64, 8, 16, 16).unwrap();
        let mut model = CnnClassifier::init(Architecture::image(8), 0);
        for p in model.params_mut() {
            p.data_mut().fill(0.0);
        }
        let k = model.params().len();
        model.params_mut()[k - 1].data_mut()[0] = 1.0;
        let acc = evaluate_accuracy(&model, &val, None).unwrap();
        assert!((acc - 0.125).abs() <= 1.0 / 64.0);
        let id: Preprocess<'_> = &|t: &Tensor<f32>| Ok(t.clone());
        assert_eq!(evaluate_accuracy(&model, &val, Some(id)).unwrap(), acc);
    }
}
