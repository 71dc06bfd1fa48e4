//! Attack metrics, Grad-CAM saliency and report / image rendering.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::classifier::{predict_split, CnnClassifier};
use crate::composition::{bilinear_resize, check_compatible, compose_batch, Strategy};
use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::framing::{FramingParams, Objective, Provenance};
use crate::tensor::{Tape, Tensor};

/// Which kind of framing produced a report row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FramingKind {
    Clean,
    /// Trained adversarial framing.
    Adversarial,
    Random,
    Black,
}

impl FramingKind {
    pub fn name(self) -> &'static str {
        match self {
            FramingKind::Clean => "clean",
            FramingKind::Adversarial => "AF",
            FramingKind::Random => "RF",
            FramingKind::Black => "BF",
        }
    }

    pub fn of(fp: &FramingParams) -> Self {
        match fp.provenance() {
            Provenance::Trained(_) => FramingKind::Adversarial,
            Provenance::Random(_) => FramingKind::Random,
            Provenance::Black => FramingKind::Black,
        }
    }
}

impl fmt::Display for FramingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FramingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(FramingKind::Clean),
            "AF" => Ok(FramingKind::Adversarial),
            "RF" => Ok(FramingKind::Random),
            "BF" => Ok(FramingKind::Black),
            other => Err(Error::InvalidArgument(format!("unknown framing kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub framing_kind: FramingKind,
    pub width: Option<usize>,
    pub strategy: Option<Strategy>,
    pub metric: String,
    pub value: f64,
}

/// Tabular attack results plus free-form run metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackReport {
    pub rows: Vec<ReportRow>,
    pub metadata: BTreeMap<String, String>,
}

fn check_fraction(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{what} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl AttackReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        check_fraction(&row.metric, row.value)?;
        self.rows.push(row);
        Ok(())
    }

    pub fn push_clean(&mut self, accuracy: f64) -> Result<()> {
        self.push(ReportRow { framing_kind: FramingKind::Clean, width: None, strategy: None, metric: "accuracy".into(), value: accuracy })
    }

    pub fn push_attacked(&mut self, kind: FramingKind, width: usize, strategy: Strategy, accuracy: f64) -> Result<()> {
        self.push(ReportRow { framing_kind: kind, width: Some(width), strategy: Some(strategy), metric: "accuracy".into(), value: accuracy })
    }

    pub fn push_pixel_budget(&mut self, width: usize, strategy: Strategy, fraction: f64) -> Result<()> {
        self.push(ReportRow {
            framing_kind: FramingKind::Adversarial,
            width: Some(width),
            strategy: Some(strategy),
            metric: "pixel_budget".into(),
            value: fraction,
        })
    }

    /// Per-target rows `success:<t>` followed by `success_min/avg/max`.
    pub fn push_targeted(&mut self, width: usize, strategy: Strategy, result: &TargetedResult) -> Result<()> {
        let row = |metric: String, value| ReportRow {
            framing_kind: FramingKind::Adversarial,
            width: Some(width),
            strategy: Some(strategy),
            metric,
            value,
        };
        for &(t, rate) in &result.per_target {
            self.push(row(format!("success:{t}"), rate))?;
        }
        self.push(row("success_min".into(), result.min))?;
        self.push(row("success_avg".into(), result.avg))?;
        self.push(row("success_max".into(), result.max))
    }

    /// Share of inputs predicted as the most frequent class under a framing.
    pub fn push_modal(&mut self, kind: FramingKind, width: usize, strategy: Strategy, modal: ModalClass) -> Result<()> {
        self.push(ReportRow {
            framing_kind: kind,
            width: Some(width),
            strategy: Some(strategy),
            metric: format!("modal_fraction:{}", modal.class),
            value: modal.fraction,
        })
    }

    pub fn value(&self, kind: FramingKind, width: Option<usize>, strategy: Option<Strategy>, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.framing_kind == kind && r.width == width && r.strategy == strategy && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(["framing_kind", "W", "strategy", "metric", "value"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.framing_kind.name().to_string(),
                r.width.map(|v| v.to_string()).unwrap_or_default(),
                r.strategy.map(|s| s.name().to_string()).unwrap_or_default(),
                r.metric.clone(),
                format!("{:.6}", r.value),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let bad = |msg: String| Error::InvalidArgument(format!("report csv: {msg}"));
        let header = r.headers().map_err(|e| bad(e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != ["framing_kind", "W", "strategy", "metric", "value"] {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut report = AttackReport::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let opt = |s: &str| if s.is_empty() { None } else { Some(s.to_string()) };
            let width = opt(&rec[1]).map(|s| s.parse::<usize>().map_err(|e| bad(e.to_string()))).transpose()?;
            let strategy = opt(&rec[2]).map(|s| s.parse::<Strategy>()).transpose()?;
            let value = rec[4].parse::<f64>().map_err(|e| bad(e.to_string()))?;
            report.push(ReportRow { framing_kind: rec[0].parse()?, width, strategy, metric: rec[3].to_string(), value })?;
        }
        Ok(report)
    }

    /// Column-aligned plain-text rendering, metadata first.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        let header = ["framing_kind", "W", "strategy", "metric", "value"].map(String::from);
        let mut cells = vec![header];
        for r in &self.rows {
            cells.push([
                r.framing_kind.name().to_string(),
                r.width.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                r.strategy.map(|s| s.name().to_string()).unwrap_or_else(|| "-".into()),
                r.metric.clone(),
                format!("{:.6}", r.value),
            ]);
        }
        let mut widths = [0usize; 5];
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 4 { format!("{c:>w$}") } else { format!("{c:<w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Writes `report` as CSV to `path` and as an aligned table next to it
/// (same name, `.txt` extension). Returns the table's path.
pub fn render_report(report: &AttackReport, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    std::fs::write(path, report.to_csv()?).map_err(|e| Error::io(path, e))?;
    let table = path.with_extension("txt");
    std::fs::write(&table, report.to_text_table()).map_err(|e| Error::io(&table, e))?;
    Ok(table)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<AttackReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AttackReport::from_csv(&text)
}

/// Fraction of framed-image pixels that belong to the border, kept as an
/// exact ratio `border / total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBudget {
    pub border: u64,
    pub total: u64,
}

impl PixelBudget {
    pub fn fraction(&self) -> f64 {
        self.border as f64 / self.total as f64
    }
}

pub fn pixel_budget(width: usize, h: usize, w: usize) -> Result<PixelBudget> {
    if width == 0 {
        return Err(Error::InvalidArgument("pixel budget needs W >= 1".into()));
    }
    let (bw, h, w) = (width as u64, h as u64, w as u64);
    Ok(PixelBudget { border: 2 * bw * (h + w + 2 * bw), total: (h + 2 * bw) * (w + 2 * bw) })
}

/// Predictions on `split` after composing every input with `fp`.
pub fn attacked_predictions(model: &CnnClassifier, fp: &FramingParams, split: &DatasetSplit, strategy: Strategy) -> Result<Vec<usize>> {
    check_compatible(fp, strategy, (split.height(), split.width()))?;
    let pre = |b: &Tensor<f32>| compose_batch(b, fp, strategy);
    predict_split(model, split, Some(&pre))
}

pub fn eval_clean(model: &CnnClassifier, split: &DatasetSplit) -> Result<f64> {
    let preds = predict_split(model, split, None)?;
    Ok(accuracy(&preds, split.labels()))
}

/// Accuracy over the whole split with every input framed by `fp`.
pub fn eval_untargeted(model: &CnnClassifier, fp: &FramingParams, split: &DatasetSplit, strategy: Strategy) -> Result<f64> {
    let preds = attacked_predictions(model, fp, split, strategy)?;
    Ok(accuracy(&preds, split.labels()))
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetedResult {
    /// `(target, success rate)` in the order the framings were given.
    pub per_target: Vec<(usize, f64)>,
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

/// Success rate of each targeted framing: the share of inputs whose argmax
/// prediction is the framing's target.
pub fn eval_targeted(model: &CnnClassifier, framings: &[FramingParams], split: &DatasetSplit, strategy: Strategy) -> Result<TargetedResult> {
    if framings.is_empty() {
        return Err(Error::InvalidArgument("at least one targeted framing is required".into()));
    }
    let mut seen = HashSet::new();
    let mut per_target = Vec::with_capacity(framings.len());
    for fp in framings {
        let Objective::Targeted(t) = fp.objective() else {
            return Err(Error::InvalidArgument("framing was not trained with a targeted objective".into()));
        };
        if t >= model.num_classes() {
            return Err(Error::LabelOutOfRange { label: t, classes: model.num_classes() });
        }
        if !seen.insert(t) {
            return Err(Error::InvalidArgument(format!("duplicate target {t}")));
        }
        let preds = attacked_predictions(model, fp, split, strategy)?;
        let rate = preds.iter().filter(|&&p| p == t).count() as f64 / preds.len() as f64;
        per_target.push((t, rate));
    }
    let rates = per_target.iter().map(|&(_, r)| r);
    let min = rates.clone().fold(f64::INFINITY, f64::min);
    let max = rates.clone().fold(f64::NEG_INFINITY, f64::max);
    let avg = rates.sum::<f64>() / per_target.len() as f64;
    Ok(TargetedResult { per_target, min, avg, max })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalClass {
    pub class: usize,
    pub fraction: f64,
}

/// Most frequent predicted class (ties go to the lowest id).
pub fn modal_class(preds: &[usize], num_classes: usize) -> Result<ModalClass> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &p in preds {
        if p >= num_classes {
            return Err(Error::LabelOutOfRange { label: p, classes: num_classes });
        }
        counts[p] += 1;
    }
    let (class, &n) = counts.iter().enumerate().rev().max_by_key(|&(_, c)| *c).expect("non-empty");
    Ok(ModalClass { class, fraction: n as f64 / preds.len() as f64 })
}

/// Grad-CAM heatmap over an input's spatial extent, normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `h x w`.
    pub heatmap: Tensor<f32>,
    pub class: usize,
    pub layer: String,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.heatmap.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.heatmap.shape()[1]
    }

    /// Mean saliency over the outer ring of `border` pixels and over the rest.
    pub fn border_interior_means(&self, border: usize) -> Result<(f64, f64)> {
        let (h, w) = (self.height(), self.width());
        if 2 * border >= h || 2 * border >= w || border == 0 {
            return Err(Error::Geometry(format!("border {border} does not fit a {h}x{w} map")));
        }
        let (mut bs, mut bn, mut is, mut inn) = (0.0, 0usize, 0.0, 0usize);
        for r in 0..h {
            for c in 0..w {
                let v = self.heatmap.data()[r * w + c] as f64;
                if r < border || r >= h - border || c < border || c >= w - border {
                    bs += v;
                    bn += 1;
                } else {
                    is += v;
                    inn += 1;
                }
            }
        }
        Ok((bs / bn as f64, is / inn as f64))
    }
}

/// Grad-CAM for one input (`3 x h x w` image or `3 x T x h x w` clip) and one class.
///
/// Taps the last conv block after its ReLU. For clips the map is averaged
/// over time before upsampling.
pub fn grad_cam(model: &CnnClassifier, input: &Tensor<f32>, class: usize) -> Result<SaliencyMap> {
    if class >= model.num_classes() {
        return Err(Error::LabelOutOfRange { label: class, classes: model.num_classes() });
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);

    let mut trunk = Tape::<f32>::new();
    let x = trunk.constant(input.clone().reshape(shape)?);
    let (feat, _) = model.features_tape(&mut trunk, x, false)?;
    let activations = trunk.value(feat).clone();

    let mut head = Tape::<f32>::new();
    let a = head.leaf(activations.clone());
    let (logits, _) = model.head_tape(&mut head, a, false)?;
    let mut onehot = Tensor::zeros(&[1, model.num_classes()]);
    onehot.data_mut()[class] = 1.0;
    let score = head.weighted_sum(logits, &onehot)?;
    let mut grads = head.backward(score)?;
    let g = grads.take(a).expect("activations are a leaf");

    // activations: 1 x C x [T x] fh x fw
    let s = activations.shape();
    let channels = s[1];
    let (fh, fw) = (s[s.len() - 2], s[s.len() - 1]);
    let positions: usize = s[2..].iter().product();
    let frames = positions / (fh * fw);
    let mut cam = vec![0f32; fh * fw];
    for k in 0..channels {
        let ga = &g.data()[k * positions..(k + 1) * positions];
        let weight = ga.iter().sum::<f32>() / positions as f32;
        let ak = &activations.data()[k * positions..(k + 1) * positions];
        for (i, v) in ak.iter().enumerate() {
            cam[i % (fh * fw)] += weight * v / frames as f32;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let up = bilinear_resize(&Tensor::new(vec![1, fh, fw], cam)?, h, w)?;
    let mut heat = up.into_data();
    let lo = heat.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = heat.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo > 0.0 {
        for v in &mut heat {
            *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    } else {
        heat.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(SaliencyMap {
        heatmap: Tensor::new(vec![h, w], heat)?,
        class,
        layer: format!("block{}.relu", model.architecture().blocks.len()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencySample {
    pub index: usize,
    /// Class the map explains: the prediction on the framed input.
    pub class: usize,
    pub border_mean: f64,
    pub interior_mean: f64,
}

/// Grad-CAM on the first `n` examples of `split` after Vanilla framing with
/// `fp`, comparing mean saliency on the border ring with the interior.
pub fn border_saliency(model: &CnnClassifier, fp: &FramingParams, split: &DatasetSplit, n: usize) -> Result<Vec<SaliencySample>> {
    check_compatible(fp, Strategy::Vanilla, (split.height(), split.width()))?;
    let n = n.min(split.len());
    let samples = crate::par::map_range(n, |i| -> Result<SaliencySample> {
        let (batch, _) = split.batch(&[i]);
        let framed = compose_batch(&batch, fp, Strategy::Vanilla)?;
        let class = model.predict(&framed)?[0];
        let s = framed.shape()[1..].to_vec();
        let map = grad_cam(model, &framed.reshape(s)?, class)?;
        let (border_mean, interior_mean) = map.border_interior_means(fp.width())?;
        Ok(SaliencySample { index: i, class, border_mean, interior_mean })
    });
    samples.into_iter().collect()
}

/// Byte value of a `[0, 1]` intensity: `round(v * 255)`, halves rounded up, clamped.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary P6 encoding of a `3 x h x w`, `1 x h x w` or `h x w` tensor.
pub fn ppm_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    let (c, h, w) = match *s {
        [c @ (1 | 3), h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(Error::shape("render_image", format!("expected 3 x h x w, 1 x h x w or h x w, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            out.push(quantize(d[src * h * w + i]));
        }
    }
    Ok(out)
}

pub fn render_image(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ppm_bytes(image)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses a P6 file written by [`ppm_bytes`] back into a `3 x h x w` byte image.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::InvalidArgument("not a binary 8-bit PPM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = &bytes[pos + 1..];
    if body.len() != 3 * h * w {
        return Err(bad());
    }
    Ok((h, w, body.to_vec()))
}

/// Blue-to-red false colour for a `h x w` map in `[0, 1]`, as `3 x h x w`.
pub fn heatmap_rgb(map: &SaliencyMap) -> Tensor<f32> {
    let n = map.height() * map.width();
    let mut out = vec![0f32; 3 * n];
    for (i, &v) in map.heatmap.data().iter().enumerate() {
        out[i] = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
        out[n + i] = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
        out[2 * n + i] = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, map.height(), map.width()], out).expect("shape matches data")
}

/// Alpha-blends the false-colour map over a `3 x h x w` image.
pub fn overlay(image: &Tensor<f32>, map: &SaliencyMap, alpha: f32) -> Result<Tensor<f32>> {
    let heat = heatmap_rgb(map);
    if image.shape() != heat.shape() {
        return Err(Error::shape("overlay", format!("image {:?} vs map {:?}", image.shape(), heat.shape())));
    }
    let data = image.data().iter().zip(heat.data()).map(|(&a, &b)| (1.0 - alpha) * a + alpha * b).collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Places `3 x h_i x w_i` panels side by side on a white canvas, `gap` pixels apart.
pub fn side_by_side(panels: &[&Tensor<f32>], gap: usize) -> Result<Tensor<f32>> {
    if panels.is_empty() {
        return Err(Error::InvalidArgument("no panels".into()));
    }
    for p in panels {
        if p.rank() != 3 || p.shape()[0] != 3 {
            return Err(Error::shape("side_by_side", format!("expected 3 x h x w, got {:?}", p.shape())));
        }
    }
    let h = panels.iter().map(|p| p.shape()[1]).max().expect("non-empty");
    let w = panels.iter().map(|p| p.shape()[2]).sum::<usize>() + gap * (panels.len() - 1);
    let mut out = vec![1f32; 3 * h * w];
    let mut left = 0;
    for p in panels {
        let (ph, pw) = (p.shape()[1], p.shape()[2]);
        for c in 0..3 {
            for r in 0..ph {
                let src = &p.data()[(c * ph + r) * pw..(c * ph + r + 1) * pw];
                out[(c * h + r) * w + left..(c * h + r) * w + left + pw].copy_from_slice(src);
            }
        }
        left += pw + gap;
    }
    Tensor::new(vec![3, h, w], out)
}
