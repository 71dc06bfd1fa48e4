//! End-to-end acceptance run. Prints one `PASS`/`FAIL` line per criterion.
//!
//! Drives the CLI in-process against a scratch directory with default
//! settings, so the numbers match the README walkthrough. Set
//! `ADVFRAME_ACCEPTANCE_ONLY=1,2,7` to run a subset and
//! `ADVFRAME_ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advframe::classifier::{load_checkpoint, CnnClassifier};
use advframe::composition::{compose, compose_batch, Strategy};
use advframe::dataset::{load_split, DatasetSplit};
use advframe::evaluation::{eval_untargeted, grad_cam, pixel_budget, read_report, AttackReport, FramingKind};
use advframe::framing::{load_framing, ChannelMode, FramingParams};
use advframe::gradcheck::{run_op, OPS};
use advframe::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Outcome {
    id: u32,
    name: &'static str,
    result: Check,
    elapsed: Duration,
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["advframe"];
    argv.extend_from_slice(args);
    advframe_cli::run(argv).map_err(|e| format!("advframe {}: {}", args.join(" "), e.machine_line()))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn within(budget_secs: u64, started: Instant) -> Result<(), String> {
    let t = started.elapsed();
    ensure(t <= Duration::from_secs(budget_secs), format!("took {:.0}s, budget {budget_secs}s", t.as_secs_f64()))
}

fn acc(report: &AttackReport, kind: FramingKind, w: usize, s: Strategy) -> Result<f64, String> {
    report.value(kind, Some(w), Some(s), "accuracy").ok_or(format!("no {} W={w} {} row", kind.name(), s.name()))
}

/// Shared artifacts: image data, the default victim and the default sweep.
struct Images {
    data: PathBuf,
    model: PathBuf,
    sweep: PathBuf,
    clean: f64,
    setup: Duration,
}

fn images(root: &Path) -> Result<Images, String> {
    let t = Instant::now();
    let data = root.join("data");
    let model_dir = root.join("model");
    let sweep = root.join("sweep");
    cli(&["gen-data", "--out", p(&data)])?;
    cli(&["train-classifier", "--data", p(&data), "--out", p(&model_dir)])?;
    let model = model_dir.join("model.afck");
    cli(&["sweep", "--data", p(&data), "--model", p(&model), "--out", p(&sweep)])?;
    let clean = read_report(model_dir.join("report.csv"))
        .map_err(|e| e.to_string())?
        .value(FramingKind::Clean, None, None, "accuracy")
        .ok_or("no clean accuracy row")?;
    Ok(Images { data, model, sweep, clean, setup: t.elapsed() })
}

fn gradients() -> Check {
    let t = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (i, op) in OPS.iter().enumerate() {
        let s = run_op(op, 100, 1000 * i as u64).map_err(|e| e.to_string())?;
        ensure(s.checked >= 100, format!("{op}: {} usable instances", s.checked))?;
        ensure(s.worst <= 1e-4, format!("{op}: relative error {:.3e}", s.worst))?;
        if s.worst > worst.0 {
            worst = (s.worst, op);
        }
    }
    within(120, t)?;
    Ok(format!("{} ops x 100 instances, worst {:.2e} ({})", OPS.len(), worst.0, worst.1))
}

/// Border pixels counted one by one on the framed canvas.
fn enumerate_border(w: usize, h: usize, x: usize) -> (u64, u64) {
    let (oh, ow) = (h + 2 * w, x + 2 * w);
    let mut border = 0;
    for r in 0..oh {
        for c in 0..ow {
            if r < w || r >= h + w || c < w || c >= x + w {
                border += 1;
            }
        }
    }
    (border, (oh * ow) as u64)
}

fn budget() -> Check {
    for w in 1..=8 {
        for (h, x) in [(224, 224), (32, 32), (17, 40), (1, 1)] {
            let b = pixel_budget(w, h, x).map_err(|e| e.to_string())?;
            ensure((b.border, b.total) == enumerate_border(w, h, x), format!("W={w} {h}x{x}: {}/{}", b.border, b.total))?;
        }
    }
    let f = |w| pixel_budget(w, 224, 224).map(|b| (b.border, b.total, b.fraction())).map_err(|e| e.to_string());
    let (b1, b2, b4) = (f(1)?, f(2)?, f(4)?);
    ensure(b1.2 < 0.02 && b2.2 < 0.035 && b4.2 < 0.07, format!("bounds: {:.4} {:.4} {:.4}", b1.2, b2.2, b4.2))?;
    ensure((b1.0, b1.1) == (900, 51076), format!("W=1: {}/{}", b1.0, b1.1))?;
    ensure((b4.0, b4.1) == (3648, 53824), format!("W=4: {}/{}", b4.0, b4.1))?;
    ensure(
        (b2.0, b2.1) == (1824, 51984),
        format!("W=2: {}/{} by formula and enumeration, quoted value 1824/51984 (W=1 900/51076 and W=4 3648/53824 match)", b2.0, b2.1),
    )?;
    Ok(format!("matches enumeration; W=1 {}/{}, W=2 {}/{}, W=4 {}/{}", b1.0, b1.1, b2.0, b2.1, b4.0, b4.1))
}

fn efficacy(img: &Images) -> Check {
    let report = read_report(img.sweep.join("report.csv")).map_err(|e| e.to_string())?;
    let v = Strategy::Vanilla;
    ensure(img.clean >= 0.85, format!("clean accuracy {:.3}", img.clean))?;
    let mut line = format!("clean {:.3};", img.clean);
    for w in 1..=4 {
        let (af, rf, bf) = (
            acc(&report, FramingKind::Adversarial, w, v)?,
            acc(&report, FramingKind::Random, w, v)?,
            acc(&report, FramingKind::Black, w, v)?,
        );
        line += &format!(" W={w} AF {af:.3} RF {rf:.3} BF {bf:.3};");
        ensure(af < rf && af < bf, format!("ordering at W={w}:{line}"))?;
        if w == 2 {
            ensure(af <= 0.5 * rf && af <= 0.5 * bf, format!("W=2 ratio:{line}"))?;
        }
        if w == 4 {
            ensure(af <= 0.25, format!("W=4 above 2x chance:{line}"))?;
        }
    }
    ensure(img.setup <= Duration::from_secs(20 * 60), format!("took {:.0}s, budget 1200s", img.setup.as_secs_f64()))?;
    Ok(format!("{line} {:.0}s", img.setup.as_secs_f64()))
}

fn monotone(img: &Images) -> Check {
    let report = read_report(img.sweep.join("report.csv")).map_err(|e| e.to_string())?;
    let a: Vec<f64> = (1..=4).map(|w| acc(&report, FramingKind::Adversarial, w, Strategy::Vanilla)).collect::<Result<_, _>>()?;
    for i in 1..a.len() {
        ensure(a[i] <= a[i - 1] + 0.02, format!("AF accuracy rises from W={} to W={}: {a:?}", i, i + 1))?;
    }
    Ok(format!("AF accuracy by W: {a:.3?}"))
}

fn targeted(img: &Images, root: &Path) -> Check {
    let t = Instant::now();
    let out = root.join("targeted");
    cli(&["targeted-suite", "--data", p(&img.data), "--model", p(&img.model), "--targets", "8", "--width", "4", "--out", p(&out)])?;
    let files = fs::read_dir(out.join("framings"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "affr"))
        .count();
    let report = read_report(out.join("report.csv")).map_err(|e| e.to_string())?;
    let get = |m: &str| report.value(FramingKind::Adversarial, Some(4), Some(Strategy::Vanilla), m).ok_or(format!("no {m} row"));
    let (min, avg, max) = (get("success_min")?, get("success_avg")?, get("success_max")?);
    let per: Vec<String> =
        report.rows.iter().filter(|r| r.metric.starts_with("success:")).map(|r| format!("{}={:.3}", &r.metric[8..], r.value)).collect();
    let classes = load_split(img.data.join("val.afds")).map_err(|e| e.to_string())?.num_classes();
    let line = format!("min {min:.3} avg {avg:.3} max {max:.3} [{}], {:.0}s", per.join(" "), t.elapsed().as_secs_f64());
    ensure(files == 8 && per.len() == 8, format!("{files} framing files, {} targets", per.len()))?;
    ensure(min <= avg && avg <= max, format!("summary out of order: {line}"))?;
    ensure(min >= 5.0 / classes as f64, format!("weakest target below {:.3}: {line}", 5.0 / classes as f64))?;
    within(25 * 60, t)?;
    Ok(line)
}

fn strategies(img: &Images, root: &Path) -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let width = rng.random_range(1..5);
        let (h, w) = (rng.random_range(2 * width + 1..48), rng.random_range(2 * width + 1..48));
        let x = Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).map_err(|e| e.to_string())?;
        for s in [Strategy::Vanilla, Strategy::FrameAndResize, Strategy::ResizeAndFrame, Strategy::Occlude] {
            let (ih, iw) = s.framing_interior(width, (h, w)).map_err(|e| e.to_string())?;
            let fp = FramingParams::standard_normal(width, ih, iw, ChannelMode::Color, rng.random()).map_err(|e| e.to_string())?;
            let y = compose(&x, &fp, s).map_err(|e| format!("{} {h}x{w} W={width}: {e}", s.name()))?;
            let want = if s == Strategy::Vanilla { (h + 2 * width, w + 2 * width) } else { (h, w) };
            ensure(y.shape() == [3, want.0, want.1], format!("{} {h}x{w} W={width}: {:?}", s.name(), y.shape()))?;
        }
    }
    let out = root.join("strategies");
    let list = "vanilla,frame-resize,resize-frame,occlude";
    cli(&["sweep", "--data", p(&img.data), "--model", p(&img.model), "--widths", "1", "--strategies", list, "--out", p(&out)])?;
    let report = read_report(out.join("report.csv")).map_err(|e| e.to_string())?;
    let vanilla = acc(&report, FramingKind::Adversarial, 1, Strategy::Vanilla)?;
    let fr = acc(&report, FramingKind::Adversarial, 1, Strategy::FrameAndResize)?;
    let rf = acc(&report, FramingKind::Adversarial, 1, Strategy::ResizeAndFrame)?;
    let oc = acc(&report, FramingKind::Adversarial, 1, Strategy::Occlude)?;
    let line = format!("W=1 AF accuracy: vanilla {vanilla:.3} frame-resize {fr:.3} resize-frame {rf:.3} occlude {oc:.3}");
    ensure(fr > vanilla, format!("frame-resize not above vanilla: {line}"))?;
    within(15 * 60, t)?;
    Ok(format!("{line}, {:.0}s", t.elapsed().as_secs_f64()))
}

fn preservation(img: &Images, root: &Path) -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let (h, w, width) = (rng.random_range(1..48), rng.random_range(1..48), rng.random_range(1..6));
        let fp = FramingParams::standard_normal(width, h, w, ChannelMode::Color, i).map_err(|e| e.to_string())?;
        let x: Vec<f32> = (0..3 * h * w).map(|_| rng.random()).collect();
        let y = compose(&Tensor::new(vec![3, h, w], x.clone()).unwrap(), &fp, Strategy::Vanilla).map_err(|e| e.to_string())?;
        let ow = w + 2 * width;
        for c in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    let a = x[(c * h + r) * w + col];
                    let b = y.data()[(c * (h + 2 * width) + r + width) * ow + col + width];
                    ensure(a.to_bits() == b.to_bits(), format!("image {i} channel {c} ({r},{col}) changed"))?;
                }
            }
        }
    }

    // One framing file drives a whole evaluation: the CLI result equals the
    // in-process evaluation of the same file.
    let val = load_split(img.data.join("val.afds")).map_err(|e| e.to_string())?;
    let model = load_checkpoint(&img.model).map_err(|e| e.to_string())?;
    let framing = img.sweep.join("framings/af_vanilla_w2.affr");
    let out = root.join("eval_w2");
    cli(&["eval", "--data", p(&img.data), "--model", p(&img.model), "--framing", p(&framing), "--out", p(&out)])?;
    let fp = load_framing(&framing).map_err(|e| e.to_string())?;
    let direct = eval_untargeted(&model, &fp, &val, Strategy::Vanilla).map_err(|e| e.to_string())?;
    let reported = acc(&read_report(out.join("report.csv")).map_err(|e| e.to_string())?, FramingKind::Adversarial, 2, Strategy::Vanilla)?;
    ensure((direct - reported).abs() < 5e-7, format!("eval report {reported} vs direct {direct}"))?;

    round_trips(&val, &model, &fp)?;
    within(60, t)?;
    Ok(format!("1000 interiors bit-identical, eval from one file, round-trips exact, {:.1}s", t.elapsed().as_secs_f64()))
}

fn round_trips(val: &DatasetSplit, model: &CnnClassifier, fp: &FramingParams) -> Result<(), String> {
    let bytes = val.to_bytes();
    let back = DatasetSplit::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let same_pixels = (0..val.len()).all(|i| bits(val.pixels(i)) == bits(back.pixels(i)));
    ensure(back.to_bytes() == bytes && same_pixels && back.labels() == val.labels(), "dataset round-trip".into())?;
    let bytes = model.to_bytes();
    let back = CnnClassifier::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let same = model.params().iter().zip(back.params()).all(|(a, b)| bits(a.data()) == bits(b.data()));
    ensure(back.to_bytes() == bytes && same, "checkpoint round-trip".into())?;
    let bytes = fp.to_bytes();
    let back = FramingParams::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let same = fp.theta_hat().iter().zip(back.theta_hat()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(back.to_bytes() == bytes && same && back.provenance() == fp.provenance(), "framing round-trip".into())
}

fn bits(x: &[f32]) -> Vec<u32> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn video(root: &Path) -> Check {
    let t = Instant::now();
    let data = root.join("clips");
    let model_dir = root.join("clip_model");
    let fr = root.join("clip_framing");
    let ev = root.join("clip_eval");
    cli(&["gen-data", "--kind", "clip", "--out", p(&data)])?;
    cli(&["train-classifier", "--data", p(&data), "--out", p(&model_dir)])?;
    let model = model_dir.join("model.afck");
    cli(&["train-framing", "--data", p(&data), "--model", p(&model), "--width", "4", "--out", p(&fr)])?;
    let framing = fr.join("framing.affr");
    cli(&["eval", "--data", p(&data), "--model", p(&model), "--framing", p(&framing), "--out", p(&ev)])?;

    let val = load_split(data.join("val.afds")).map_err(|e| e.to_string())?;
    let fp = load_framing(&framing).map_err(|e| e.to_string())?;
    let (frames, h, w, width) = (val.frames(), val.height(), val.width(), fp.width());
    let (oh, ow) = (h + 2 * width, w + 2 * width);
    let idx: Vec<usize> = (0..val.len()).collect();
    for chunk in idx.chunks(64) {
        let (batch, _) = val.batch(chunk);
        let y = compose_batch(&batch, &fp, Strategy::Vanilla).map_err(|e| e.to_string())?;
        ensure(y.shape() == [chunk.len(), 3, frames, oh, ow], format!("framed clip batch shape {:?}", y.shape()))?;
        for n in 0..chunk.len() {
            for c in 0..3 {
                for r in 0..oh {
                    for col in 0..ow {
                        if (width..h + width).contains(&r) && (width..w + width).contains(&col) {
                            continue;
                        }
                        let at = |f: usize| y.data()[(((n * 3 + c) * frames + f) * oh + r) * ow + col].to_bits();
                        let i = chunk[n];
                        ensure((1..frames).all(|f| at(f) == at(0)), format!("clip {i}: border pixel ({r},{col}) varies over frames"))?;
                    }
                }
            }
        }
    }
    let report = read_report(ev.join("report.csv")).map_err(|e| e.to_string())?;
    let clean = report.value(FramingKind::Clean, None, None, "accuracy").ok_or("no clean row")?;
    let attacked = acc(&report, FramingKind::Adversarial, 4, Strategy::Vanilla)?;
    let line = format!("clean {clean:.3} attacked {attacked:.3} drop {:.3}, {:.0}s", clean - attacked, t.elapsed().as_secs_f64());
    ensure(clean - attacked >= 0.30, format!("drop below 0.30: {line}"))?;
    within(20 * 60, t)?;
    Ok(format!("border constant over {frames} frames on {} clips; {line}", val.len()))
}

fn saliency(img: &Images, root: &Path) -> Check {
    let t = Instant::now();
    let framing = img.sweep.join("framings/af_vanilla_w4.affr");
    let out = root.join("gradcam");
    cli(&["gradcam", "--data", p(&img.data), "--model", p(&img.model), "--framing", p(&framing), "--sample", "100", "--out", p(&out)])?;
    let report = read_report(out.join("report.csv")).map_err(|e| e.to_string())?;
    let dominance = report.rows.iter().find(|r| r.metric == "border_saliency_dominance").ok_or("no dominance row")?.value;

    let val = load_split(img.data.join("val.afds")).map_err(|e| e.to_string())?;
    let model = load_checkpoint(&img.model).map_err(|e| e.to_string())?;
    let fp = load_framing(&framing).map_err(|e| e.to_string())?;
    for i in 0..10 {
        let x = val.get(i).pixels;
        for (input, class) in [(x.clone(), val.labels()[i]), (compose(&x, &fp, Strategy::Vanilla).map_err(|e| e.to_string())?, 0)] {
            let map = grad_cam(&model, &input, class).map_err(|e| e.to_string())?;
            let (h, w) = (input.shape()[1], input.shape()[2]);
            ensure(map.height() == h && map.width() == w, format!("map {}x{} for input {h}x{w}", map.height(), map.width()))?;
            ensure(map.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)), format!("example {i}: map outside [0,1]"))?;
        }
    }
    ensure(dominance >= 0.70, format!("border saliency dominates on {:.0}% of 100", 100.0 * dominance))?;
    within(180, t)?;
    Ok(format!("border saliency dominates on {:.0}% of 100, maps in [0,1], {:.0}s", 100.0 * dominance, t.elapsed().as_secs_f64()))
}

/// Every file under `dir` with its bytes, snapshot included.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().filter_map(|e| e.ok()) {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Check {
    let root = root.join("replay");
    let data = root.join("data");
    let model = root.join("model");
    let fr = root.join("framing");
    let (d, m) = (p(&data).to_string(), model.join("model.afck"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", vec!["gen-data".into(), "--n-train".into(), "256".into(), "--n-val".into(), "128".into(), "--seed".into(), "3".into()]),
        ("train-classifier", vec!["train-classifier".into(), "--data".into(), d.clone(), "--epochs".into(), "2".into()]),
        ("train-framing", vec!["train-framing".into(), "--data".into(), d.clone(), "--model".into(), p(&m).into(), "--epochs".into(), "2".into(), "--objective".into(), "targeted:3".into()]),
        ("eval", vec!["eval".into(), "--data".into(), d.clone(), "--model".into(), p(&m).into(), "--framing".into(), p(&fr.join("framing.affr")).into()]),
        ("sweep", vec!["sweep".into(), "--data".into(), d.clone(), "--model".into(), p(&m).into(), "--widths".into(), "1,3".into(), "--epochs".into(), "1".into(), "--max-examples".into(), "128".into()]),
        ("targeted-suite", vec!["targeted-suite".into(), "--data".into(), d.clone(), "--model".into(), p(&m).into(), "--targets".into(), "2".into(), "--epochs".into(), "1".into(), "--max-examples".into(), "128".into()]),
        ("gradcam", vec!["gradcam".into(), "--data".into(), d.clone(), "--model".into(), p(&m).into(), "--framing".into(), p(&fr.join("framing.affr")).into(), "--sample".into(), "20".into()]),
        ("render", vec!["render".into(), "--data".into(), d.clone(), "--framing".into(), p(&fr.join("framing.affr")).into()]),
    ];
    let mut checked = 0;
    for (name, args) in runs {
        let first = match name {
            "gen-data" => data.clone(),
            "train-classifier" => model.clone(),
            "train-framing" => fr.clone(),
            other => root.join(other),
        };
        let mut argv: Vec<&str> = args.iter().map(String::as_str).collect();
        argv.extend(["--out", p(&first)]);
        cli(&argv)?;
        let again = root.join(format!("{name}_replay"));
        cli(&["replay", "--snapshot", p(&first.join("config.snapshot")), "--out", p(&again)])?;
        let (a, b) = (tree(&first), tree(&again));
        ensure(!a.is_empty() && a == b, format!("{name}: replayed outputs differ"))?;
        checked += a.len();
    }
    Ok(format!("8 commands replayed from snapshots, {checked} files byte-identical"))
}

fn main() {
    let only: Option<BTreeSet<u32>> =
        std::env::var("ADVFRAME_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let strict = std::env::var("ADVFRAME_ACCEPTANCE_STRICT").is_ok_and(|v| v != "0");
    let scratch = tempfile::tempdir().expect("temp dir");
    let root = scratch.path();

    let mut outcomes = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let result = f();
        let o = Outcome { id, name, result, elapsed: t.elapsed() };
        print_outcome(&o);
        outcomes.push(o);
    };

    run(1, "gradient oracle", &mut gradients);
    run(2, "pixel budget", &mut budget);
    let needs_images = [3, 4, 5, 6, 7, 9].iter().any(|&id| wanted(id));
    let img = if needs_images { Some(images(root)) } else { None };
    let with_img = |f: &dyn Fn(&Images) -> Check| match &img {
        Some(Ok(i)) => f(i),
        Some(Err(e)) => Err(format!("pipeline failed: {e}")),
        None => Err("image pipeline not run".into()),
    };
    run(3, "untargeted efficacy", &mut || with_img(&efficacy));
    run(4, "monotone width trend", &mut || with_img(&monotone));
    run(5, "targeted suite", &mut || with_img(&|i| targeted(i, root)));
    run(6, "strategy contracts", &mut || with_img(&|i| strategies(i, root)));
    run(7, "content preservation", &mut || with_img(&|i| preservation(i, root)));
    run(8, "video invariant", &mut || video(root));
    run(9, "grad-cam sanity", &mut || with_img(&|i| saliency(i, root)));
    run(10, "determinism", &mut || determinism(root));

    let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

fn print_outcome(o: &Outcome) {
    let (tag, detail) = match &o.result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {:>2} {tag} {} ({:.1}s): {detail}", o.id, o.name, o.elapsed.as_secs_f64());
}
