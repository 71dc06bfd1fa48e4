use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use advframe::classifier::{load_checkpoint_as, save_checkpoint, train_classifier, ClassifierConfig, CnnClassifier};
use advframe::composition::{compose_batch, Strategy};
use advframe::dataset::{generate_moving_shapes, generate_shapes, load_split, save_split, DatasetSplit};
use advframe::evaluation::{
    attacked_predictions, border_saliency, eval_clean, eval_targeted, eval_untargeted, grad_cam, modal_class, overlay,
    pixel_budget, render_image, render_report, side_by_side, AttackReport, FramingKind,
};
use advframe::framing::{
    baseline_framing, load_framing, save_framing, train_framing, Baseline, ChannelMode, FramingConfig, FramingLog,
    FramingParams, Objective,
};
use advframe::par;
use advframe::tensor::Tensor;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;
use crate::snapshot::Snapshot;
use crate::{
    Command, EvalArgs, FramingOpts, GenDataArgs, GradcamArgs, RenderArgs, SweepArgs, TargetedSuiteArgs,
    TrainClassifierArgs, TrainFramingArgs,
};

type Res<T = ()> = Result<T, CliError>;

pub fn execute(command: Command, snap: &Snapshot) -> Res {
    let out = match &command {
        Command::GenData(a) => &a.out,
        Command::TrainClassifier(a) => &a.out,
        Command::TrainFraming(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Sweep(a) => &a.out,
        Command::TargetedSuite(a) => &a.out,
        Command::Gradcam(a) => &a.out,
        Command::Render(a) => &a.out,
        Command::Replay(_) => unreachable!("replay is expanded before execution"),
    }
    .clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::TrainFraming(a) => train_framing_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::TargetedSuite(a) => targeted_suite(a),
        Command::Gradcam(a) => gradcam(a),
        Command::Render(a) => render(a),
        Command::Replay(_) => unreachable!(),
    }?;
    snap.write_into(&out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Res {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_data(dir: &Path) -> Res<(DatasetSplit, DatasetSplit)> {
    Ok((load_split(dir.join("train.afds"))?, load_split(dir.join("val.afds"))?))
}

fn load_val(dir: &Path) -> Res<DatasetSplit> {
    Ok(load_split(dir.join("val.afds"))?)
}

fn load_model(path: &Path, data: &DatasetSplit) -> Res<CnnClassifier> {
    let model = load_checkpoint_as(path, data.kind())?;
    if model.num_classes() != data.num_classes() {
        return Err(CliError::Core(advframe::Error::Geometry(format!(
            "model has {} classes, data has {}",
            model.num_classes(),
            data.num_classes()
        ))));
    }
    Ok(model)
}

fn parse_channels(s: &str) -> Res<ChannelMode> {
    match s {
        "color" | "colour" => Ok(ChannelMode::Color),
        "gray" | "grey" => Ok(ChannelMode::Gray),
        other => Err(CliError::Invalid(format!("unknown channel mode {other:?}"))),
    }
}

fn framing_config(o: &FramingOpts, seed: u64) -> Res<FramingConfig> {
    Ok(FramingConfig {
        epochs: o.epochs,
        batch_size: o.batch_size,
        lr: o.lr,
        max_examples: o.max_examples,
        channels: parse_channels(&o.channels)?,
        seed,
        ..FramingConfig::default()
    })
}

fn loss_log(log: &FramingLog) -> String {
    let mut s = String::from("epoch,lr,loss\n");
    writeln!(s, "initial,,{:.6}", log.initial_loss).unwrap();
    for e in &log.epochs {
        writeln!(s, "{},{:e},{:.6}", e.epoch, e.lr, e.loss).unwrap();
    }
    writeln!(s, "final,,{:.6}", log.final_loss).unwrap();
    s
}

fn gen_data(a: GenDataArgs) -> Res {
    let (train, val) = match a.kind.as_str() {
        "image" => generate_shapes(
            a.seed,
            a.n_train.unwrap_or(4096),
            a.n_val.unwrap_or(1024),
            a.classes.unwrap_or(8),
            a.height.unwrap_or(32),
            a.width.unwrap_or(32),
        )?,
        "clip" => generate_moving_shapes(
            a.seed,
            a.n_train.unwrap_or(2048),
            a.n_val.unwrap_or(512),
            a.classes.unwrap_or(6),
            a.frames,
            a.height.unwrap_or(16),
            a.width.unwrap_or(16),
        )?,
        other => return Err(CliError::Invalid(format!("unknown data kind {other:?}"))),
    };
    save_split(&train, a.out.join("train.afds"))?;
    save_split(&val, a.out.join("val.afds"))?;
    println!("wrote {} train and {} val {}s to {}", train.len(), val.len(), train.kind().name(), a.out.display());
    Ok(())
}

fn train_classifier_cmd(a: TrainClassifierArgs) -> Res {
    let (train, val) = load_data(&a.data)?;
    let cfg = ClassifierConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        decay: a.decay,
        decay_period: a.decay_period,
        pad_augment: a.pad_augment,
        seed: a.seed,
    };
    let (model, log) = train_classifier(&train, &cfg)?;
    save_checkpoint(&model, a.out.join("model.afck"))?;
    let mut s = String::from("epoch,lr,loss,train_accuracy\n");
    for e in &log {
        writeln!(s, "{},{:e},{:.6},{:.6}", e.epoch, e.lr, e.loss, e.accuracy).unwrap();
    }
    write(&a.out.join("train_log.csv"), s)?;
    let clean = eval_clean(&model, &val)?;
    let mut report = AttackReport::new();
    report.push_clean(clean)?;
    report.metadata.insert("model_fingerprint".into(), format!("{:08x}", model.fingerprint()));
    render_report(&report, a.out.join("report.csv"))?;
    println!("clean val accuracy {clean:.4}");
    Ok(())
}

fn train_framing_cmd(a: TrainFramingArgs) -> Res {
    let (train, val) = load_data(&a.data)?;
    let model = load_model(&a.model, &train)?;
    let objective: Objective = a.objective.parse()?;
    let strategy: Strategy = a.strategy.parse()?;
    let cfg = framing_config(&a.opts, a.opts.seed)?;
    let (fp, log) = train_framing(&train, &model, a.width, objective, strategy, &cfg)?;
    save_framing(&fp, a.out.join("framing.affr"))?;
    write(&a.out.join("loss_log.csv"), loss_log(&log))?;
    let preds = attacked_predictions(&model, &fp, &val, strategy)?;
    let acc = preds.iter().zip(val.labels()).filter(|(p, l)| p == l).count() as f64 / val.len() as f64;
    println!(
        "framing W={} {objective} {strategy}: loss {:.4} -> {:.4}, val accuracy {acc:.4}",
        a.width, log.initial_loss, log.final_loss
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Res {
    let val = load_val(&a.data)?;
    let model = load_model(&a.model, &val)?;
    let strategy: Strategy = a.strategy.parse()?;
    let fp = match (&a.framing, &a.baseline) {
        (Some(path), _) => load_framing(path)?,
        (None, Some(b)) => {
            let (ih, iw) = strategy.framing_interior(a.width, (val.height(), val.width()))?;
            baseline_framing(b.parse::<Baseline>()?, a.width, ih, iw, parse_channels(&a.channels)?)?
        }
        (None, None) => return Err(CliError::Invalid("either --framing or --baseline is required".into())),
    };
    let kind = FramingKind::of(&fp);
    let mut report = AttackReport::new();
    report.push_clean(eval_clean(&model, &val)?)?;
    let preds = attacked_predictions(&model, &fp, &val, strategy)?;
    let acc = preds.iter().zip(val.labels()).filter(|(p, l)| p == l).count() as f64 / val.len() as f64;
    report.push_attacked(kind, fp.width(), strategy, acc)?;
    if let Objective::Targeted(t) = fp.objective() {
        let rate = preds.iter().filter(|&&p| p == t).count() as f64 / preds.len() as f64;
        report.push(advframe::evaluation::ReportRow {
            framing_kind: kind,
            width: Some(fp.width()),
            strategy: Some(strategy),
            metric: format!("success:{t}"),
            value: rate,
        })?;
    }
    report.push_modal(kind, fp.width(), strategy, modal_class(&preds, model.num_classes())?)?;
    if strategy == Strategy::Vanilla {
        report.push_pixel_budget(fp.width(), strategy, pixel_budget(fp.width(), val.height(), val.width())?.fraction())?;
    }
    report.metadata.insert("model_fingerprint".into(), format!("{:08x}", model.fingerprint()));
    report.metadata.insert("framing".into(), format!("{:?}", fp.provenance()));
    render_report(&report, a.out.join("report.csv"))?;
    print!("{}", report.to_text_table());
    Ok(())
}

struct Job {
    strategy: Strategy,
    width: usize,
    seed: u64,
}

fn sweep(a: SweepArgs) -> Res {
    let (train, val) = load_data(&a.data)?;
    let model = load_model(&a.model, &train)?;
    let strategies: Vec<Strategy> = a.strategies.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let baselines: Vec<Baseline> = a.baselines.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    if a.widths.is_empty() || a.widths.contains(&0) {
        return Err(CliError::Invalid("widths must be positive".into()));
    }
    let channels = parse_channels(&a.opts.channels)?;
    let jobs: Vec<Job> = strategies
        .iter()
        .flat_map(|&strategy| a.widths.iter().map(move |&width| (strategy, width)))
        .enumerate()
        .map(|(i, (strategy, width))| Job { strategy, width, seed: a.opts.seed.wrapping_add(i as u64) })
        .collect();
    // Sub-runs have disjoint seeds and are merged in job order.
    let trained = par::map_range(jobs.len(), |i| -> Res<(FramingParams, FramingLog)> {
        let j = &jobs[i];
        info!("sweep: training AF W={} {}", j.width, j.strategy);
        Ok(train_framing(&train, &model, j.width, Objective::Untargeted, j.strategy, &framing_config(&a.opts, j.seed)?)?)
    });
    let dir = a.out.join("framings");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut report = AttackReport::new();
    report.push_clean(eval_clean(&model, &val)?)?;
    for (job, result) in jobs.iter().zip(trained) {
        let (fp, log) = result?;
        let stem = format!("af_{}_w{}", job.strategy.name(), job.width);
        save_framing(&fp, dir.join(format!("{stem}.affr")))?;
        write(&dir.join(format!("{stem}_loss.csv")), loss_log(&log))?;
        let preds = attacked_predictions(&model, &fp, &val, job.strategy)?;
        let acc = preds.iter().zip(val.labels()).filter(|(p, l)| p == l).count() as f64 / val.len() as f64;
        report.push_attacked(FramingKind::Adversarial, job.width, job.strategy, acc)?;
        let (ih, iw) = (fp.interior_h(), fp.interior_w());
        for &b in &baselines {
            let base = baseline_framing(b, job.width, ih, iw, channels)?;
            let acc = eval_untargeted(&model, &base, &val, job.strategy)?;
            report.push_attacked(FramingKind::of(&base), job.width, job.strategy, acc)?;
        }
        report.push_modal(FramingKind::Adversarial, job.width, job.strategy, modal_class(&preds, model.num_classes())?)?;
        if job.strategy == Strategy::Vanilla {
            let budget = pixel_budget(job.width, val.height(), val.width())?;
            report.push_pixel_budget(job.width, job.strategy, budget.fraction())?;
        }
        println!("{} W={}: AF accuracy {acc:.4}", job.strategy, job.width);
    }
    report.metadata.insert("model_fingerprint".into(), format!("{:08x}", model.fingerprint()));
    render_report(&report, a.out.join("report.csv"))?;
    print!("{}", report.to_text_table());
    Ok(())
}

fn targeted_suite(a: TargetedSuiteArgs) -> Res {
    let (train, val) = load_data(&a.data)?;
    let model = load_model(&a.model, &train)?;
    let strategy: Strategy = a.strategy.parse()?;
    let classes = model.num_classes();
    if a.targets == 0 || a.targets > classes {
        return Err(CliError::Invalid(format!("--targets must be between 1 and {classes}")));
    }
    let mut pool: Vec<usize> = (0..classes).collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(a.opts.seed));
    let targets = &pool[..a.targets];
    let trained = par::map_range(targets.len(), |i| -> Res<(FramingParams, FramingLog)> {
        let t = targets[i];
        info!("targeted-suite: training target {t}");
        let cfg = framing_config(&a.opts, a.opts.seed.wrapping_add(t as u64))?;
        Ok(train_framing(&train, &model, a.width, Objective::Targeted(t), strategy, &cfg)?)
    });
    let dir = a.out.join("framings");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut framings = Vec::with_capacity(targets.len());
    for (&t, result) in targets.iter().zip(trained) {
        let (fp, log) = result?;
        save_framing(&fp, dir.join(format!("target_{t}.affr")))?;
        write(&dir.join(format!("target_{t}_loss.csv")), loss_log(&log))?;
        framings.push(fp);
    }
    let result = eval_targeted(&model, &framings, &val, strategy)?;
    let mut report = AttackReport::new();
    report.push_clean(eval_clean(&model, &val)?)?;
    report.push_targeted(a.width, strategy, &result)?;
    report.metadata.insert("model_fingerprint".into(), format!("{:08x}", model.fingerprint()));
    report.metadata.insert("targets".into(), format!("{targets:?}"));
    render_report(&report, a.out.join("report.csv"))?;
    print!("{}", report.to_text_table());
    Ok(())
}

/// Composes a single image or clip.
fn compose_one(x: &Tensor<f32>, fp: &FramingParams, strategy: Strategy) -> Res<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let out = compose_batch(&x.clone().reshape(shape)?, fp, strategy)?;
    let s = out.shape()[1..].to_vec();
    Ok(out.reshape(s)?)
}

/// First frame of a clip, or the image itself, as `3 x h x w`.
fn display_frame(x: &Tensor<f32>) -> Res<Tensor<f32>> {
    match x.rank() {
        3 => Ok(x.clone()),
        4 => {
            let s = x.shape();
            let (t, h, w) = (s[1], s[2], s[3]);
            let data = (0..3).flat_map(|c| x.data()[c * t * h * w..c * t * h * w + h * w].iter().copied()).collect();
            Ok(Tensor::new(vec![3, h, w], data)?)
        }
        _ => Err(CliError::Invalid(format!("cannot display shape {:?}", x.shape()))),
    }
}

/// All frames of a clip side by side, or the image itself.
fn filmstrip(x: &Tensor<f32>) -> Res<Tensor<f32>> {
    if x.rank() == 3 {
        return Ok(x.clone());
    }
    let s = x.shape();
    let (t, h, w) = (s[1], s[2], s[3]);
    let frames: Vec<Tensor<f32>> = (0..t)
        .map(|f| {
            let data = (0..3).flat_map(|c| x.data()[(c * t + f) * h * w..(c * t + f + 1) * h * w].iter().copied()).collect();
            Tensor::new(vec![3, h, w], data)
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    Ok(side_by_side(&refs, 1)?)
}

fn gradcam(a: GradcamArgs) -> Res {
    let val = load_val(&a.data)?;
    let model = load_model(&a.model, &val)?;
    if a.image_index >= val.len() {
        return Err(CliError::Invalid(format!("--image-index {} outside {} val examples", a.image_index, val.len())));
    }
    let example = val.get(a.image_index);
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(example.pixels.shape());
    let clean_class = model.predict(&example.pixels.clone().reshape(batch_shape)?)?[0];
    let clean_map = grad_cam(&model, &example.pixels, clean_class)?;
    let original = display_frame(&example.pixels)?;
    let clean_panel = overlay(&original, &clean_map, 0.5)?;
    let mut panels = vec![original.clone(), clean_panel];
    let mut report = AttackReport::new();
    if let Some(path) = &a.framing {
        let fp = load_framing(path)?;
        let framed = compose_one(&example.pixels, &fp, Strategy::Vanilla)?;
        let mut shape = vec![1];
        shape.extend_from_slice(framed.shape());
        let attacked_class = model.predict(&framed.clone().reshape(shape)?)?[0];
        let map = grad_cam(&model, &framed, attacked_class)?;
        panels.push(overlay(&display_frame(&framed)?, &map, 0.5)?);
        println!("example {}: clean class {clean_class}, framed class {attacked_class}", a.image_index);
        if a.sample > 0 {
            let samples = border_saliency(&model, &fp, &val, a.sample)?;
            let mut s = String::from("index,class,border_mean,interior_mean\n");
            for x in &samples {
                writeln!(s, "{},{},{:.6},{:.6}", x.index, x.class, x.border_mean, x.interior_mean).unwrap();
            }
            write(&a.out.join("saliency.csv"), s)?;
            let dominant = samples.iter().filter(|x| x.border_mean > x.interior_mean).count() as f64 / samples.len() as f64;
            report.push(advframe::evaluation::ReportRow {
                framing_kind: FramingKind::of(&fp),
                width: Some(fp.width()),
                strategy: Some(Strategy::Vanilla),
                metric: "border_saliency_dominance".into(),
                value: dominant,
            })?;
            println!("border saliency exceeds interior on {:.1}% of {} examples", 100.0 * dominant, samples.len());
        }
    }
    let refs: Vec<&Tensor<f32>> = panels.iter().collect();
    render_image(&side_by_side(&refs, 2)?, a.out.join("gradcam.ppm"))?;
    if !report.rows.is_empty() {
        render_report(&report, a.out.join("report.csv"))?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Res {
    let val = load_val(&a.data)?;
    let fp = load_framing(&a.framing)?;
    let strategy: Strategy = a.strategy.parse()?;
    for &i in &a.indices {
        if i >= val.len() {
            return Err(CliError::Invalid(format!("index {i} outside {} val examples", val.len())));
        }
        let x = val.get(i).pixels;
        let framed = compose_one(&x, &fp, strategy)?;
        render_image(&filmstrip(&x)?, out_path(&a.out, "original", i))?;
        render_image(&filmstrip(&framed)?, out_path(&a.out, "framed", i))?;
    }
    println!("rendered {} examples to {}", a.indices.len(), a.out.display());
    Ok(())
}

fn out_path(dir: &Path, stem: &str, i: usize) -> PathBuf {
    dir.join(format!("{stem}_{i:04}.ppm"))
}
