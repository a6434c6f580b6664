use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clickvos_core::annotate::{annotate_first_frame, load_points, save_points, PointSet};
use clickvos_core::baseline::{run_baseline, DEFAULT_TAU};
use clickvos_core::eval::{evaluate, load_mask_root, FrameSelection};
use clickvos_core::io::{frame_name, list_sequences, read_sample, write_mask_sequence, write_ppm, write_sample};
use clickvos_core::model::{infer_video, AbsModel, InferOptions, MemoryFlags, Modality, ModelConfig, ObjMemMode};
use clickvos_core::selfheal::{curated_suite, run_selfheal, DEFAULT_CORRUPTION};
use clickvos_core::synth::{SceneSampler, VideoSample};
use clickvos_core::train::{train_with, TrainConfig, TrainLog};
use clickvos_core::video::{Image, LabelMap};
use clickvos_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "clickvos", version, about = "Click-prompted video object segmentation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic sequences.
    GenData(GenData),
    /// Write first-frame clicks (points.json) for every sequence.
    Annotate(Annotate),
    /// Train a model and write its checkpoint and metrics log.
    Train(Train),
    /// Segment sequences with a trained model.
    Infer(Infer),
    /// Segment sequences with the point-tracking baseline.
    Baseline(Baseline),
    /// Score predicted masks against ground truth.
    Eval(Eval),
    /// Render masks and clicks over the frames.
    Overlay(Overlay),
    /// Run the corrupted-first-frame suite and print the J trajectory.
    SelfhealSuite(SelfhealSuite),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    num: usize,
    /// Frame size as `H,W`.
    #[arg(long, default_value = "64,64", value_parser = parse_hw)]
    hw: (usize, usize),
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Every k-th sequence forces an occlusion (0 disables).
    #[arg(long, default_value_t = 4)]
    occlusion_every: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct Annotate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Flat JSON file with model and training fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Held-out sequences for periodic validation.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    t_train: Option<usize>,
    /// Leading steps trained on two-frame windows.
    #[arg(long)]
    short_window_steps: Option<usize>,
    /// Replace the final weights by a running average with this decay.
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    objmem: Option<ObjMemArg>,
    #[arg(long)]
    densemem: Option<Toggle>,
    #[arg(long)]
    modality: Option<ModalityArg>,
    /// Use the original recipe's learning rate.
    #[arg(long)]
    large_scale_preset: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ObjMemArg {
    FirstOnly,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModalityArg {
    AppearanceOnly,
    ConcatFuse,
    BimodalEnhance,
}

impl From<ObjMemArg> for ObjMemMode {
    fn from(a: ObjMemArg) -> Self {
        match a {
            ObjMemArg::FirstOnly => ObjMemMode::FirstOnly,
            ObjMemArg::All => ObjMemMode::All,
        }
    }
}

impl From<ModalityArg> for Modality {
    fn from(a: ModalityArg) -> Self {
        match a {
            ModalityArg::AppearanceOnly => Modality::AppearanceOnly,
            ModalityArg::ConcatFuse => Modality::ConcatFuse,
            ModalityArg::BimodalEnhance => Modality::BimodalEnhance,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PointsArg {
    /// Generate clicks from the first ground-truth mask with the sequence seed.
    Auto,
    /// Read `points.json` from each sequence directory.
    File,
}

#[derive(Debug, Args)]
struct Infer {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    points: PointsArg,
    #[arg(long, value_enum, default_value = "all")]
    objmem: ObjMemArg,
    #[arg(long, value_enum, default_value = "on")]
    densemem: Toggle,
    /// Must match the checkpoint's modality when given.
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct Baseline {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    points: PointsArg,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, conflicts_with = "exclude_first")]
    first_frame_only: bool,
    #[arg(long)]
    exclude_first: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Overlay {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    points: PointsArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelfhealSuite {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    objmem: ObjMemArg,
    #[arg(long, value_enum, default_value = "on")]
    densemem: Toggle,
    #[arg(long, default_value_t = DEFAULT_CORRUPTION)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(',').ok_or_else(|| format!("expected H,W, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Annotate(a) => annotate(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Baseline(a) => baseline(a),
        Command::Eval(a) => eval(a),
        Command::Overlay(a) => overlay(a),
        Command::SelfhealSuite(a) => selfheal(a),
    }
}

/// Applies `f` to every item on up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().expect("slot lock") = Some(f(&items[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

fn seq_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let dirs = list_sequences(root)?;
    if dirs.is_empty() {
        return Err(Error::MissingData(vec![format!("{}: no sequences found", root.display())]));
    }
    Ok(dirs)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenData) -> Result<()> {
    let indices: Vec<usize> = (0..a.num).collect();
    create_dir(&a.out)?;
    par_map(&indices, a.jobs, |&i| {
        let sampler = SceneSampler {
            height: a.hw.0,
            width: a.hw.1,
            frames: a.frames,
            objects: a.objects,
            max_objects: a.objects.max(SceneSampler::default().max_objects),
            occlusion: a.occlusion_every > 0 && a.objects >= 2 && i % a.occlusion_every == 0,
            ..SceneSampler::default()
        };
        let (_, sample) = sampler.sample(a.seed.wrapping_add(i as u64))?;
        write_sample(&sample, &a.out.join(format!("seq_{i:04}")))
    })?;
    println!("wrote {} sequences to {}", a.num, a.out.display());
    Ok(())
}

fn annotate(a: Annotate) -> Result<()> {
    let dirs = sequences(&a.data)?;
    for d in &dirs {
        let s = read_sample(d)?;
        let points = annotate_first_frame(&s.masks[0], a.seed.wrapping_add(s.seed))?;
        save_points(&d.join("points.json"), &points)?;
    }
    println!("annotated {} sequences", dirs.len());
    Ok(())
}

fn points_for(dir: &Path, sample: &VideoSample, mode: PointsArg) -> Result<PointSet> {
    match mode {
        PointsArg::Auto => annotate_first_frame(&sample.masks[0], sample.seed),
        PointsArg::File => load_points(&dir.join("points.json"), sample.height, sample.width, Some(&sample.masks[0])),
    }
}

fn load_set(root: &Path) -> Result<Vec<VideoSample>> {
    sequences(root)?.iter().map(|d| read_sample(d)).collect()
}

/// Splits a flat JSON object into model and training configurations.
fn read_flat_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::format(path, "expected a JSON object"))?;
    let keys_of = |v: serde_json::Value| -> BTreeSet<String> { v.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default() };
    let mut known = keys_of(serde_json::to_value(ModelConfig::default()).expect("serialisable"));
    known.extend(keys_of(serde_json::to_value(TrainConfig::default()).expect("serialisable")));
    if let Some(k) = obj.keys().find(|k| !known.contains(*k)) {
        return Err(Error::Config(format!("{}: unknown field {k:?}", path.display())));
    }
    let model = serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let train = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((model, train))
}

fn train_cmd(a: Train) -> Result<()> {
    let (mut model_cfg, mut cfg) = match &a.config {
        Some(p) => read_flat_config(p)?,
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    if a.large_scale_preset {
        cfg.lr = TrainConfig::large_scale_preset().lr;
    }
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v.into();
            }
        };
    }
    set!(cfg.steps, a.steps);
    set!(cfg.lr, a.lr);
    set!(cfg.seed, a.seed);
    set!(cfg.batch_size, a.batch_size);
    set!(cfg.t_train, a.t_train);
    set!(cfg.short_window_steps, a.short_window_steps);
    set!(cfg.ema_decay, a.ema_decay);
    set!(cfg.eval_every, a.eval_every);
    set!(cfg.memory.objmem, a.objmem);
    if let Some(t) = a.densemem {
        cfg.memory.dense = matches!(t, Toggle::On);
    }
    set!(model_cfg.channels, a.channels);
    set!(model_cfg.stride, a.stride);
    set!(model_cfg.modality, a.modality);

    let train_set = load_set(&a.data)?;
    let val_set = match &a.val {
        Some(v) => load_set(v)?,
        None => Vec::new(),
    };
    let mut model = AbsModel::new(model_cfg)?;
    let mut log = TrainLog::default();
    let result = train_with(&mut model, &train_set, &val_set, &cfg, &mut log, |row, _| {
        if let (Some(j), Some(f)) = (row.val_j, row.val_f) {
            eprintln!("step {} loss {:.4} val J {j:.4} F {f:.4}", row.step, row.total);
        }
    });
    model.save(&a.out)?;
    let mut csv = a.out.as_os_str().to_owned();
    csv.push(".metrics.csv");
    log.write_csv(Path::new(&csv))?;
    result?;
    println!(
        "trained {} steps in {:.1}s; checkpoint {}",
        log.rows.len(),
        log.seconds,
        a.out.display()
    );
    Ok(())
}

fn infer(a: Infer) -> Result<()> {
    let model = AbsModel::load(&a.ckpt)?;
    if let Some(m) = a.modality {
        let m = Modality::from(m);
        if m != model.config.modality {
            return Err(Error::Config(format!(
                "checkpoint was trained with modality {:?}, not {m:?}",
                model.config.modality
            )));
        }
    }
    let opts = InferOptions {
        flags: MemoryFlags {
            objmem: a.objmem.into(),
            dense: matches!(a.densemem, Toggle::On),
        },
        first_mask_override: None,
    };
    let dirs = sequences(&a.data)?;
    par_map(&dirs, a.jobs, |d| {
        let sample = read_sample(d)?;
        let points = points_for(d, &sample, a.points)?;
        let out = infer_video(&model, &sample, &points, &opts)?;
        for w in &out.warnings {
            eprintln!("warning: {}: {w}", seq_name(d));
        }
        let dst = a.out.join(seq_name(d));
        create_dir(&dst)?;
        write_mask_sequence(&dst, &out.masks)
    })?;
    println!("wrote predictions for {} sequences to {}", dirs.len(), a.out.display());
    Ok(())
}

fn baseline(a: Baseline) -> Result<()> {
    let dirs = sequences(&a.data)?;
    par_map(&dirs, a.jobs, |d| {
        let sample = read_sample(d)?;
        let points = points_for(d, &sample, a.points)?;
        let run = run_baseline(&sample, &points, a.tau)?;
        let dst = a.out.join(seq_name(d));
        create_dir(&dst)?;
        write_mask_sequence(&dst, &run.masks)
    })?;
    println!("wrote baseline masks for {} sequences to {}", dirs.len(), a.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let selection = if a.first_frame_only {
        FrameSelection::FirstOnly
    } else if a.exclude_first {
        FrameSelection::ExcludeFirst
    } else {
        FrameSelection::All
    };
    let pred = load_mask_root(&a.pred)?;
    let gt = load_mask_root(&a.gt)?;
    let report = evaluate(&pred, &gt, selection)?;
    std::fs::write(&a.out, report.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    println!("J {:.4}  F {:.4}  J&F {:.4}", report.j, report.f, report.jf());
    Ok(())
}

const PALETTE: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.8, 0.2, 0.8],
    [0.1, 0.85, 0.85],
    [1.0, 0.5, 0.0],
];

fn render(frame: &Image, mask: &LabelMap, points: Option<&PointSet>) -> Image {
    let mut img = frame.clone();
    for y in 0..frame.height {
        for x in 0..frame.width {
            let l = mask.get(x, y) as usize;
            if l > 0 {
                let c = PALETTE[1 + (l - 1) % (PALETTE.len() - 1)];
                let p = frame.pixel(x, y);
                img.set_pixel(x, y, [0.5 * p[0] + 0.5 * c[0], 0.5 * p[1] + 0.5 * c[1], 0.5 * p[2] + 0.5 * c[2]]);
            }
        }
    }
    for c in points.map(|p| p.clicks()).unwrap_or_default() {
        let colour = if c.id == 0 { [1.0, 1.0, 1.0] } else { PALETTE[1 + (c.id as usize - 1) % (PALETTE.len() - 1)] };
        for d in -2isize..=2 {
            for (dx, dy) in [(d, 0), (0, d)] {
                let (x, y) = (c.x as isize + dx, c.y as isize + dy);
                if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
                    img.set_pixel(x as usize, y as usize, if d == 0 { [0.0, 0.0, 0.0] } else { colour });
                }
            }
        }
    }
    img
}

fn overlay(a: Overlay) -> Result<()> {
    let dirs = sequences(&a.data)?;
    let masks = load_mask_root(&a.masks)?;
    for d in &dirs {
        let name = seq_name(d);
        let sample = read_sample(d)?;
        let (_, seq) = masks
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::MissingData(vec![format!("{name}: no masks")]))?;
        if seq.len() != sample.num_frames() {
            return Err(Error::MissingData(vec![format!(
                "{name}: {} masks for {} frames",
                seq.len(),
                sample.num_frames()
            )]));
        }
        let points = points_for(d, &sample, a.points)?;
        let dst = a.out.join(&name);
        create_dir(&dst)?;
        for t in 0..sample.num_frames() {
            let img = render(&sample.frames[t], &seq[t], (t == 0).then_some(&points));
            write_ppm(&dst.join(frame_name(t + 1, "ppm")), &img)?;
        }
    }
    println!("rendered {} sequences to {}", dirs.len(), a.out.display());
    Ok(())
}

fn selfheal(a: SelfhealSuite) -> Result<()> {
    let model = AbsModel::load(&a.ckpt)?;
    let suite = curated_suite()?;
    let flags = MemoryFlags {
        objmem: a.objmem.into(),
        dense: matches!(a.densemem, Toggle::On),
    };
    let report = run_selfheal(&model, &suite, flags, a.fraction, a.seed)?;
    println!("frame,median_J");
    for (t, j) in report.median_j.iter().enumerate() {
        println!("{},{j:.4}", t + 1);
    }
    Ok(())
}
