//! Command implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cosemdepth::data::{
    generate_synthetic_scene, load_manifest, load_sample, load_split, make_sequences, manifest_path, write_labels,
    write_pfm, write_rgb, FrameSequenceSample, Scene, Split, TARGET_CLASSES,
};
use cosemdepth::metrics::{count_parameters, runtime_benchmark, EvaluationReport, RuntimeReport};
use cosemdepth::model::{config_hash, Checkpoint, CoSemDepth, ModelKind, SequenceInput};
use cosemdepth::training::{evaluate, validate_and_select, CheckpointMeta, TrainConfig, Trainer};
use walkdir::WalkDir;

use crate::config::RunConfig;
use crate::visualize::{colorize_depth, colorize_labels, overlay};
use crate::{BenchArgs, CliError, EvalArgs, PredictArgs, Result, SynthArgs, TrainArgs};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Lists every file under `dir` (relative path and size, sorted) in
/// `dir/manifest.txt`.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut text = String::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        let size = entry.metadata().map_err(|e| CliError::Data(e.to_string()))?.len();
        let _ = writeln!(text, "{}\t{size}", rel.display());
    }
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn is_non_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).is_ok_and(|mut it| it.next().is_some())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let mut scene = cfg.data.synthetic.clone();
    if let Some(s) = a.seed {
        scene.texture_seed = s;
    }
    if let Some(f) = a.frames {
        scene.frames_per_trajectory = f;
    }
    scene.validate()?;
    let out = a.out.unwrap_or(cfg.data.root);
    if is_non_empty_dir(&out) && !a.force {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let summary = generate_synthetic_scene(&scene, &out)?;
    println!("train: {} frames", summary.train);
    println!("val: {} frames", summary.val);
    println!("test: {} frames", summary.test);
    write_manifest(&out)
}

/// Loads a split, or nothing if its manifest does not exist.
fn load_optional_split(cfg: &RunConfig, root: &Path, split: Split, window: usize) -> Result<Vec<FrameSequenceSample>> {
    if !manifest_path(root, split).exists() {
        return Ok(Vec::new());
    }
    Ok(load_split(root, split, window, cfg.class_mapping()?.as_ref())?)
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).unwrap_or(path).to_path_buf()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let log_path = out.join("train.log");
    if a.resume.is_none() && log_path.exists() && !a.force {
        return Err(CliError::Usage(format!(
            "{} already holds a training run; pass --resume or --force",
            out.display()
        )));
    }
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, cfg.train_config())?,
        None => Trainer::new(cfg.train_config())?,
    };
    fs::create_dir_all(&out)?;
    if a.resume.is_none() {
        let _ = fs::remove_file(&log_path);
    }
    fs::write(out.join("run_config.toml"), cfg.to_toml())?;
    let ckpt_dir = out.join("checkpoints");
    let mut trainer = trainer.with_log_file(&log_path).with_checkpoint_dir(&ckpt_dir);

    let window = trainer.cfg.window;
    let train_set = load_split(&cfg.data.root, Split::Train, window, cfg.class_mapping()?.as_ref())?;
    let val_set = load_optional_split(&cfg, &cfg.data.root, Split::Val, window)?;
    let metas = trainer.train(&train_set, &val_set)?;

    // earlier checkpoints of a resumed run stay candidates
    let index_path = out.join("checkpoints.json");
    let mut all: Vec<CheckpointMeta> = match (&a.resume, fs::read_to_string(&index_path)) {
        (Some(_), Ok(text)) => serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))?,
        _ => Vec::new(),
    };
    for m in &mut all {
        m.path = m.path.as_ref().map(|p| out.join(p));
    }
    all.retain(|m| metas.iter().all(|n| n.step != m.step));
    all.extend(metas);
    all.sort_by_key(|m| m.step);

    let best = if val_set.is_empty() {
        all.last().expect("training writes a checkpoint").clone()
    } else {
        validate_and_select(&all, &val_set, &trainer.cfg.loss)?
    };
    let stored: Vec<CheckpointMeta> = all
        .iter()
        .map(|m| CheckpointMeta {
            path: m.path.as_ref().map(|p| relative_to(p, &out)),
            ..m.clone()
        })
        .collect();
    let json = serde_json::to_string_pretty(&stored).expect("metadata serializes");
    fs::write(&index_path, json + "\n")?;

    let best_path = best.path.as_ref().map(|p| relative_to(p, &out));
    let mut marker = String::new();
    let _ = writeln!(
        marker,
        "checkpoint = {}",
        best_path.as_ref().map_or("-".into(), |p| p.display().to_string())
    );
    let _ = writeln!(marker, "epoch = {}", best.epoch);
    let _ = writeln!(marker, "step = {}", best.step);
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
    let _ = writeln!(marker, "val_loss = {}", opt(best.val_loss));
    let _ = writeln!(marker, "val_miou = {}", opt(best.val_miou));
    let _ = writeln!(marker, "val_abs_rel = {}", opt(best.val_abs_rel));
    fs::write(out.join("best.txt"), &marker)?;
    println!(
        "trained to step {} ({} epochs); best checkpoint {}",
        trainer.step,
        trainer.epoch,
        best_path.map_or("-".into(), |p| p.display().to_string())
    );
    write_manifest(&out)
}

fn load_model(path: &Path) -> Result<(Checkpoint, CoSemDepth)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model()?;
    Ok((ck, model))
}

/// Training config stored in a checkpoint written by the trainer.
fn stored_train_config(ck: &Checkpoint) -> Option<TrainConfig> {
    ck.metadata
        .get("train_config")
        .and_then(|s| serde_json::from_str(s).ok())
}

fn check_architecture(cfg: &RunConfig, given: bool, model: &CoSemDepth) -> Result<()> {
    if given && config_hash(&cfg.architecture) != config_hash(&model.config) {
        return Err(CliError::Config(
            "the config's [architecture] does not match the checkpoint".into(),
        ));
    }
    Ok(())
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub architecture: String,
    pub output: String,
    pub params: usize,
    pub ms_per_frame: Option<f64>,
}

impl TableRow {
    pub fn for_model(model: &CoSemDepth, ms_per_frame: Option<f64>) -> Self {
        let output = match model.kind {
            ModelKind::Joint => "Depth + Semantic",
            ModelKind::DepthOnly => "Depth",
            ModelKind::SemanticOnly => "Semantic",
        };
        Self {
            architecture: format!("{} (M={})", model.kind.as_str(), model.config.num_levels),
            output: output.into(),
            params: count_parameters(model),
            ms_per_frame,
        }
    }
}

pub const TABLE_COLUMNS: [&str; 10] = [
    "Architecture",
    "Output",
    "Params(M)",
    "Inf. Time (ms/f)",
    "mIoU",
    "RMSE",
    "AbsRelErr",
    "δ<1.25",
    "δ<1.25²",
    "δ<1.25³",
];

fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    s.push_str(&line(rule.iter().map(String::as_str).collect()));
    for r in rows {
        s.push_str(&line(r.iter().map(|x| x.as_str()).collect()));
    }
    s
}

/// Summary table followed by per-class IoU. Ratios are in percent.
pub fn format_table(report: &EvaluationReport, row: &TableRow) -> String {
    let dash = || "-".to_string();
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let seg = report.segmentation.as_ref();
    let d = report.depth.as_ref();
    let cells = vec![
        row.architecture.clone(),
        row.output.clone(),
        format!("{:.3}", row.params as f64 / 1e6),
        row.ms_per_frame.map_or_else(dash, |t| format!("{t:.1}")),
        seg.map_or_else(dash, |s| pct(s.miou)),
        d.map_or_else(dash, |d| format!("{:.3}", d.rmse)),
        d.map_or_else(dash, |d| format!("{:.3}", d.abs_rel)),
        d.map_or_else(dash, |d| pct(d.delta1)),
        d.map_or_else(dash, |d| pct(d.delta2)),
        d.map_or_else(dash, |d| pct(d.delta3)),
    ];
    let mut s = markdown_table(&TABLE_COLUMNS, &[cells]);
    if let Some(seg) = seg {
        let rows: Vec<Vec<String>> = seg
            .per_class_iou
            .iter()
            .enumerate()
            .map(|(c, iou)| {
                let name = TARGET_CLASSES.get(c).map_or_else(|| format!("class {c}"), |n| n.to_string());
                vec![name, iou.map_or_else(dash, pct)]
            })
            .collect();
        s.push('\n');
        s.push_str(&markdown_table(&["Class", "IoU"], &rows));
    }
    s
}

/// Writes `metrics.txt`, `metrics.json`, `table.txt` and, if timed,
/// `runtime.txt` into `out`, then the file manifest.
pub fn write_evaluation(
    out: &Path,
    report: &EvaluationReport,
    row: &TableRow,
    runtime: Option<&RuntimeReport>,
) -> Result<String> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.txt"), report.to_key_value())?;
    fs::write(out.join("metrics.json"), report.to_json() + "\n")?;
    let table = format_table(report, row);
    fs::write(out.join("table.txt"), &table)?;
    if let Some(r) = runtime {
        fs::write(out.join("runtime.txt"), r.to_key_value())?;
    }
    write_manifest(out)?;
    Ok(table)
}

fn time_inference(model: &CoSemDepth, input: &SequenceInput, iterations: usize, warmup: usize) -> Result<RuntimeReport> {
    model.forward_joint(input)?;
    Ok(runtime_benchmark(
        || {
            let _ = model.forward_joint(input);
        },
        iterations,
        warmup,
    )?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let (ck, model) = load_model(&a.checkpoint)?;
    check_architecture(&cfg, a.config.is_some(), &model)?;
    let window = stored_train_config(&ck).map_or(cfg.data.window, |t| t.window);
    let root = a.data.clone().unwrap_or_else(|| cfg.data.root.clone());
    let samples = load_split(&root, a.split, window, cfg.class_mapping()?.as_ref())?;
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "split {} has no windows of {window} frames",
            a.split.as_str()
        )));
    }
    let report = evaluate(&model, &samples, cfg.output.depth_cap)?;
    let runtime = if a.iterations > 0 {
        Some(time_inference(&model, &samples[0].to_input(), a.iterations, a.warmup)?)
    } else {
        None
    };
    let row = TableRow::for_model(&model, runtime.as_ref().map(|r| r.mean_ms));
    let table = write_evaluation(&a.out, &report, &row, runtime.as_ref())?;
    print!("{table}");
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let (ck, model) = load_model(&a.checkpoint)?;
    check_architecture(&cfg, a.config.is_some(), &model)?;
    let window = a
        .window
        .or_else(|| stored_train_config(&ck).map(|t| t.window))
        .unwrap_or(cfg.data.window);
    let records = load_manifest(&a.sequence, a.split)?;
    let windows = make_sequences(&records, window)?;
    if windows.is_empty() {
        return Err(CliError::Data(format!(
            "no trajectory in {} has {window} frames",
            manifest_path(&a.sequence, a.split).display()
        )));
    }
    fs::create_dir_all(&a.out)?;
    let mapping = cfg.class_mapping()?;
    for w in &windows {
        let sample = load_sample(&records, w, mapping.as_ref())?;
        let target = &records[*w.records.last().expect("non-empty window")];
        let stem = format!("{}_{:06}", target.trajectory, target.frame_index);
        let pred = model.forward_joint(&sample.to_input())?;
        if let Some(d) = &pred.depth {
            write_pfm(&a.out.join(format!("{stem}_depth.pfm")), d)?;
            write_rgb(
                &a.out.join(format!("{stem}_depth_color.png")),
                &colorize_depth(d, cfg.output.depth_cap),
            )?;
        }
        if let Some(l) = &pred.labels {
            write_labels(&a.out.join(format!("{stem}_labels.png")), l)?;
            write_rgb(&a.out.join(format!("{stem}_semantic.png")), &colorize_labels(l))?;
            write_rgb(
                &a.out.join(format!("{stem}_overlay.png")),
                &overlay(&sample.target().image, l, 0.5),
            )?;
        }
    }
    println!("{} predictions written to {}", windows.len(), a.out.display());
    write_manifest(&a.out)
}

/// A rendered window of `n` frames from the configured synthetic scene.
pub fn synthetic_input(cfg: &RunConfig, n: usize) -> SequenceInput {
    let scene_cfg = &cfg.data.synthetic;
    let scene = Scene::random(scene_cfg, 0);
    let k = scene_cfg.intrinsics();
    let poses: Vec<_> = (0..n).map(|i| scene_cfg.pose(0, i)).collect();
    SequenceInput {
        frames: poses.iter().map(|p| scene.render(p, &k).0).collect(),
        motions: poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect(),
        intrinsics: k,
        semantic_prior: None,
    }
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let (ck, model) = load_model(&a.checkpoint)?;
    let window = stored_train_config(&ck).map_or(cfg.data.window, |t| t.window);
    let input = synthetic_input(&cfg, window);
    let report = time_inference(&model, &input, a.iterations, a.warmup)?;
    fs::create_dir_all(&a.out)?;
    let text = report.to_key_value();
    fs::write(a.out.join("runtime.txt"), &text)?;
    print!("{text}");
    write_manifest(&a.out)
}
