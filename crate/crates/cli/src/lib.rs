//! File-based pipeline commands: phantom generation, optical flow dumps,
//! training, evaluation and the single-frame corruption test.
//!
//! Every command writes its fully resolved configuration as `config.json`
//! into its output directory, so a run can be repeated from that file alone.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ofnet_core::flow::{estimate_flow, write_flo_txt, FlowParams};
use ofnet_core::image::{write_pgm, BLOOD_POOL, MYOCARDIUM};
use ofnet_core::metrics::{dice, evaluate_sequence, MetricsReport};
use ofnet_core::model::{build_network, train_with_progress, Model, TrainHistory, Variant};
use ofnet_core::phantom::{corrupt_frame, generate_phantom, load_sequence, save_sequence, CineSequence, Corruption, MANIFEST};
use ofnet_core::{Error, Result};
use serde::Serialize;

use config::{write_json, CorruptConfig, GenerateConfig, ModelConfig, RESOLVED_CONFIG};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
pub const DATASET_MANIFEST: &str = "manifest.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

/// Sequence name as used for output sub-directories.
fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into())
}

/// Loads either a single sequence directory or every sequence directory
/// directly below `dir`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, CineSequence)>> {
    if dir.join(MANIFEST).is_file() {
        return Ok(vec![(dir_name(dir), load_sequence(dir)?)]);
    }
    let entries = fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} holds no sequence ({MANIFEST} not found)",
            dir.display()
        )));
    }
    dirs.iter().map(|d| Ok((dir_name(d), load_sequence(d)?))).collect()
}

#[derive(Serialize)]
struct DatasetEntry {
    name: String,
    preset: String,
    seed: u64,
}

#[derive(Serialize)]
struct DatasetManifest {
    sequences: Vec<DatasetEntry>,
}

/// Writes `cfg.count` phantom sequences into `out/seq_NNN` plus a manifest
/// listing each sequence's preset and seed. Returns the sequence directories.
pub fn cmd_generate(cfg: &GenerateConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    create_dir(out)?;
    let mut dirs = Vec::with_capacity(cfg.count);
    let mut entries = Vec::with_capacity(cfg.count);
    for s in 0..cfg.count {
        let phantom = cfg.phantom(s);
        let name = format!("seq_{s:03}");
        let dir = out.join(&name);
        save_sequence(&generate_phantom(&phantom)?, &dir)?;
        entries.push(DatasetEntry {
            name,
            preset: phantom.preset.name().to_string(),
            seed: phantom.seed,
        });
        dirs.push(dir);
    }
    write_json(&out.join(DATASET_MANIFEST), &DatasetManifest { sequences: entries })?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    Ok(dirs)
}

/// Mean flow of one adjacent frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFlow {
    pub from: usize,
    pub to: usize,
    pub mean_u: f64,
    pub mean_v: f64,
    pub mean_magnitude: f64,
}

/// Estimates the flow from every frame to the next one (on per-frame
/// normalized intensities) and writes `flow_TTT_UUU.txt` files plus
/// `summary.csv`.
pub fn cmd_flow(seq_dir: &Path, params: &FlowParams, out: &Path) -> Result<Vec<PairFlow>> {
    params.validate()?;
    let seq = load_sequence(seq_dir)?;
    create_dir(out)?;
    let mut csv = String::from("from,to,mean_u,mean_v,mean_magnitude\n");
    let mut pairs = Vec::new();
    for t in 0..seq.n_frames().saturating_sub(1) {
        let flow = estimate_flow(&seq.frames[t].normalized(), &seq.frames[t + 1].normalized(), params)?
            .with_frames(t, t + 1);
        write_flo_txt(&out.join(format!("flow_{t:03}_{:03}.txt", t + 1)), &flow)?;
        let (mean_u, mean_v) = flow.mean();
        let pair = PairFlow {
            from: t,
            to: t + 1,
            mean_u,
            mean_v,
            mean_magnitude: flow.mean_magnitude(),
        };
        writeln!(csv, "{},{},{},{},{}", pair.from, pair.to, mean_u, mean_v, pair.mean_magnitude).unwrap();
        pairs.push(pair);
    }
    write_text(&out.join("summary.csv"), &csv)?;
    write_json(&out.join(RESOLVED_CONFIG), params)?;
    Ok(pairs)
}

/// Trains a freshly initialized network (weights seeded by `cfg.train.seed`)
/// on every sequence under `data`, then writes the checkpoint, loss history
/// and resolved configuration. Per-epoch progress goes to stderr.
pub fn cmd_train(cfg: &ModelConfig, data: &Path, out: &Path) -> Result<TrainHistory> {
    cfg.validate()?;
    let dataset: Vec<CineSequence> = load_dataset(data)?.into_iter().map(|(_, s)| s).collect();
    create_dir(out)?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let mut model = build_network(&cfg.network, cfg.variant, cfg.train.seed)?;
    let history = train_with_progress(&mut model, &dataset, &cfg.train, |r| {
        eprintln!("[{}] epoch {:>3}  loss {:.6}  lr {:.3e}", cfg.variant.name(), r.epoch, r.mean_loss, r.lr);
    })?;
    model.save(&out.join(CHECKPOINT_FILE))?;
    history.write_csv(&out.join(LOSS_CSV))?;
    Ok(history)
}

/// Configuration stored next to a checkpoint by [`cmd_train`].
pub fn sidecar_config(checkpoint: &Path) -> Result<ModelConfig> {
    let path = checkpoint.with_file_name(RESOLVED_CONFIG);
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "no {RESOLVED_CONFIG} next to {}; pass --config",
            checkpoint.display()
        )));
    }
    config::read_config(Some(&path))
}

fn load_model(checkpoint: &Path, cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    Model::load(checkpoint, &cfg.network, cfg.variant)
}

fn area_csv(report: &MetricsReport) -> String {
    let mut s = String::from("frame,area_bp,gt_area_bp\n");
    for (t, (a, g)) in report.area_curve_bp.iter().zip(&report.gt_area_curve_bp).enumerate() {
        writeln!(s, "{t},{a},{g}").unwrap();
    }
    s
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    checkpoint: &'a Path,
    model: &'a ModelConfig,
}

/// Segments every sequence under `data` and writes, per sequence, the frame
/// metrics (`report.csv`), summary (`summary.json`), area curves (`area.csv`)
/// and predicted masks (`pred_TTT.pgm`), plus a cross-sequence `summary.csv`.
pub fn cmd_eval(checkpoint: &Path, cfg: &ModelConfig, data: &Path, out: &Path) -> Result<Vec<(String, MetricsReport)>> {
    let model = load_model(checkpoint, cfg)?;
    let dataset = load_dataset(data)?;
    create_dir(out)?;
    write_json(&out.join(RESOLVED_CONFIG), &EvalEcho { checkpoint, model: cfg })?;
    let mut summary = String::from("sequence,preset,dice_myo,dice_bp,apd_endo,apd_epi,smoothness_bp,gt_smoothness_bp\n");
    let mut reports = Vec::with_capacity(dataset.len());
    for (name, seq) in dataset {
        let preds = model.predict(&seq.frames, cfg.window(), cfg.flow())?;
        let preset = seq.config.as_ref().map(|c| c.preset);
        let report = evaluate_sequence(&preds, &seq.labels, seq.pixel_spacing, preset)?;
        let dir = out.join(&name);
        create_dir(&dir)?;
        report.write_csv(&dir.join("report.csv"))?;
        report.write_summary_json(&dir.join("summary.json"))?;
        write_text(&dir.join("area.csv"), &area_csv(&report))?;
        for (t, p) in preds.iter().enumerate() {
            let (h, w) = p.dims();
            write_pgm(&dir.join(format!("pred_{t:03}.pgm")), h, w, p.data())?;
        }
        let s = report.summary();
        writeln!(
            summary,
            "{name},{},{},{},{},{},{},{}",
            preset.map_or("", |p| p.name()),
            s.dice_myo.mean,
            s.dice_bp.mean,
            s.apd_endo.mean,
            s.apd_epi.mean,
            s.smoothness_bp,
            s.gt_smoothness_bp
        )
        .unwrap();
        reports.push((name, report));
    }
    write_text(&out.join("summary.csv"), &summary)?;
    Ok(reports)
}

/// One model loaded for comparison: its checkpoint and configuration.
pub struct ModelSpec<'a> {
    pub checkpoint: &'a Path,
    pub config: &'a ModelConfig,
}

/// Per-frame scores of both models on the corrupted sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRow {
    pub frame: usize,
    pub corrupted: bool,
    pub dice_myo_ofnet: f64,
    pub dice_myo_unet: f64,
    pub dice_bp_ofnet: f64,
    pub dice_bp_unet: f64,
}

#[derive(Serialize)]
struct CorruptEcho<'a> {
    sequence: &'a Path,
    frame: usize,
    mode: Corruption,
    ofnet_checkpoint: &'a Path,
    ofnet: &'a ModelConfig,
    unet_checkpoint: &'a Path,
    unet: &'a ModelConfig,
}

/// Corrupts one frame of the sequence in `seq_dir`, segments the result with
/// both models and writes `comparison.csv` with one row per frame.
pub fn cmd_corrupt_test(
    ofnet: ModelSpec,
    unet: ModelSpec,
    seq_dir: &Path,
    cfg: &CorruptConfig,
    out: &Path,
) -> Result<Vec<CorruptionRow>> {
    let seq = load_sequence(seq_dir)?;
    let frame = cfg.frame.unwrap_or(seq.n_frames() / 2);
    let bad = corrupt_frame(&seq, frame, cfg.mode)?;
    let models = [load_model(ofnet.checkpoint, ofnet.config)?, load_model(unet.checkpoint, unet.config)?];
    if models[0].variant() == Variant::Unet {
        eprintln!("warning: the first model of corrupt-test is a per-frame network");
    }
    create_dir(out)?;
    write_json(
        &out.join(RESOLVED_CONFIG),
        &CorruptEcho {
            sequence: seq_dir,
            frame,
            mode: cfg.mode,
            ofnet_checkpoint: ofnet.checkpoint,
            ofnet: ofnet.config,
            unet_checkpoint: unet.checkpoint,
            unet: unet.config,
        },
    )?;
    let of_pred = models[0].predict(&bad.frames, ofnet.config.window(), ofnet.config.flow())?;
    let un_pred = models[1].predict(&bad.frames, unet.config.window(), unet.config.flow())?;
    let mut rows = Vec::with_capacity(seq.n_frames());
    let mut csv = String::from("frame,corrupted,dice_myo_ofnet,dice_myo_unet,dice_bp_ofnet,dice_bp_unet\n");
    for t in 0..seq.n_frames() {
        let gt = &bad.labels[t];
        let row = CorruptionRow {
            frame: t,
            corrupted: t == frame,
            dice_myo_ofnet: dice(&of_pred[t], gt, MYOCARDIUM)?,
            dice_myo_unet: dice(&un_pred[t], gt, MYOCARDIUM)?,
            dice_bp_ofnet: dice(&of_pred[t], gt, BLOOD_POOL)?,
            dice_bp_unet: dice(&un_pred[t], gt, BLOOD_POOL)?,
        };
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            t,
            u8::from(row.corrupted),
            row.dice_myo_ofnet,
            row.dice_myo_unet,
            row.dice_bp_ofnet,
            row.dice_bp_unet
        )
        .unwrap();
        rows.push(row);
    }
    write_text(&out.join("comparison.csv"), &csv)?;
    Ok(rows)
}

/// Process exit code for a failed command: 2 for numerical blow-up,
/// 1 for everything else (invalid input, configuration or I/O).
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}
