//! Command implementations behind the `latent-gate` binary: dataset
//! generation, training, evaluation, the latent-dimension sweep, the
//! baseline comparison, the theory checks, and report rendering.
//!
//! Every command writes plain files (CSV, JSON, markdown, PGM, checkpoints)
//! under an output directory and is deterministic given its config.

mod checkpoint;
mod config;
mod csvio;
mod report;
mod theory;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint,
    TrainMeta, FORMAT_VERSION, MAGIC,
};
pub use config::{mix_seed, Prop1Config, RunConfig, SplitSizes, DEFAULT_SWEEP, DESK_EPOCHS, FULL_EPOCHS};
pub use csvio::{read_csv, write_csv};
pub use report::{cmd_report, compare_markdown, sweep_markdown};
pub use theory::{cmd_mi_oracle, cmd_prop1, DpiRow, MiReport, Prop2Case};

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::latent_entropy_report_from_codes;
use crate::metrics::{error_map, image_score, summarize, ErrorMap, MetricsSummary};
use crate::models::{build_model_with, train_observed, Model, ModelKind, TrainConfig};
use crate::synth::{build_dataset, load_dataset, write_pgm_bytes, Dataset, DatasetManifest, Label, SampleRecord};
use crate::tensor::Tensor;

/// Progress sink for long-running commands.
pub type Log<'a> = &'a (dyn Fn(&str) + Sync);

/// Discards progress messages.
pub fn quiet(_: &str) {}

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.lgck";
/// Minimum relative gap between consecutive groups of the error ordering.
pub const ORDERING_GAP: f64 = 0.02;

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes through a temporary sibling so readers never see partial files.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        field: "json",
        detail: e.to_string(),
    })
}

/// Loads `<dir>/manifest.json`, pointing at `generate` when it is absent.
pub fn open_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        return Err(Error::MissingArtifact {
            path: manifest,
            hint: "run `latent-gate generate` first".into(),
        });
    }
    load_dataset(&manifest)
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.generator.validate()?;
    mkdir(out)?;
    build_dataset(
        &cfg.generator,
        cfg.splits.train,
        cfg.splits.test_normal,
        cfg.splits.test_abnormal,
        out,
    )
}

/// Anything that maps `1×1×64×64` images to reconstructions and latent codes.
pub trait Reconstructor: Sync {
    fn reconstruct(&self, images: &[Tensor]) -> Result<Vec<(Tensor, Tensor)>>;
}

impl Reconstructor for Model {
    fn reconstruct(&self, images: &[Tensor]) -> Result<Vec<(Tensor, Tensor)>> {
        self.reconstruct_all(images, 64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub record_id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub summary: MetricsSummary,
    pub scores: Vec<ScoreRow>,
    /// Error maps of the test records, normal first.
    pub maps: Vec<ErrorMap>,
    /// Pre-rectifier codes of the normal test records, row-major.
    pub normal_codes: Vec<f64>,
    pub latent_dim: usize,
    pub mse_test_normal: f64,
    pub mse_test_abnormal: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn image_tensors(records: &[SampleRecord]) -> Result<Vec<Tensor>> {
    records.iter().map(SampleRecord::image_tensor).collect()
}

/// Scores every test record and computes the metric summary.
pub fn evaluate(model: &dyn Reconstructor, ds: &Dataset) -> Result<Evaluation> {
    if ds.test_normal.is_empty() || ds.test_abnormal.is_empty() {
        return Err(Error::Contract("evaluation needs normal and abnormal test records".into()));
    }
    let records = ds.test();
    let images: Vec<Tensor> = records.iter().map(|r| r.image_tensor()).collect::<Result<_>>()?;
    let outputs = model.reconstruct(&images)?;
    let mut maps = Vec::with_capacity(records.len());
    let mut scores = Vec::with_capacity(records.len());
    let mut normal_codes = Vec::new();
    let mut latent_dim = 0;
    for (rec, (recon, code)) in records.iter().zip(&outputs) {
        let map = error_map(rec.id.clone(), &rec.image, recon.data())?;
        scores.push(ScoreRow {
            record_id: rec.id.clone(),
            label: rec.label,
            score: image_score(&map),
        });
        maps.push(map);
        if rec.label == Label::Normal {
            latent_dim = code.numel();
            normal_codes.extend_from_slice(code.data());
        }
    }
    let labels: Vec<bool> = records.iter().map(|r| r.label == Label::Abnormal).collect();
    let masks: Vec<Vec<u8>> = records.iter().map(|r| r.mask.clone()).collect();
    let summary = summarize(&maps, &labels, Some(&masks))?;
    let split = |label| -> Vec<f64> { scores.iter().filter(|s| s.label == label).map(|s| s.score).collect() };
    Ok(Evaluation {
        summary,
        mse_test_normal: mean(&split(Label::Normal)),
        mse_test_abnormal: mean(&split(Label::Abnormal)),
        scores,
        maps,
        normal_codes,
        latent_dim,
    })
}

/// Mean eval-mode reconstruction MSE over `records`.
pub fn mean_reconstruction_mse(model: &dyn Reconstructor, records: &[SampleRecord]) -> Result<f64> {
    let images = image_tensors(records)?;
    let mut total = 0.0;
    for (chunk, recs) in images.chunks(256).zip(records.chunks(256)) {
        for (rec, (recon, _)) in recs.iter().zip(model.reconstruct(chunk)?) {
            total += image_score(&error_map("", &rec.image, recon.data())?);
        }
    }
    Ok(total / records.len() as f64)
}

/// Error map scaled so its maximum becomes 255.
pub fn normalized_map_bytes(map: &ErrorMap) -> Vec<u8> {
    let max = map.values.iter().cloned().fold(0.0, f64::max);
    map.values
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub mean_mse: f64,
    pub mean_loss: f64,
}

/// Seeds of one trained model: `(init, train)`.
pub fn cell_seeds(base: u64, kind: ModelKind, d: usize, repeat: usize) -> (u64, u64) {
    let k = ModelKind::ALL.iter().position(|&x| x == kind).expect("known kind") as u64;
    (
        mix_seed(&[base, k, d as u64, repeat as u64, 0]),
        mix_seed(&[base, k, d as u64, repeat as u64, 1]),
    )
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
}

fn train_one(cfg: &RunConfig, ds: &Dataset, kind: ModelKind, d: usize, repeat: usize, log: Log, tag: &str) -> Result<Trained> {
    let (init_seed, train_seed) = cell_seeds(cfg.seed, kind, d, repeat);
    let mut model = build_model_with(kind, &cfg.arch(d), cfg.variant.clone(), init_seed)?;
    let tc = TrainConfig {
        seed: train_seed,
        ..cfg.train.clone()
    };
    let epochs = tc.effective_epochs();
    let report = train_observed(&mut model, &ds.train, &tc, |e, loss| {
        log(&format!("{tag} epoch {}/{epochs} loss {loss:.6}", e + 1));
    })?;
    let losses = report
        .epoch_losses
        .iter()
        .zip(&report.epoch_mse)
        .enumerate()
        .map(|(i, (&l, &m))| LossRow {
            epoch: i + 1,
            mean_mse: m,
            mean_loss: l,
        })
        .collect();
    Ok(Trained {
        checkpoint: Checkpoint {
            model,
            meta: TrainMeta {
                seed: init_seed,
                epochs_completed: epochs,
                final_loss: Some(report.final_loss()),
            },
            adam: Some(report.adam),
        },
        losses,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: f64,
}

/// Trains `cfg.model` at `cfg.latent_dim`; writes the checkpoint and `loss.csv`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, log: Log) -> Result<TrainOutput> {
    cfg.validate()?;
    let ds = open_dataset(dataset)?;
    mkdir(out)?;
    let tag = format!("[train {} d={}]", cfg.model.name(), cfg.latent_dim);
    let t = train_one(cfg, &ds, cfg.model, cfg.latent_dim, 0, log, &tag)?;
    let checkpoint = out.join(CHECKPOINT);
    let loss_csv = out.join("loss.csv");
    save_checkpoint(&checkpoint, &t.checkpoint)?;
    write_csv(&loss_csv, &t.losses)?;
    Ok(TrainOutput {
        checkpoint,
        loss_csv,
        final_loss: t.checkpoint.meta.final_loss.unwrap_or(f64::NAN),
    })
}

/// Evaluates a checkpoint on the test splits. `expect` optionally pins the
/// model kind and latent size the caller asked for.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    expect: (Option<ModelKind>, Option<usize>),
) -> Result<MetricsSummary> {
    let ck = load_checkpoint_expecting(checkpoint, expect.0, expect.1)?;
    let ds = open_dataset(dataset)?;
    let ev = evaluate(&ck.model, &ds)?;
    write_eval_artifacts(&ev, &ds, out)?;
    Ok(ev.summary)
}

pub fn write_eval_artifacts(ev: &Evaluation, ds: &Dataset, out: &Path) -> Result<()> {
    let maps_dir = out.join("error_maps");
    mkdir(&maps_dir)?;
    write_csv(&out.join("scores.csv"), &ev.scores)?;
    write_json(&out.join("metrics.json"), &ev.summary)?;
    let n_normal = ds.test_normal.len();
    for map in &ev.maps[n_normal..] {
        let stem = Path::new(&map.id).file_stem().and_then(|s| s.to_str()).unwrap_or("map");
        write_pgm_bytes(&maps_dir.join(format!("{stem}.pgm")), &normalized_map_bytes(map), 64)?;
    }
    Ok(())
}

/// Everything recorded for one trained model of a sweep or comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub repeat: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    pub auroc: f64,
    pub ap: f64,
    pub ap_pix: Option<f64>,
    pub best_dice: Option<f64>,
    pub dice_threshold: Option<f64>,
    pub final_train_loss: f64,
    pub mse_train_normal: f64,
    pub mse_test_normal: f64,
    pub mse_test_abnormal: f64,
    pub h_z: f64,
    /// Train normal < test normal < test abnormal, each by at least [`ORDERING_GAP`].
    pub ordering_holds: bool,
    pub ordering_gap: f64,
}

/// Inputs that determine a cell's result; a stored cell is reused only when
/// its fingerprint matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub dataset: crate::synth::GeneratorConfig,
    pub splits: [usize; 3],
    pub arch: crate::models::ArchSpec,
    pub variant: crate::models::VariantConfig,
    pub train: TrainConfig,
    pub kind: ModelKind,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellFile {
    fingerprint: Fingerprint,
    result: CellResult,
}

fn fingerprint(cfg: &RunConfig, ds: &Dataset, kind: ModelKind, d: usize, repeat: usize) -> Fingerprint {
    Fingerprint {
        dataset: ds.manifest.generator_config.clone(),
        splits: [ds.train.len(), ds.test_normal.len(), ds.test_abnormal.len()],
        arch: cfg.arch(d),
        variant: cfg.variant.clone(),
        train: cfg.train.clone(),
        kind,
        repeat,
        seed: cfg.seed,
    }
}

pub fn cell_name(kind: ModelKind, d: usize, repeat: usize) -> String {
    format!("{}_d{d:03}_r{repeat}", kind.name().to_ascii_lowercase())
}

/// Result of a finished cell under `root/cells`, if it matches `fp`.
fn cached_cell(root: &Path, name: &str, fp: &Fingerprint) -> Option<CellResult> {
    let f: CellFile = read_json(&root.join("cells").join(name).join("cell.json")).ok()?;
    (f.fingerprint == *fp).then_some(f.result)
}

fn run_cell(cfg: &RunConfig, ds: &Dataset, kind: ModelKind, d: usize, repeat: usize, dir: &Path, log: Log) -> Result<CellResult> {
    let name = cell_name(kind, d, repeat);
    let tag = format!("[{name}]");
    let t = train_one(cfg, ds, kind, d, repeat, log, &tag)?;
    let model = &t.checkpoint.model;
    let ev = evaluate(model, ds)?;
    let mse_train_normal = mean_reconstruction_mse(model, &ds.train)?;
    let h_z = latent_entropy_report_from_codes(&ev.normal_codes, ev.latent_dim)?.h_hat;
    let gaps = [
        ev.mse_test_normal / mse_train_normal - 1.0,
        ev.mse_test_abnormal / ev.mse_test_normal - 1.0,
    ];
    let min_gap = gaps[0].min(gaps[1]);
    let (init_seed, train_seed) = cell_seeds(cfg.seed, kind, d, repeat);
    let result = CellResult {
        kind,
        latent_dim: d,
        repeat,
        init_seed,
        train_seed,
        auroc: ev.summary.auroc,
        ap: ev.summary.ap,
        ap_pix: ev.summary.ap_pix,
        best_dice: ev.summary.best_dice,
        dice_threshold: ev.summary.dice_threshold,
        final_train_loss: t.checkpoint.meta.final_loss.unwrap_or(f64::NAN),
        mse_train_normal,
        mse_test_normal: ev.mse_test_normal,
        mse_test_abnormal: ev.mse_test_abnormal,
        h_z,
        ordering_holds: min_gap >= ORDERING_GAP,
        ordering_gap: min_gap,
    };
    mkdir(dir)?;
    let ck = Checkpoint {
        adam: None,
        ..t.checkpoint
    };
    save_checkpoint(&dir.join(CHECKPOINT), &ck)?;
    write_csv(&dir.join("loss.csv"), &t.losses)?;
    write_csv(&dir.join("scores.csv"), &ev.scores)?;
    // cell.json last: its presence marks the cell as finished
    write_json(
        &dir.join("cell.json"),
        &CellFile {
            fingerprint: fingerprint(cfg, ds, kind, d, repeat),
            result: result.clone(),
        },
    )?;
    log(&format!(
        "{tag} auc {:.4} ap {:.4} mse train/normal/abnormal {:.6}/{:.6}/{:.6} H(Z) {:.3}",
        result.auroc, result.ap, result.mse_train_normal, result.mse_test_normal, result.mse_test_abnormal, result.h_z
    ));
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CellKey {
    kind: ModelKind,
    d: usize,
    repeat: usize,
}

/// Runs (or reuses) every cell with up to `cfg.workers` threads. Results come
/// back in the order of `keys`, read from the cell files so a resumed run and
/// an uninterrupted one aggregate identical values.
fn run_cells(cfg: &RunConfig, ds: &Dataset, root: &Path, keys: &[CellKey], reuse: &[PathBuf], log: Log) -> Result<Vec<CellResult>> {
    let pending: Vec<usize> = (0..keys.len())
        .filter(|&i| {
            let k = keys[i];
            let fp = fingerprint(cfg, ds, k.kind, k.d, k.repeat);
            let name = cell_name(k.kind, k.d, k.repeat);
            let done = std::iter::once(root).chain(reuse.iter().map(PathBuf::as_path)).any(|r| cached_cell(r, &name, &fp).is_some());
            if done {
                log(&format!("[{name}] reusing finished cell"));
            }
            !done
        })
        .collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.min(pending.len()).max(1) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(j) else { break };
                let k = keys[i];
                let name = cell_name(k.kind, k.d, k.repeat);
                let dir = root.join("cells").join(&name);
                if let Err(e) = run_cell(cfg, ds, k.kind, k.d, k.repeat, &dir, log) {
                    failed.store(true, Ordering::SeqCst);
                    first_error.lock().expect("lock").get_or_insert(Error::Cell {
                        cell: name,
                        source: Box::new(e),
                    });
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("lock") {
        return Err(e);
    }
    keys.iter()
        .map(|k| {
            let fp = fingerprint(cfg, ds, k.kind, k.d, k.repeat);
            let name = cell_name(k.kind, k.d, k.repeat);
            std::iter::once(root)
                .chain(reuse.iter().map(PathBuf::as_path))
                .find_map(|r| cached_cell(r, &name, &fp))
                .ok_or_else(|| Error::MissingArtifact {
                    path: root.join("cells").join(&name).join("cell.json"),
                    hint: "cell finished without writing its result".into(),
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> MeanStd {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    MeanStd { mean: m, std: var.sqrt() }
}

/// Aggregate over the repeats of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub latent_dim: usize,
    pub repeats: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub ap_pix_mean: Option<f64>,
    pub ap_pix_std: Option<f64>,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
    pub mse_train_normal_mean: f64,
    pub mse_test_normal_mean: f64,
    pub mse_test_abnormal_mean: f64,
    pub h_z_mean: f64,
    pub h_z_std: f64,
    pub ordering_all: bool,
}

pub fn summarize_cells(method: &str, cells: &[CellResult]) -> SummaryRow {
    let col = |f: &dyn Fn(&CellResult) -> f64| -> MeanStd { mean_std(&cells.iter().map(f).collect::<Vec<_>>()) };
    let opt = |f: &dyn Fn(&CellResult) -> Option<f64>| -> Option<MeanStd> {
        cells.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| mean_std(&v))
    };
    let (auroc, ap) = (col(&|c| c.auroc), col(&|c| c.ap));
    let (ap_pix, dice) = (opt(&|c| c.ap_pix), opt(&|c| c.best_dice));
    let h = col(&|c| c.h_z);
    SummaryRow {
        method: method.to_string(),
        latent_dim: cells[0].latent_dim,
        repeats: cells.len(),
        auroc_mean: auroc.mean,
        auroc_std: auroc.std,
        ap_mean: ap.mean,
        ap_std: ap.std,
        ap_pix_mean: ap_pix.map(|m| m.mean),
        ap_pix_std: ap_pix.map(|m| m.std),
        dice_mean: dice.map(|m| m.mean),
        dice_std: dice.map(|m| m.std),
        mse_train_normal_mean: col(&|c| c.mse_train_normal).mean,
        mse_test_normal_mean: col(&|c| c.mse_test_normal).mean,
        mse_test_abnormal_mean: col(&|c| c.mse_test_abnormal).mean,
        h_z_mean: h.mean,
        h_z_std: h.std,
        ordering_all: cells.iter().all(|c| c.ordering_holds),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub d_optimal: usize,
}

/// Latent size with the highest mean AUROC; ties go to the smaller size.
pub fn d_optimal(summary: &[SummaryRow]) -> Option<usize> {
    summary
        .iter()
        .fold(None::<&SummaryRow>, |best, r| match best {
            Some(b) if b.auroc_mean >= r.auroc_mean => Some(b),
            _ => Some(r),
        })
        .map(|r| r.latent_dim)
}

pub const SWEEP_CELLS: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";
pub const SWEEP_TABLE: &str = "sweep.md";

/// Trains an AE for every `(d, repeat)` of the sweep, skipping cells that
/// already finished with the same inputs, then writes `sweep.csv`,
/// `sweep_summary.csv` and `sweep.md`.
pub fn cmd_sweep(cfg: &RunConfig, dataset: &Path, out: &Path, log: Log) -> Result<SweepReport> {
    cfg.validate()?;
    let ds = open_dataset(dataset)?;
    mkdir(out)?;
    let keys: Vec<CellKey> = cfg
        .sweep
        .iter()
        .flat_map(|&d| (0..cfg.repeats).map(move |repeat| CellKey { kind: ModelKind::Ae, d, repeat }))
        .collect();
    let cells = run_cells(cfg, &ds, out, &keys, &[], log)?;
    let summary: Vec<SummaryRow> = cfg
        .sweep
        .iter()
        .map(|&d| {
            let group: Vec<CellResult> = cells.iter().filter(|c| c.latent_dim == d).cloned().collect();
            summarize_cells("AE", &group)
        })
        .collect();
    let d_opt = d_optimal(&summary).expect("non-empty sweep");
    write_csv(&out.join(SWEEP_CELLS), &cells)?;
    write_csv(&out.join(SWEEP_SUMMARY), &summary)?;
    write_atomic(&out.join(SWEEP_TABLE), sweep_markdown(&summary, d_opt).as_bytes())?;
    Ok(SweepReport {
        cells,
        summary,
        d_optimal: d_opt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<SummaryRow>,
    pub d_optimal: usize,
}

pub const COMPARE_TABLE_CSV: &str = "compare.csv";
pub const COMPARE_TABLE: &str = "compare.md";

/// Reads `d_optimal` from a finished sweep.
pub fn sweep_optimum(sweep_dir: &Path) -> Result<usize> {
    let path = sweep_dir.join(SWEEP_SUMMARY);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "run `latent-gate sweep` first to find d_optimal".into(),
        });
    }
    let rows: Vec<SummaryRow> = read_csv(&path)?;
    d_optimal(&rows).ok_or_else(|| Error::MissingArtifact {
        path,
        hint: "the sweep summary is empty; rerun `latent-gate sweep`".into(),
    })
}

/// AE, VAE, MemAE and CeAE at `compare_latent_dim`, plus AE at the sweep's
/// `d_optimal`. AE cells finished by the sweep with the same inputs are reused.
pub fn cmd_compare(cfg: &RunConfig, dataset: &Path, sweep_dir: &Path, out: &Path, log: Log) -> Result<CompareReport> {
    cfg.validate()?;
    let d_opt = sweep_optimum(sweep_dir)?;
    let ds = open_dataset(dataset)?;
    mkdir(out)?;
    let d = cfg.compare_latent_dim;
    let methods: Vec<(String, ModelKind, usize)> = ModelKind::ALL
        .iter()
        .map(|&k| (k.name().to_string(), k, d))
        .chain(std::iter::once(("AE[d_optimal]".to_string(), ModelKind::Ae, d_opt)))
        .collect();
    let keys: Vec<CellKey> = methods
        .iter()
        .flat_map(|&(_, kind, d)| (0..cfg.repeats).map(move |repeat| CellKey { kind, d, repeat }))
        .collect();
    let mut unique: Vec<CellKey> = Vec::with_capacity(keys.len());
    for k in keys {
        if !unique.contains(&k) {
            unique.push(k);
        }
    }
    let cells = run_cells(cfg, &ds, out, &unique, &[sweep_dir.to_path_buf()], log)?;
    let rows: Vec<SummaryRow> = methods
        .iter()
        .map(|(name, kind, d)| {
            let group: Vec<CellResult> = cells
                .iter()
                .filter(|c| c.kind == *kind && c.latent_dim == *d)
                .cloned()
                .collect();
            summarize_cells(name, &group)
        })
        .collect();
    write_csv(&out.join(COMPARE_TABLE_CSV), &rows)?;
    write_atomic(&out.join(COMPARE_TABLE), compare_markdown(&rows).as_bytes())?;
    Ok(CompareReport { rows, d_optimal: d_opt })
}
