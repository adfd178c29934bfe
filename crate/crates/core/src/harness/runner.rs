//! Runs one configured experiment and writes its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{RoundRecord, Stage};
use crate::fedia::{CorrectionEvent, EstimationRow, RunOutcome, Simulation};
use crate::format;
use crate::metrics::EvalReport;
use crate::synth::{build_federation, FederatedDataset, LabeledVolume};

use super::config::RunConfig;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ESTIMATION_FILE: &str = "estimation.csv";
pub const CORRECTIONS_FILE: &str = "corrections.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_FILE: &str = "model.fiap";

pub const ROUNDS_HEADER: &str = "run_id,t,stage,client_id,weight,loss,iou,corrected_flag,test_dice";

/// Formats `x` with four decimals. Ties round to even.
pub fn fmt4(x: f64) -> String {
    let s = format!("{x:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTotals {
    pub events: usize,
    pub flipped: usize,
    pub inside_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: String,
    pub dataset_kind: String,
    pub m: u32,
    pub seed: u64,
    pub total_rounds: u32,
    pub warmup_rounds: u32,
    /// First round of each stage that occurred.
    pub stage_starts: Vec<(String, u32)>,
    pub last_window: usize,
    /// Mean test Dice (percent) over the last `last_window` rounds.
    pub last_window_dice: f64,
    pub final_eval: EvalReport,
    pub estimates: Vec<EstimationRow>,
    pub corrections: CorrectionTotals,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub rounds: PathBuf,
    pub summary: PathBuf,
    pub estimation: PathBuf,
    pub corrections: PathBuf,
    pub config: PathBuf,
    pub model: PathBuf,
}

impl RunArtifacts {
    fn in_dir(dir: &Path) -> Self {
        RunArtifacts {
            dir: dir.to_path_buf(),
            rounds: dir.join(ROUNDS_FILE),
            summary: dir.join(SUMMARY_FILE),
            estimation: dir.join(ESTIMATION_FILE),
            corrections: dir.join(CORRECTIONS_FILE),
            config: dir.join(CONFIG_FILE),
            model: dir.join(MODEL_FILE),
        }
    }
}

/// Thread pool sized by `FEDIA_THREADS` when set, otherwise rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("FEDIA_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("FEDIA_THREADS: expected a positive integer, got `{raw}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Run(format!("thread pool: {e}")))
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Run(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn check_run_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains([',', '"', '\n', '\r']) {
        return Err(Error::config(format!("run.id `{id}` must be non-empty without commas, quotes or newlines")));
    }
    Ok(())
}

/// Builds the federation for `config`.
pub fn build_data(config: &RunConfig) -> Result<FederatedDataset> {
    build_federation(&config.dataset, config.seed)
}

/// Runs `config` to completion, returning the outcome without touching disk.
pub fn simulate(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let data = build_data(config)?;
    let mut sim = Simulation::new(config.sim_config(), data)?;
    sim.run_to_end()?;
    Ok(sim.outcome())
}

/// Runs `config` and writes every artifact into `config.out_dir`. An existing
/// non-empty directory is refused unless `force` is set.
pub fn run_experiment(config: &RunConfig, force: bool) -> Result<RunArtifacts> {
    config.validate()?;
    check_run_id(&config.run_id())?;
    prepare_dir(&config.out_dir, force)?;
    let pool = thread_pool()?;
    let outcome = pool.install(|| simulate(config))?;
    write_artifacts(config, &outcome)
}

pub fn write_artifacts(config: &RunConfig, outcome: &RunOutcome) -> Result<RunArtifacts> {
    let paths = RunArtifacts::in_dir(&config.out_dir);
    let run_id = config.run_id();
    fs::write(&paths.config, config.to_text())?;
    fs::write(&paths.rounds, rounds_csv(&run_id, &outcome.records))?;
    fs::write(&paths.estimation, estimation_csv(&outcome.estimates))?;
    fs::write(&paths.corrections, corrections_csv(&outcome.corrections))?;
    let summary = summarize(config, outcome);
    fs::write(&paths.summary, serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut model = fs::File::create(&paths.model)?;
    format::write_params(&mut model, &outcome.final_model)?;
    Ok(paths)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn rounds_csv(run_id: &str, records: &[RoundRecord]) -> String {
    let mut s = String::from(ROUNDS_HEADER);
    s.push('\n');
    for r in records {
        let dice = r.test_dice.map(|d| fmt4(100.0 * d)).unwrap_or_default();
        for (k, w) in r.weights.iter().enumerate() {
            let loss = r.losses[k].map(fmt4).unwrap_or_default();
            let flag = u8::from(r.corrected.contains(&k));
            let _ = writeln!(
                s,
                "{run_id},{},{},{k},{},{loss},{},{flag},{dice}",
                r.round,
                r.stage.as_str(),
                fmt4(*w),
                fmt4(r.ious[k]),
            );
        }
    }
    s
}

pub fn estimation_csv(rows: &[EstimationRow]) -> String {
    let mut s = String::from("client_id,true_rate,a_hat_raw,a_hat_clamped,label_components,predicted_components\n");
    for r in rows {
        let e = &r.estimate;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.client,
            fmt4(r.true_rate),
            fmt4(e.raw),
            fmt4(e.clamped),
            e.label_components,
            e.predicted_components
        );
    }
    s
}

pub fn corrections_csv(events: &[CorrectionEvent]) -> String {
    let mut s = String::from("round,client_id,flipped,inside_gt\n");
    for e in events {
        let _ = writeln!(s, "{},{},{},{}", e.round, e.client, e.flipped, e.inside_gt);
    }
    s
}

/// Mean test Dice in percent over evaluated rounds in `(end - window, end]`,
/// where `end` is the last recorded round.
pub fn last_window_dice(records: &[RoundRecord], window: usize) -> Option<f64> {
    let end = records.last()?.round;
    let start = end.saturating_sub(u32::try_from(window).unwrap_or(u32::MAX));
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.round > start)
        .filter_map(|r| r.test_dice)
        .collect();
    (!vals.is_empty()).then(|| 100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn summarize(config: &RunConfig, outcome: &RunOutcome) -> RunSummary {
    let mut stage_starts: Vec<(String, u32)> = Vec::new();
    let mut last: Option<Stage> = None;
    for r in &outcome.records {
        if last != Some(r.stage) {
            stage_starts.push((r.stage.as_str().to_string(), r.round));
            last = Some(r.stage);
        }
    }
    let corrections = CorrectionTotals {
        events: outcome.corrections.len(),
        flipped: outcome.corrections.iter().map(|e| e.flipped).sum(),
        inside_gt: outcome.corrections.iter().map(|e| e.inside_gt).sum(),
    };
    RunSummary {
        run_id: config.run_id(),
        method: config.method.to_string(),
        dataset_kind: config.dataset.kind.to_string(),
        m: config.dataset.m,
        seed: config.seed,
        total_rounds: config.fedia.total_rounds,
        warmup_rounds: config.fedia.warmup_rounds,
        stage_starts,
        last_window: config.last_window,
        last_window_dice: last_window_dice(&outcome.records, config.last_window).unwrap_or(f64::NAN),
        final_eval: outcome.final_eval.clone(),
        estimates: outcome.estimates.clone(),
        corrections,
    }
}

fn write_volume(dir: &Path, stem: &str, v: &LabeledVolume) -> Result<()> {
    let mut image = fs::File::create(dir.join(format!("{stem}_image.fiav")))?;
    format::write_image(&mut image, &[&v.image])?;
    let mut masks = fs::File::create(dir.join(format!("{stem}_masks.fiav")))?;
    format::write_masks(&mut masks, &[&v.gt_mask, &v.noisy_mask])?;
    fs::write(dir.join(format!("{stem}_gt.txt")), format::mask_to_text(&v.gt_mask))?;
    fs::write(dir.join(format!("{stem}_noisy.txt")), format::mask_to_text(&v.noisy_mask))?;
    Ok(())
}

/// Writes the generated federation under `config.out_dir`: one image file and
/// one two-channel mask file (ground truth, noisy) per volume, text dumps of
/// both masks, and `dataset.csv` listing every volume.
pub fn generate_dataset(config: &RunConfig, force: bool) -> Result<PathBuf> {
    config.validate()?;
    let dir = config.out_dir.clone();
    prepare_dir(&dir, force)?;
    let data = build_data(config)?;
    let mut index = String::from("split,client_id,volume,true_rate,gt_components,kept_components\n");
    for (k, vols) in data.clients.iter().enumerate() {
        for (j, v) in vols.iter().enumerate() {
            write_volume(&dir, &format!("client{k}_vol{j}"), v)?;
            let _ = writeln!(
                index,
                "train,{k},{j},{},{},{}",
                fmt4(data.completeness[k]),
                v.gt_component_count,
                v.kept_component_count
            );
        }
    }
    for (j, v) in data.test_set.iter().enumerate() {
        write_volume(&dir, &format!("test_vol{j}"), v)?;
        let _ = writeln!(index, "test,,{j},,{},{}", v.gt_component_count, v.kept_component_count);
    }
    fs::write(dir.join("dataset.csv"), index)?;
    fs::write(dir.join(CONFIG_FILE), config.to_text())?;
    Ok(dir)
}
