//! Last-window comparison across run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::runner::{fmt4, read_summary, ROUNDS_FILE, ROUNDS_HEADER, SUMMARY_FILE};

/// Evaluated test Dice (percent) per round for one run, read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub dir: PathBuf,
    pub method: String,
    pub m: u32,
    pub seed: u64,
    pub last_round: u32,
    pub dice: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub m: u32,
    pub mean: f64,
    /// `(seed, last-window mean)` per run, in seed order.
    pub per_seed: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub window: usize,
    /// Last round used for every run.
    pub end_round: u32,
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Reads `rounds.csv` and `summary.json` from a run directory.
pub fn load_run(dir: &Path) -> Result<RunSeries> {
    let summary_path = dir.join(SUMMARY_FILE);
    let summary = read_summary(&summary_path).map_err(|e| bad(&summary_path, e))?;
    let rounds_path = dir.join(ROUNDS_FILE);
    let text = fs::read_to_string(&rounds_path)?;
    let mut lines = text.lines();
    if lines.next() != Some(ROUNDS_HEADER) {
        return Err(bad(&rounds_path, "unexpected header"));
    }
    let mut dice: BTreeMap<u32, f64> = BTreeMap::new();
    let mut last_round = 0;
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(bad(&rounds_path, format!("line {}: expected 9 fields", n + 2)));
        }
        let t: u32 = fields[1]
            .parse()
            .map_err(|_| bad(&rounds_path, format!("line {}: bad round `{}`", n + 2, fields[1])))?;
        last_round = last_round.max(t);
        if !fields[8].is_empty() {
            let d: f64 = fields[8]
                .parse()
                .map_err(|_| bad(&rounds_path, format!("line {}: bad test_dice `{}`", n + 2, fields[8])))?;
            dice.insert(t, d);
        }
    }
    Ok(RunSeries {
        dir: dir.to_path_buf(),
        method: summary.method,
        m: summary.m,
        seed: summary.seed,
        last_round,
        dice: dice.into_iter().collect(),
    })
}

/// Mean of the evaluated rounds in `(end - window, end]`.
pub fn window_mean(dice: &[(u32, f64)], end: u32, window: usize) -> Option<f64> {
    let start = end.saturating_sub(u32::try_from(window).unwrap_or(u32::MAX));
    let vals: Vec<f64> = dice
        .iter()
        .filter(|(t, _)| *t > start && *t <= end)
        .map(|&(_, d)| d)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Groups runs by `(method, m)` and averages each run's last-window Dice.
/// Runs of different lengths are cut to the shortest one, with a warning.
pub fn compare_series(runs: &[RunSeries], window: usize) -> Result<ComparisonTable> {
    if window == 0 {
        return Err(Error::config("window must be >= 1"));
    }
    let end_round = runs
        .iter()
        .map(|r| r.last_round)
        .min()
        .ok_or_else(|| Error::config("compare needs at least one run"))?;
    let mut warnings = Vec::new();
    if runs.iter().any(|r| r.last_round != end_round) {
        let w = format!("runs have different round counts; using rounds up to {end_round}");
        log::warn!("{w}");
        warnings.push(w);
    }
    let mut groups: BTreeMap<(String, u32), Vec<(u64, f64)>> = BTreeMap::new();
    for r in runs {
        let mean = window_mean(&r.dice, end_round, window).ok_or_else(|| {
            Error::Run(format!("{}: no evaluated rounds in the last {window}", r.dir.display()))
        })?;
        groups.entry((r.method.clone(), r.m)).or_default().push((r.seed, mean));
    }
    let rows = groups
        .into_iter()
        .map(|((method, m), mut per_seed)| {
            per_seed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mean = per_seed.iter().map(|p| p.1).sum::<f64>() / per_seed.len() as f64;
            ComparisonRow { method, m, mean, per_seed }
        })
        .collect();
    Ok(ComparisonTable {
        window,
        end_round,
        rows,
        warnings,
    })
}

pub fn compare(dirs: &[PathBuf], window: usize) -> Result<ComparisonTable> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    compare_series(&runs, window)
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,m,mean_dice,seeds,per_seed_dice\n");
        for r in &self.rows {
            let seeds = r.per_seed.iter().map(|p| p.0.to_string()).collect::<Vec<_>>().join(";");
            let vals = r.per_seed.iter().map(|p| fmt4(p.1)).collect::<Vec<_>>().join(";");
            let _ = writeln!(s, "{},{},{},{seeds},{vals}", r.method, r.m, fmt4(r.mean));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = ["method", "m", "mean Dice %", "per seed"];
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                let per = r
                    .per_seed
                    .iter()
                    .map(|(s, d)| format!("s{s}={d:.2}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                [r.method.clone(), r.m.to_string(), format!("{:.2}", r.mean), per]
            })
            .collect();
        let mut width = header.map(str::len);
        for row in &body {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut s = format!("last {} rounds ending at round {}\n", self.window, self.end_round);
        let line = |cells: [&str; 4]| {
            format!(
                "{:<w0$}  {:>w1$}  {:>w2$}  {}\n",
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                w0 = width[0],
                w1 = width[1],
                w2 = width[2]
            )
        };
        s.push_str(&line(header));
        for row in &body {
            s.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
        }
        s
    }
}
