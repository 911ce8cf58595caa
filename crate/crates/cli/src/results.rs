//! CSV persistence for grid results, timings, heatmaps and training history.
//!
//! Results columns, in order: `scenario, target_train_size, freeze_index,
//! seed, dice_test_mean, dice_test_pooled, val_auc, epochs_run,
//! train_patients, error`. Absent values are empty fields; `train_patients`
//! is a `;`-separated id list. Wall-clock times live in a separate timing
//! file so the results file is byte-stable across reruns.

use std::collections::BTreeMap;
use std::path::Path;

use wmh_transfer::train::EpochRecord;
use wmh_transfer::transfer::{Cell, RunResult, Scenario};

use crate::error::{CliError, Result};

pub const RESULT_COLUMNS: [&str; 10] = [
    "scenario",
    "target_train_size",
    "freeze_index",
    "seed",
    "dice_test_mean",
    "dice_test_pooled",
    "val_auc",
    "epochs_run",
    "train_patients",
    "error",
];

pub const TIMING_COLUMNS: [&str; 5] = ["scenario", "target_train_size", "freeze_index", "seed", "wall_time"];

pub const HISTORY_COLUMNS: [&str; 4] = ["epoch", "train_loss", "val_auc", "lr"];

/// One row of the results table: a finished cell or the error it raised.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub scenario: Scenario,
    pub target_train_size: Option<usize>,
    pub freeze_index: Option<usize>,
    pub seed: u64,
    pub dice_test_mean: Option<f64>,
    pub dice_test_pooled: Option<f64>,
    pub val_auc: Option<f64>,
    pub epochs_run: Option<usize>,
    pub train_patients: Vec<u32>,
    pub wall_time: Option<f64>,
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn from_run(r: &RunResult) -> Self {
        ResultRecord {
            scenario: r.scenario,
            target_train_size: r.target_train_size,
            freeze_index: r.freeze_index,
            seed: r.seed,
            dice_test_mean: Some(r.dice_test_mean),
            dice_test_pooled: Some(r.dice_test_pooled),
            val_auc: Some(r.val_auc),
            epochs_run: Some(r.epochs_run),
            train_patients: r.train_patients.clone(),
            wall_time: Some(r.wall_time),
            error: None,
        }
    }

    pub fn failed(cell: Cell, error: String) -> Self {
        ResultRecord {
            scenario: cell.scenario,
            target_train_size: cell.size.filter(|_| cell.scenario != Scenario::Direct),
            freeze_index: cell.freeze.filter(|_| cell.scenario == Scenario::Adapted),
            seed: cell.seed,
            dice_test_mean: None,
            dice_test_pooled: None,
            val_auc: None,
            epochs_run: None,
            train_patients: Vec::new(),
            wall_time: None,
            error: Some(error),
        }
    }

    /// Canonical ordering key: scenario, size, freeze index, seed.
    pub fn sort_key(&self) -> (u8, Option<usize>, Option<usize>, u64) {
        (self.scenario.number(), self.target_train_size, self.freeze_index, self.seed)
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

pub fn sort_canonical(records: &mut [ResultRecord]) {
    records.sort_by_key(ResultRecord::sort_key);
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn parse_opt<T: std::str::FromStr>(field: &str, column: &str) -> std::result::Result<Option<T>, String> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| format!("bad {column} value {field:?}"))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_results(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let rows = records.iter().map(|r| {
        vec![
            r.scenario.number().to_string(),
            opt(r.target_train_size),
            opt(r.freeze_index),
            r.seed.to_string(),
            opt(r.dice_test_mean),
            opt(r.dice_test_pooled),
            opt(r.val_auc),
            opt(r.epochs_run),
            r.train_patients.iter().map(u32::to_string).collect::<Vec<_>>().join(";"),
            r.error.clone().unwrap_or_default(),
        ]
    });
    write_rows(path.as_ref(), &RESULT_COLUMNS, rows)
}

pub fn write_timing(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let rows = records.iter().map(|r| {
        vec![
            r.scenario.number().to_string(),
            opt(r.target_train_size),
            opt(r.freeze_index),
            r.seed.to_string(),
            opt(r.wall_time),
        ]
    });
    write_rows(path.as_ref(), &TIMING_COLUMNS, rows)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let header = reader.headers().map_err(|e| CliError::csv(path, e))?.clone();
    if header.iter().ne(RESULT_COLUMNS) {
        return Err(CliError::Usage(format!("{}: unexpected header {:?}", path.display(), header)));
    }
    let mut out = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let bad = |m: String| CliError::Usage(format!("{} row {}: {m}", path.display(), n + 2));
        let f = |i: usize| rec.get(i).unwrap_or("");
        let scenario = f(0)
            .parse::<u8>()
            .map_err(|_| bad(format!("bad scenario {:?}", f(0))))
            .and_then(|s| Scenario::from_number(s).map_err(|e| bad(e.to_string())))?;
        let patients = f(8)
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u32>().map_err(|_| bad(format!("bad patient id {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(ResultRecord {
            scenario,
            target_train_size: parse_opt(f(1), RESULT_COLUMNS[1]).map_err(bad)?,
            freeze_index: parse_opt(f(2), RESULT_COLUMNS[2]).map_err(bad)?,
            seed: f(3).parse().map_err(|_| bad(format!("bad seed {:?}", f(3))))?,
            dice_test_mean: parse_opt(f(4), RESULT_COLUMNS[4]).map_err(bad)?,
            dice_test_pooled: parse_opt(f(5), RESULT_COLUMNS[5]).map_err(bad)?,
            val_auc: parse_opt(f(6), RESULT_COLUMNS[6]).map_err(bad)?,
            epochs_run: parse_opt(f(7), RESULT_COLUMNS[7]).map_err(bad)?,
            train_patients: patients,
            wall_time: None,
            error: Some(f(9).to_string()).filter(|e| !e.is_empty()),
        });
    }
    Ok(out)
}

/// Mean adapted-scenario test Dice over seeds, indexed by (size, freeze index).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub sizes: Vec<usize>,
    pub freeze: Vec<usize>,
    pub cells: BTreeMap<(usize, usize), f64>,
}

impl Heatmap {
    pub fn from_records(records: &[ResultRecord]) -> Heatmap {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.scenario == Scenario::Adapted) {
            let (Some(k), Some(i), Some(d)) = (r.target_train_size, r.freeze_index, r.dice_test_mean) else { continue };
            let e = acc.entry((k, i)).or_default();
            e.0 += d;
            e.1 += 1;
        }
        let mut sizes: Vec<usize> = acc.keys().map(|&(k, _)| k).collect();
        let mut freeze: Vec<usize> = acc.keys().map(|&(_, i)| i).collect();
        sizes.dedup();
        freeze.sort_unstable();
        freeze.dedup();
        let cells = acc.into_iter().map(|(key, (sum, n))| (key, sum / n as f64)).collect();
        Heatmap { sizes, freeze, cells }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut header = vec!["target_train_size".to_string()];
        header.extend(self.freeze.iter().map(|i| format!("freeze_{i}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = self.sizes.iter().map(|&k| {
            let mut row = vec![k.to_string()];
            row.extend(self.freeze.iter().map(|&i| opt(self.cells.get(&(k, i)))));
            row
        });
        write_rows(path.as_ref(), &header, rows)
    }
}

/// Freeze index with the highest test Dice for one (size, seed), lowest
/// index on ties.
pub fn best_freeze(records: &[ResultRecord], size: usize, seed: u64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut rows: Vec<&ResultRecord> = records
        .iter()
        .filter(|r| r.scenario == Scenario::Adapted && r.target_train_size == Some(size) && r.seed == seed)
        .collect();
    rows.sort_by_key(|r| r.freeze_index);
    for r in rows {
        let (Some(i), Some(d)) = (r.freeze_index, r.dice_test_mean) else { continue };
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((i, d));
        }
    }
    best
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let rows = history
        .iter()
        .map(|r| vec![r.epoch.to_string(), r.train_loss.to_string(), r.val_auc.to_string(), r.lr.to_string()]);
    write_rows(path.as_ref(), &HISTORY_COLUMNS, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(scenario: Scenario, size: Option<usize>, freeze: Option<usize>, seed: u64, dice: f64) -> ResultRecord {
        ResultRecord {
            scenario,
            target_train_size: size,
            freeze_index: freeze,
            seed,
            dice_test_mean: Some(dice),
            dice_test_pooled: Some(dice / 2.0),
            val_auc: Some(0.9),
            epochs_run: Some(3),
            train_patients: size.map_or_else(Vec::new, |k| (0..k as u32).collect()),
            wall_time: Some(1.5),
            error: None,
        }
    }

    #[test]
    fn results_round_trip_with_empty_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut failed = ResultRecord::failed(
            Cell { scenario: Scenario::Adapted, size: Some(3), freeze: Some(4), seed: 2 },
            "sampling error: too few, \"quoted\"".into(),
        );
        failed.wall_time = None;
        let rows = vec![record(Scenario::Direct, None, None, 1, 0.125), record(Scenario::Scratch, Some(2), None, 1, 0.3), failed];
        write_results(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RESULT_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "1,,,1,0.125,0.0625,0.9,3,,");
        assert_eq!(lines.next().unwrap(), "2,2,,1,0.3,0.15,0.9,3,0;1,");
        let back = read_results(&path).unwrap();
        let strip = |mut r: ResultRecord| {
            r.wall_time = None;
            r
        };
        assert_eq!(back, rows.into_iter().map(strip).collect::<Vec<_>>());
    }

    #[test]
    fn canonical_sort_puts_absent_values_first() {
        let mut rows = vec![
            record(Scenario::Adapted, Some(2), Some(4), 1, 0.1),
            record(Scenario::Adapted, Some(2), Some(0), 2, 0.1),
            record(Scenario::Adapted, Some(2), Some(0), 1, 0.1),
            record(Scenario::Scratch, Some(2), None, 1, 0.1),
            record(Scenario::Direct, None, None, 3, 0.1),
        ];
        sort_canonical(&mut rows);
        let keys: Vec<_> = rows.iter().map(ResultRecord::sort_key).collect();
        assert_eq!(
            keys,
            vec![(1, None, None, 3), (2, Some(2), None, 1), (3, Some(2), Some(0), 1), (3, Some(2), Some(0), 2), (3, Some(2), Some(4), 1)]
        );
    }

    #[test]
    fn heatmap_averages_over_seeds() {
        let rows = vec![
            record(Scenario::Adapted, Some(2), Some(0), 1, 0.2),
            record(Scenario::Adapted, Some(2), Some(0), 2, 0.4),
            record(Scenario::Adapted, Some(2), Some(8), 1, 0.5),
            record(Scenario::Adapted, Some(5), Some(8), 1, 0.7),
            record(Scenario::Scratch, Some(2), None, 1, 0.9),
        ];
        let h = Heatmap::from_records(&rows);
        assert_eq!(h.sizes, vec![2, 5]);
        assert_eq!(h.freeze, vec![0, 8]);
        assert!((h.cells[&(2, 0)] - 0.3).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        h.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "target_train_size,freeze_0,freeze_8");
        assert!(lines[2].starts_with("5,,0.7"));
    }

    #[test]
    fn best_freeze_prefers_lowest_index_on_ties() {
        let rows = vec![
            record(Scenario::Adapted, Some(2), Some(12), 1, 0.6),
            record(Scenario::Adapted, Some(2), Some(8), 1, 0.6),
            record(Scenario::Adapted, Some(2), Some(0), 1, 0.5),
            record(Scenario::Adapted, Some(2), Some(0), 2, 0.9),
        ];
        assert_eq!(best_freeze(&rows, 2, 1), Some((8, 0.6)));
        assert_eq!(best_freeze(&rows, 2, 2), Some((0, 0.9)));
        assert_eq!(best_freeze(&rows, 5, 1), None);
    }

    #[test]
    fn history_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let hist: Vec<EpochRecord> =
            (1..=4).map(|e| EpochRecord { epoch: e, train_loss: 1.0 / e as f64, val_auc: 0.5, lr: 1e-3 }).collect();
        write_history(&path, &hist).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().nth(2).unwrap(), "2,0.5,0.5,0.001");
    }
}
