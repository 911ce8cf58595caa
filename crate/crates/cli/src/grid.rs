use rayon::prelude::*;
use wmh_transfer::transfer::{cells, run_cell, Cell, Scenario, ScenarioContext};

use crate::error::{CliError, Result};
use crate::results::{sort_canonical, ResultRecord};

/// The cells of the requested scenarios, in canonical order.
pub fn grid_cells(scenarios: &[Scenario], sizes: &[usize], freeze: &[usize], seeds: &[u64]) -> Vec<Cell> {
    scenarios.iter().flat_map(|&s| cells(s, sizes, freeze, seeds)).collect()
}

#[derive(Debug, Clone)]
pub struct GridReport {
    /// Canonically sorted; failed cells carry an error message.
    pub records: Vec<ResultRecord>,
    /// Checksum of the source parameters before any cell ran.
    pub source_checksum: u64,
}

impl GridReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }
}

/// Runs every cell on a pool of `jobs` threads. Each cell checks that the
/// shared source parameters still carry their original checksum afterwards.
pub fn run_grid(ctx: &ScenarioContext<'_>, cells: &[Cell], jobs: usize) -> Result<GridReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    let source_checksum = ctx.source.checksum();
    let mut records: Vec<ResultRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                let outcome = run_cell(ctx, cell);
                let after = ctx.source.checksum();
                match outcome {
                    _ if after != source_checksum => ResultRecord::failed(
                        cell,
                        format!("source parameters changed: checksum {source_checksum:016x} -> {after:016x}"),
                    ),
                    Ok(run) => ResultRecord::from_run(&run),
                    Err(e) => ResultRecord::failed(cell, e.to_string()),
                }
            })
            .collect()
    });
    sort_canonical(&mut records);
    Ok(GridReport { records, source_checksum })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        let freeze: Vec<usize> = (0..=15).collect();
        assert_eq!(grid_cells(&[Scenario::Adapted], &[2, 5, 10], &freeze, &[1]).len(), 48);
        assert_eq!(grid_cells(&[Scenario::Direct], &[2, 5, 10], &freeze, &[1, 2, 3]).len(), 3);
        let all = grid_cells(&[Scenario::Direct, Scenario::Scratch, Scenario::Adapted], &[2, 20], &[0, 15], &[1, 2]);
        assert_eq!(all.len(), 2 + 4 + 8);
    }
}
