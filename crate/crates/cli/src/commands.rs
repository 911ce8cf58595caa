use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmh_transfer::data::{generate_domain, DomainDataset, DomainTag, Manifest, Volume};
use wmh_transfer::infer::{evaluate, segment, to_fcn, DiceSummary, SegmentationResult};
use wmh_transfer::nn::build_network;
use wmh_transfer::train::fit;
use wmh_transfer::transfer::{
    adapt, nested_order, training_patches, validation_patches, ModelProvenance, Scenario, ScenarioContext, TransferPlan,
};
use wmh_transfer::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::grid::{grid_cells, run_grid, GridReport};
use crate::results::{best_freeze, read_results, write_history, write_results, write_timing, Heatmap, ResultRecord};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Generates both domains and writes them with a manifest under `out_dir`.
pub fn cmd_synth(config: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let source = generate_domain(&config.source, config.source_splits)?;
    let target = generate_domain(&config.target, config.target_splits)?;
    Ok(Manifest::save_datasets(out_dir, &[&source, &target])?)
}

pub fn load_domain(manifest_path: &Path, domain: DomainTag) -> Result<DomainDataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    Ok(manifest.load_domain(base, domain)?)
}

/// The first `size` training volumes of the seeded nested ordering, or all of
/// them in stored order when `size` is `None`.
pub fn training_subset(dataset: &DomainDataset, size: Option<usize>, seed: u64) -> Result<Vec<&Volume>> {
    let Some(k) = size else { return Ok(dataset.train().iter().collect()) };
    let order = nested_order(dataset, seed);
    if k == 0 || k > order.len() {
        return Err(CliError::Usage(format!("size {k} is outside 1..={} available training patients", order.len())));
    }
    Ok(order[..k]
        .iter()
        .map(|id| dataset.train().iter().find(|v| v.patient_id() == *id).expect("id from the train split"))
        .collect())
}

/// Trains a freshly initialized network on `dataset`'s training split.
pub fn train_model(
    dataset: &DomainDataset,
    config: &ExperimentConfig,
    size: Option<usize>,
    seed: u64,
) -> Result<Checkpoint> {
    let volumes = training_subset(dataset, size, seed)?;
    let train = training_patches(&volumes, config.positive_fraction, seed)?;
    let val_volumes: Vec<&Volume> = dataset.val().iter().collect();
    let val = validation_patches(&val_volumes, config.positive_fraction, seed)?;
    let init = build_network(&config.network_spec()?, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let outcome = fit(&init, &train, &val, &config.train_config(seed))?;
    let provenance = match dataset.domain() {
        DomainTag::Source => ModelProvenance::SourceTrained,
        DomainTag::Target => ModelProvenance::ScratchTarget,
    };
    Ok(Checkpoint::from_outcome(outcome, provenance, seed))
}

/// Sibling path `<stem><suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Trains on one domain, saves the best checkpoint and `<stem>_history.csv`.
pub fn cmd_train(
    manifest: &Path,
    domain: DomainTag,
    config: &ExperimentConfig,
    size: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<Checkpoint> {
    let dataset = load_domain(manifest, domain)?;
    let ckpt = train_model(&dataset, config, size, seed)?;
    ckpt.save(out)?;
    write_history(sibling(out, "_history.csv"), &ckpt.history)?;
    Ok(ckpt)
}

/// Fine-tunes a source checkpoint on the first `size` target patients of the
/// nested ordering with the shallowest `freeze` layers frozen.
pub fn adapt_model(
    source: &Checkpoint,
    source_ref: &str,
    target: &DomainDataset,
    config: &ExperimentConfig,
    size: usize,
    freeze: usize,
    seed: u64,
) -> Result<Checkpoint> {
    let plan = TransferPlan::new(freeze, source.params.depth())?;
    let volumes = training_subset(target, Some(size), seed)?;
    let train = training_patches(&volumes, config.positive_fraction, seed)?;
    let val_volumes: Vec<&Volume> = target.val().iter().collect();
    let val = validation_patches(&val_volumes, config.positive_fraction, seed)?;
    let adapted = adapt(&source.params, source_ref, &train, &val, plan, &config.train_config(seed))?;
    Ok(Checkpoint::from_outcome(adapted.outcome, adapted.provenance, seed))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_adapt(
    source_ckpt: &Path,
    manifest: &Path,
    size: usize,
    freeze: usize,
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
) -> Result<Checkpoint> {
    let source = Checkpoint::load(source_ckpt)?;
    let target = load_domain(manifest, DomainTag::Target)?;
    let ckpt = adapt_model(&source, &source_ckpt.display().to_string(), &target, config, size, freeze, seed)?;
    ckpt.save(out)?;
    write_history(sibling(out, "_history.csv"), &ckpt.history)?;
    Ok(ckpt)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, volumes: &[Volume], threshold: f64) -> Result<DiceSummary> {
    Ok(evaluate(&to_fcn(&ckpt.params)?, volumes, threshold)?)
}

fn write_grid_text<T: Copy>(path: &Path, image: &[T], width: usize, fmt: impl Fn(T) -> String, header: &str) -> Result<()> {
    let mut text = String::from(header);
    for row in image.chunks(width) {
        text.push_str(&row.iter().map(|&v| fmt(v)).collect::<Vec<_>>().join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Segments one MVL1 volume and writes `probability.txt` (whitespace-separated
/// rows) and `mask.pgm` (plain PGM with values 0/1) into `out_dir`.
pub fn cmd_segment(ckpt: &Path, volume_path: &Path, out_dir: &Path, threshold: f64) -> Result<SegmentationResult> {
    let ckpt = Checkpoint::load(ckpt)?;
    let volume = wmh_transfer::data::read_volume(volume_path)?;
    let fcn = to_fcn(&ckpt.params)?;
    let result = segment(&fcn, &volume, threshold)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let (h, w) = (volume.height(), volume.width());
    let prob: &Tensor<f32> = &result.probability;
    write_grid_text(&out_dir.join("probability.txt"), prob.data(), w, |v: f32| v.to_string(), "")?;
    write_grid_text(&out_dir.join("mask.pgm"), result.mask.data(), w, |v: u8| v.to_string(), &format!("P2\n{w} {h}\n1\n"))?;
    Ok(result)
}

/// Runs the requested scenarios over the grid and writes the results CSV
/// plus `<stem>_heatmap.csv` and `<stem>_timing.csv`.
#[allow(clippy::too_many_arguments)]
pub fn grid_with_model(
    source: &Checkpoint,
    source_ref: &str,
    target: &DomainDataset,
    config: &ExperimentConfig,
    scenarios: &[Scenario],
    seeds: &[u64],
    jobs: usize,
    out_csv: &Path,
) -> Result<GridReport> {
    let ctx = ScenarioContext {
        source: &source.params,
        source_ref: source_ref.to_string(),
        target,
        config: config.train.clone(),
        positive_fraction: config.positive_fraction,
        threshold: config.threshold,
    };
    let cells = grid_cells(scenarios, &config.sizes, &config.freeze, seeds);
    let report = run_grid(&ctx, &cells, jobs)?;
    write_grid_outputs(&report.records, out_csv)?;
    Ok(report)
}

pub fn write_grid_outputs(records: &[ResultRecord], out_csv: &Path) -> Result<()> {
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_results(out_csv, records)?;
    write_timing(sibling(out_csv, "_timing.csv"), records)?;
    Heatmap::from_records(records).write(sibling(out_csv, "_heatmap.csv"))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_grid(
    source_ckpt: &Path,
    manifest: &Path,
    config: &ExperimentConfig,
    scenarios: &[Scenario],
    seeds: &[u64],
    jobs: usize,
    out_csv: &Path,
) -> Result<GridReport> {
    let source = Checkpoint::load(source_ckpt)?;
    let target = load_domain(manifest, DomainTag::Target)?;
    grid_with_model(&source, &source_ckpt.display().to_string(), &target, config, scenarios, seeds, jobs, out_csv)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Text summary of a results CSV: Dice per scenario and size, and the best
/// freeze index per size and seed.
pub fn report(records: &[ResultRecord]) -> String {
    let mut out = String::new();
    let ok: Vec<&ResultRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let failed = records.len() - ok.len();
    let _ = writeln!(out, "{} rows, {} failed", records.len(), failed);
    if let Some(d) = mean(ok.iter().filter(|r| r.scenario == Scenario::Direct).filter_map(|r| r.dice_test_mean)) {
        let _ = writeln!(out, "direct application: mean test Dice {d:.4}");
    }
    let mut sizes: Vec<usize> = ok.iter().filter_map(|r| r.target_train_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut seeds: Vec<u64> = ok.iter().filter(|r| r.scenario == Scenario::Adapted).map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let heat = Heatmap::from_records(records);
    let _ = writeln!(out, "size  scratch  best_adapted  best_freeze_per_seed");
    for &k in &sizes {
        let scratch = mean(
            ok.iter().filter(|r| r.scenario == Scenario::Scratch && r.target_train_size == Some(k)).filter_map(|r| r.dice_test_mean),
        );
        let best = heat.cells.iter().filter(|((s, _), _)| *s == k).map(|(_, &d)| d).fold(None, |a: Option<f64>, d| {
            Some(a.map_or(d, |a| a.max(d)))
        });
        let per_seed: Vec<String> = seeds
            .iter()
            .map(|&s| best_freeze(records, k, s).map_or_else(|| "-".into(), |(i, _)| i.to_string()))
            .collect();
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "{k:>4}  {:>7}  {:>12}  {}", fmt(scratch), fmt(best), per_seed.join(" "));
    }
    out
}

pub fn cmd_report(results_csv: &Path) -> Result<String> {
    Ok(report(&read_results(results_csv)?))
}
