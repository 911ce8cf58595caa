//! Weight transfer, shallow-layer freezing and fine-tuning, and the three
//! evaluation scenarios on the target domain.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_flip, sample_patches, DomainDataset, PatchSet, Volume};
use crate::error::{Error, Result};
use crate::infer::{evaluate, roc_auc, to_fcn};
use crate::nn::{build_network, predict, NetworkSpec, ParamSet};
use crate::train::{fit, FitOutcome, TrainConfig};

/// Freeze the shallowest `freeze_count` of `depth` layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransferPlan {
    freeze_count: usize,
    depth: usize,
}

impl TransferPlan {
    pub fn new(freeze_count: usize, depth: usize) -> Result<Self> {
        if freeze_count > depth {
            return Err(Error::param(format!("freeze index {freeze_count} is outside [0, {depth}]")));
        }
        Ok(TransferPlan { freeze_count, depth })
    }

    pub fn freeze_count(&self) -> usize {
        self.freeze_count
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

/// How a model came to be.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelProvenance {
    SourceTrained,
    ScratchTarget,
    /// Fine-tuned from a source checkpoint identified by `source`.
    Adapted { source: String, plan: TransferPlan },
}

impl fmt::Display for ModelProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelProvenance::SourceTrained => f.write_str("source_trained"),
            ModelProvenance::ScratchTarget => f.write_str("scratch_target"),
            ModelProvenance::Adapted { source, plan } => {
                write!(f, "adapted source={source} freeze={}/{}", plan.freeze_count, plan.depth)
            }
        }
    }
}

impl FromStr for ModelProvenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed provenance {s:?}"));
        match s {
            "source_trained" => Ok(ModelProvenance::SourceTrained),
            "scratch_target" => Ok(ModelProvenance::ScratchTarget),
            _ => {
                let rest = s.strip_prefix("adapted source=").ok_or_else(bad)?;
                let (source, plan) = rest.rsplit_once(" freeze=").ok_or_else(bad)?;
                let (i, d) = plan.split_once('/').ok_or_else(bad)?;
                let plan = TransferPlan::new(i.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)?;
                Ok(ModelProvenance::Adapted { source: source.to_string(), plan })
            }
        }
    }
}

/// Deep copy of a source model for fine-tuning, with freeze flags cleared.
pub fn transfer_weights(source: &ParamSet<f32>, spec: &NetworkSpec) -> Result<ParamSet<f32>> {
    let differing = source.shape_mismatches(spec);
    if !differing.is_empty() || source.spec() != spec {
        return Err(Error::Compatibility(format!(
            "source parameters differ from the network spec at layers {differing:?}"
        )));
    }
    let mut copy = source.clone();
    copy.clear_frozen();
    Ok(copy)
}

/// Marks layers `1..=i` frozen and the rest trainable.
pub fn apply_freeze(params: &ParamSet<f32>, plan: TransferPlan) -> Result<ParamSet<f32>> {
    if plan.depth != params.depth() {
        return Err(Error::param(format!(
            "plan is for depth {}, network has {} layers",
            plan.depth,
            params.depth()
        )));
    }
    let mut out = params.clone();
    for layer in 0..out.depth() {
        out.set_frozen(layer, layer < plan.freeze_count);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub outcome: FitOutcome,
    pub provenance: ModelProvenance,
}

/// Transfer, freeze the shallowest layers, and fine-tune on target data.
pub fn adapt(
    source: &ParamSet<f32>,
    source_ref: &str,
    target_train: &PatchSet,
    target_val: &PatchSet,
    plan: TransferPlan,
    config: &TrainConfig,
) -> Result<AdaptedModel> {
    let params = apply_freeze(&transfer_weights(source, source.spec())?, plan)?;
    let outcome = fit(&params, target_train, target_val, config)?;
    Ok(AdaptedModel { outcome, provenance: ModelProvenance::Adapted { source: source_ref.to_string(), plan } })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    /// The source model applied to target data unchanged.
    Direct = 1,
    /// A fresh network trained on target data only.
    Scratch = 2,
    /// The source model fine-tuned on target data.
    Adapted = 3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Direct, Scenario::Scratch, Scenario::Adapted];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.number() == n)
            .ok_or_else(|| Error::param(format!("scenario must be 1, 2 or 3, got {n}")))
    }
}

/// One unit of work in a scenario sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub scenario: Scenario,
    pub size: Option<usize>,
    pub freeze: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub scenario: Scenario,
    /// Number of target training patients; absent for direct application.
    pub target_train_size: Option<usize>,
    /// Freeze index; present for adapted runs only.
    pub freeze_index: Option<usize>,
    pub seed: u64,
    pub dice_test_mean: f64,
    pub dice_test_pooled: f64,
    pub val_auc: f64,
    pub epochs_run: usize,
    pub wall_time: f64,
    /// Target patient ids whose patches were used for training.
    pub train_patients: Vec<u32>,
}

/// Shared inputs of every scenario cell.
#[derive(Debug, Clone)]
pub struct ScenarioContext<'a> {
    pub source: &'a ParamSet<f32>,
    pub source_ref: String,
    pub target: &'a DomainDataset,
    pub config: TrainConfig,
    pub positive_fraction: f64,
    pub threshold: f64,
}

/// Cells of a scenario in canonical order: scenario 1 has one per seed,
/// scenario 2 one per (size, seed), scenario 3 one per (size, freeze, seed).
pub fn cells(scenario: Scenario, sizes: &[usize], freeze: &[usize], seeds: &[u64]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in seeds {
        match scenario {
            Scenario::Direct => out.push(Cell { scenario, size: None, freeze: None, seed }),
            Scenario::Scratch => {
                out.extend(sizes.iter().map(|&k| Cell { scenario, size: Some(k), freeze: None, seed }))
            }
            Scenario::Adapted => {
                for &k in sizes {
                    out.extend(freeze.iter().map(|&i| Cell { scenario, size: Some(k), freeze: Some(i), seed }));
                }
            }
        }
    }
    out
}

/// Target training patients in the seeded nested order: the size-k subset
/// is the first k entries.
pub fn nested_order(target: &DomainDataset, seed: u64) -> Vec<u32> {
    let mut ids: Vec<u32> = target.train().iter().map(Volume::patient_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Patches of one volume, drawn from a stream fixed by (seed, patient).
pub fn volume_patches(volume: &Volume, positive_fraction: f64, seed: u64) -> Result<PatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(volume.patient_id() as u64 + 1);
    sample_patches(volume, positive_fraction, &mut rng)
}

/// Flip-augmented training patches of `volumes`.
pub fn training_patches(volumes: &[&Volume], positive_fraction: f64, seed: u64) -> Result<PatchSet> {
    let sets = volumes
        .iter()
        .map(|v| volume_patches(v, positive_fraction, seed).map(|s| augment_flip(&s)))
        .collect::<Result<Vec<_>>>()?;
    PatchSet::concat(&sets)
}

/// Validation patches of `volumes`, not augmented.
pub fn validation_patches(volumes: &[&Volume], positive_fraction: f64, seed: u64) -> Result<PatchSet> {
    let sets = volumes
        .iter()
        .map(|v| volume_patches(v, positive_fraction, seed))
        .collect::<Result<Vec<_>>>()?;
    PatchSet::concat(&sets)
}

fn patch_auc(params: &ParamSet<f32>, set: &PatchSet) -> Result<f64> {
    let probs = predict(params, set.patches())?;
    let scores: Vec<f64> = probs.data().chunks_exact(2).map(|p| p[1] as f64).collect();
    roc_auc(&scores, set.labels())
}

/// Runs one cell to completion. Each call owns its model copy.
pub fn run_cell(ctx: &ScenarioContext<'_>, cell: Cell) -> Result<RunResult> {
    let started = Instant::now();
    let target = ctx.target;
    let val_volumes: Vec<&Volume> = target.val().iter().collect();
    let val = validation_patches(&val_volumes, ctx.positive_fraction, cell.seed)?;
    let config = TrainConfig { seed: cell.seed, ..ctx.config.clone() };

    let (model, val_auc, epochs_run, train_patients) = match cell.scenario {
        Scenario::Direct => {
            let auc = patch_auc(ctx.source, &val)?;
            (ctx.source.clone(), auc, 0, Vec::new())
        }
        Scenario::Scratch | Scenario::Adapted => {
            let k = cell.size.ok_or_else(|| Error::param("scenarios 2 and 3 need a training size"))?;
            let order = nested_order(target, cell.seed);
            if k == 0 || k > order.len() {
                return Err(Error::param(format!(
                    "training size {k} is outside 1..={} available target patients",
                    order.len()
                )));
            }
            let chosen: Vec<u32> = order[..k].to_vec();
            let volumes: Vec<&Volume> = chosen
                .iter()
                .map(|id| target.train().iter().find(|v| v.patient_id() == *id).expect("id from train split"))
                .collect();
            let train = training_patches(&volumes, ctx.positive_fraction, cell.seed)?;
            let outcome = if cell.scenario == Scenario::Scratch {
                let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
                let init = build_network(ctx.source.spec(), &mut rng)?;
                fit(&init, &train, &val, &config)?
            } else {
                let i = cell.freeze.ok_or_else(|| Error::param("scenario 3 needs a freeze index"))?;
                let plan = TransferPlan::new(i, ctx.source.depth())?;
                adapt(ctx.source, &ctx.source_ref, &train, &val, plan, &config)?.outcome
            };
            let epochs = outcome.epochs_run();
            (outcome.best, outcome.best_val_auc, epochs, chosen)
        }
    };
    let fcn = to_fcn(&model)?;
    let dice = evaluate(&fcn, target.test(), ctx.threshold)?;
    Ok(RunResult {
        scenario: cell.scenario,
        target_train_size: cell.size.filter(|_| cell.scenario != Scenario::Direct),
        freeze_index: cell.freeze.filter(|_| cell.scenario == Scenario::Adapted),
        seed: cell.seed,
        dice_test_mean: dice.mean,
        dice_test_pooled: dice.pooled,
        val_auc,
        epochs_run,
        wall_time: started.elapsed().as_secs_f64(),
        train_patients,
    })
}

/// Runs every cell of a scenario sequentially, in canonical order.
pub fn run_scenario(
    ctx: &ScenarioContext<'_>,
    scenario: Scenario,
    sizes: &[usize],
    freeze_grid: &[usize],
    seeds: &[u64],
) -> Result<Vec<RunResult>> {
    let available = ctx.target.train().len();
    if let Some(&k) = sizes.iter().find(|&&k| k == 0 || k > available) {
        if scenario != Scenario::Direct {
            return Err(Error::param(format!("training size {k} is outside 1..={available} available patients")));
        }
    }
    cells(scenario, sizes, freeze_grid, seeds).into_iter().map(|c| run_cell(ctx, c)).collect()
}
