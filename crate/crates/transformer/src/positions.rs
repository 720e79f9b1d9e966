//! Train every integration position over several seeds and rank them.

use std::cmp::Ordering;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use pdelab_core::stats::mean_std;

use crate::error::{Error, Result};
use crate::model::{IntegrationPosition, Model, ModelConfig};
use crate::tasks::TaskDataset;
use crate::train::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub positions: Vec<IntegrationPosition>,
    /// Start every diffusion layer at the identity limit and keep it frozen.
    pub identity_limit: bool,
    /// Worker threads; 1 runs everything on the calling thread.
    pub jobs: usize,
}

impl ProtocolConfig {
    pub fn new(model: ModelConfig, train: TrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            model,
            train,
            seeds,
            positions: IntegrationPosition::ALL.to_vec(),
            identity_limit: false,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub position: IntegrationPosition,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
    /// Final validation accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub cfl_violations: usize,
    pub param_count: usize,
}

impl RankingRow {
    pub fn overlaps(&self, other: &RankingRow) -> bool {
        self.mean - self.std <= other.mean + other.std && other.mean - other.std <= self.mean + self.std
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    /// Descending by mean accuracy; ties broken by position name.
    pub rows: Vec<RankingRow>,
    pub majority_baseline: f64,
}

impl RankingTable {
    pub fn baseline(&self) -> Option<&RankingRow> {
        self.rows.iter().find(|r| r.position == IntegrationPosition::None)
    }

    /// Whether every row lies within one standard deviation of the baseline row.
    pub fn all_overlap_baseline(&self) -> bool {
        self.baseline().is_some_and(|b| self.rows.iter().all(|r| r.overlaps(b)))
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "rank,position,mean_acc,std_acc,seeds,cfl_violations,params")?;
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(
                out,
                "{},{},{:.12e},{:.12e},{},{},{}",
                i + 1,
                r.position,
                r.mean,
                r.std,
                r.accuracies.len(),
                r.cfl_violations,
                r.param_count
            )?;
        }
        Ok(())
    }
}

/// Sorts descending by mean, then ascending by position name.
pub fn sort_rows(rows: &mut [RankingRow]) {
    rows.sort_by(|a, b| {
        b.mean
            .partial_cmp(&a.mean)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.position.as_str().cmp(b.position.as_str()))
    });
}

fn run_one(
    cfg: &ProtocolConfig,
    dataset: &TaskDataset,
    position: IntegrationPosition,
    seed: u64,
) -> Result<(TrainReport, usize)> {
    let mut mc = cfg.model.clone();
    mc.position = position;
    mc.seed = seed;
    if cfg.identity_limit {
        mc.pde.identity_limit = true;
        mc.pde.post_norm = false;
    }
    let mut model = Model::new(mc)?;
    let tc = TrainConfig {
        seed,
        freeze_pde: cfg.train.freeze_pde || cfg.identity_limit,
        ..cfg.train.clone()
    };
    let report = train(&mut model, dataset, &tc)?;
    Ok((report, model.param_count()))
}

type Slot = Mutex<Option<Result<(TrainReport, usize)>>>;

/// Trains each position once per seed; results do not depend on `jobs`.
pub fn evaluate_positions(cfg: &ProtocolConfig, dataset: &TaskDataset) -> Result<RankingTable> {
    if cfg.seeds.len() < 3 {
        return Err(Error::Config(format!("need at least 3 seeds, got {}", cfg.seeds.len())));
    }
    if cfg.positions.is_empty() {
        return Err(Error::Config("no positions to evaluate".into()));
    }
    let tasks: Vec<(IntegrationPosition, u64)> = cfg
        .positions
        .iter()
        .flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Vec<Slot> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, AtomicOrdering::Relaxed);
        let Some(&(p, s)) = tasks.get(i) else { break };
        let r = run_one(cfg, dataset, p, s);
        *results[i].lock().expect("worker panicked") = Some(r);
    };
    if cfg.jobs <= 1 {
        work();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..cfg.jobs.min(tasks.len()) {
                scope.spawn(work);
            }
        });
    }
    let mut results = results
        .into_iter()
        .map(|m| m.into_inner().expect("worker panicked").expect("every task ran"));
    let mut rows = Vec::with_capacity(cfg.positions.len());
    for &position in &cfg.positions {
        let mut accuracies = Vec::with_capacity(cfg.seeds.len());
        let mut cfl_violations = 0;
        let mut param_count = 0;
        for _ in &cfg.seeds {
            let (report, params) = results.next().expect("one result per task")?;
            accuracies.push(report.final_val_acc());
            cfl_violations += report.cfl_violations();
            param_count = params;
        }
        let (mean, std) = mean_std(&accuracies);
        rows.push(RankingRow {
            position,
            mean,
            std,
            accuracies,
            cfl_violations,
            param_count,
        });
    }
    sort_rows(&mut rows);
    Ok(RankingTable {
        rows,
        majority_baseline: dataset.majority_baseline(),
    })
}
