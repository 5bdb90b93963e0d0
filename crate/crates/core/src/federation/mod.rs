//! Round-based federated training.
//!
//! Each round every node runs `T` local epochs, uploads the entries its
//! strategy shares, and receives their dataset-size-weighted average back.
//! Nodes train concurrently but never share mutable state, and the server
//! reduces in ascending node order, so results do not depend on the worker
//! count.

mod aggregate;
mod config;
mod optim;
mod strategy;
mod train;

use std::time::Instant;

use rayon::prelude::*;

pub use aggregate::aggregate;
pub use config::FederationConfig;
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig, Grads};
pub use strategy::Strategy;
pub use train::{local_train, node_stream, predict_samples, stack_images, NodeState, TrainOutcome};

use crate::error::{Error, Result};
use crate::metrics::{comm_fraction, evaluate, summarize, GlobalMetrics, MetricsReport};
use crate::model::init_params;
use crate::synthdata::{FederationData, KeyFrameSample};

const EVAL_CHUNK: usize = 50;

/// Outcome of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    /// Zero-based.
    pub round: usize,
    pub train_loss: Vec<f64>,
    /// Per-node test metrics, present on evaluation rounds.
    pub node_metrics: Option<Vec<MetricsReport>>,
    pub global: Option<GlobalMetrics>,
    pub bytes_up: Vec<usize>,
    pub bytes_down: Vec<usize>,
    /// Wall-clock duration of the round.
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub nodes: Vec<NodeState>,
}

/// Local datasets for `strategy`: the pooled data as a single node for
/// `Joint`, otherwise one set per node.
fn node_datasets(cfg: &FederationConfig, data: &FederationData) -> Result<Vec<Vec<KeyFrameSample>>> {
    if data.nodes.len() != cfg.nodes {
        return Err(Error::Config(format!("config expects {} nodes, data has {}", cfg.nodes, data.nodes.len())));
    }
    Ok(match cfg.strategy {
        Strategy::Joint => vec![data.pooled()],
        _ => data.nodes.clone(),
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Evaluates every node's current model on `test`.
pub fn evaluate_nodes(
    cfg: &FederationConfig,
    nodes: &[NodeState],
    test: &[KeyFrameSample],
    workers: usize,
) -> Result<Vec<MetricsReport>> {
    let gts: Vec<_> = test.iter().map(|s| s.gt.clone()).collect();
    pool(workers)?.install(|| {
        nodes
            .par_iter()
            .map(|n| {
                let preds = predict_samples(n, &cfg.model, test, EVAL_CHUNK)?;
                let comm = comm_fraction(cfg.strategy, &n.params, cfg.backbone_excludes_norm);
                evaluate(&preds, &gts, &cfg.thresholds, comm)
            })
            .collect()
    })
}

/// Runs `cfg.rounds` rounds over `data` on `workers` threads.
pub fn run(cfg: &FederationConfig, data: &FederationData, workers: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let sets = node_datasets(cfg, data)?;
    if sets.iter().any(Vec::is_empty) || data.test.is_empty() {
        return Err(Error::Config("every node and the test set need at least one sample".into()));
    }
    let init = init_params(&cfg.model, cfg.seed)?;
    let mut nodes: Vec<NodeState> =
        (0..sets.len()).map(|i| NodeState::new(init.clone(), &cfg.model, node_stream(cfg.seed, i))).collect();
    let weights: Vec<f64> = sets.iter().map(|s| s.len() as f64).collect();
    let pool = pool(workers)?;

    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let outcomes: Vec<TrainOutcome> = pool.install(|| {
            nodes.par_iter_mut().zip(&sets).map(|(n, d)| local_train(n, d, cfg, cfg.epochs)).collect::<Result<_>>()
        })?;

        let bytes_up: Vec<usize> =
            nodes.iter().map(|n| cfg.strategy.payload_bytes(&n.params, cfg.backbone_excludes_norm)).collect();
        let trees: Vec<_> = nodes.iter().map(|n| n.params.clone()).collect();
        let merged = aggregate(cfg.strategy, &trees, &weights, cfg.backbone_excludes_norm)?;
        for (n, t) in nodes.iter_mut().zip(merged) {
            n.params = t;
        }
        let bytes_down: Vec<usize> =
            nodes.iter().map(|n| cfg.strategy.payload_bytes(&n.params, cfg.backbone_excludes_norm)).collect();

        let evaluate_now = (round + 1) % cfg.eval_every == 0 || round + 1 == cfg.rounds;
        let node_metrics = if evaluate_now { Some(evaluate_nodes(cfg, &nodes, &data.test, workers)?) } else { None };
        let global = node_metrics.as_deref().map(summarize);
        reports.push(RoundReport {
            round,
            train_loss: outcomes.iter().map(|o| o.mean_loss).collect(),
            node_metrics,
            global,
            bytes_up,
            bytes_down,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(RunOutput { reports, nodes })
}
