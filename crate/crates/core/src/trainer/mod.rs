//! Policy-gradient training of the designer.
//!
//! For each training query the designer is sampled `M` times. Every sample
//! draws a concrete edge set from the refined probabilities, runs a dialogue
//! over it and scores the final answer. One update then follows the
//! score-function estimator of the expected utility, plus the gradients of
//! the anchor and sparsity regularizers evaluated on the deterministic design.

mod adam;
mod checkpoint;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::agents::{AgentSpec, Embedder};
use crate::designer::grad::{
    backward, clamp_probs, forward, mask_log_prob, regularizers, NoiseDraw, Trace, Upstream,
};
use crate::designer::{CommTopology, DesignConfig, DesignerParams, Dims, Edge};
use crate::error::{Error, Result};
use crate::executor::{run_dialogue, DialogueOptions, Team, Transcript};
use crate::harness::{evaluate, SyntheticTask};
use crate::network::{build_task_graph, AdjacencyMatrix, AnchorKind, TaskGraph};
use crate::numerics::{mix_seed, Matrix, Rng};

const INIT_STREAM: u64 = 0;
const QUERY_STREAM: u64 = 1;
const GRAPH_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "m")]
    pub m_samples: usize,
    #[serde(rename = "k")]
    pub k_rounds: usize,
    pub tau: f64,
    pub zeta: f64,
    pub threshold: f64,
    /// `None` selects ⌈N/2⌉.
    #[serde(rename = "rank")]
    pub rank_r: Option<usize>,
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub budget: usize,
    pub seed: u64,
    pub baseline: bool,
    pub anchor: AnchorKind,
    #[serde(rename = "beta1")]
    pub beta1_cost: f64,
    #[serde(rename = "beta2")]
    pub beta2_robust: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m_samples: 10,
            k_rounds: 3,
            tau: 0.01,
            zeta: 0.1,
            threshold: 0.5,
            rank_r: None,
            learning_rate: 0.01,
            budget: 40,
            seed: 0,
            baseline: true,
            anchor: AnchorKind::Chain,
            beta1_cost: 0.01,
            beta2_robust: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn design_config(&self) -> DesignConfig {
        DesignConfig {
            tau: self.tau,
            zeta: self.zeta,
            threshold: self.threshold,
            rank: self.rank_r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_samples == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.k_rounds == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.design_config().validate()
    }
}

/// Glorot initialization drawn from the run seed.
pub fn init_params(dims: Dims, seed: u64) -> DesignerParams {
    DesignerParams::init(dims, &mut Rng::new(mix_seed(seed, INIT_STREAM)))
}

/// Task graph for `task_index` of a suite; the anchor draw (random anchors
/// only) depends on the seed and the index.
pub fn task_graph(
    agents: &[AgentSpec],
    query: &str,
    anchor: AnchorKind,
    embedder: &dyn Embedder,
    seed: u64,
    task_index: usize,
) -> Result<TaskGraph> {
    let mut rng = Rng::new(mix_seed(seed, GRAPH_STREAM)).child(task_index as u64);
    build_task_graph(agents, query, anchor, embedder, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Outcome {
    pub utility: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Scores a topology on a task.
pub trait Environment: Sync {
    fn run(&self, task: &SyntheticTask, topology: &CommTopology, rng: &mut Rng) -> Result<Outcome>;
}

/// Runs a dialogue and scores its final answer with the exact-match evaluator.
pub struct DialogueEnv {
    pub team: Team,
    pub options: DialogueOptions,
}

impl DialogueEnv {
    pub fn transcript(&self, task: &SyntheticTask, topology: &CommTopology, rng: &mut Rng) -> Result<Transcript> {
        run_dialogue(topology, &self.team, &task.query, &self.options, rng)
    }
}

impl Environment for DialogueEnv {
    fn run(&self, task: &SyntheticTask, topology: &CommTopology, rng: &mut Rng) -> Result<Outcome> {
        let t = self.transcript(task, topology, rng)?;
        Ok(Outcome {
            utility: evaluate(&t.final_answer, task),
            prompt_tokens: t.total_prompt_tokens,
            completion_tokens: t.total_completion_tokens,
        })
    }
}

/// Edge mask as rows of booleans.
pub type EdgeMask = Vec<Vec<bool>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub sampled_edges: EdgeMask,
    /// Clamped refined probabilities the mask was drawn from.
    pub edge_probs: Matrix,
    pub utility: f64,
    pub log_prob: f64,
    /// Edges left after cycle breaking.
    pub dag_edges: usize,
}

/// An episode together with its forward trace.
#[derive(Debug, Clone)]
pub struct Episode {
    pub record: EpisodeRecord,
    pub noise: NoiseDraw,
    pub trace: Trace,
}

/// Draws one Bernoulli edge per ordered pair, row-major.
pub fn sample_mask(probs: &Matrix, rng: &mut Rng) -> EdgeMask {
    let n = probs.rows();
    (0..n)
        .map(|i| (0..n).map(|j| i != j && rng.bernoulli(probs[(i, j)])).collect())
        .collect()
}

/// DAG over the masked edges, weighted by their probabilities.
pub fn mask_topology(probs: &Matrix, mask: &EdgeMask) -> CommTopology {
    let n = probs.rows();
    let mut edges = Vec::new();
    for (i, row) in mask.iter().enumerate() {
        for (j, &on) in row.iter().enumerate() {
            if on {
                edges.push(Edge {
                    from: i,
                    to: j,
                    weight: probs[(i, j)],
                });
            }
        }
    }
    CommTopology::from_candidates(n, edges).expect("masked edges are well-formed")
}

pub fn sample_episode(
    graph: &TaskGraph,
    params: &DesignerParams,
    config: &TrainConfig,
    task: &SyntheticTask,
    env: &dyn Environment,
    rng: &mut Rng,
) -> Result<Episode> {
    let n = graph.n_agents();
    let noise = NoiseDraw::sample(n, params.dims().latent, rng);
    let trace = forward(graph, params, &config.design_config(), &noise, None)?;
    let probs = trace.edge_probs();
    let mask = sample_mask(&probs, rng);
    let topology = mask_topology(&probs, &mask);
    let outcome = env.run(task, &topology, rng)?;
    let log_prob = mask_log_prob(&probs, &mask);
    if !log_prob.is_finite() {
        return Err(Error::Numeric("episode log-likelihood is not finite".into()));
    }
    Ok(Episode {
        record: EpisodeRecord {
            sampled_edges: mask,
            edge_probs: probs,
            utility: outcome.utility,
            log_prob,
            dag_edges: topology.edge_count(),
        },
        noise,
        trace,
    })
}

/// `(l_anchor, l_sparse)` for a sketch and its refinement.
pub fn compute_losses(
    s: &Matrix,
    refined: &crate::designer::RefinedMatrix,
    anchor: &AdjacencyMatrix,
    zeta: f64,
) -> Result<(f64, f64)> {
    let st = &refined.s_tilde;
    let l_anchor = 0.5 * s.sub(st).frobenius_sq() + 0.5 * anchor.matrix().sub(st).frobenius_sq();
    Ok((l_anchor, zeta * crate::numerics::nuclear_norm(&refined.w)?))
}

/// Utilities minus their mean when `baseline` is set.
pub fn advantages(utilities: &[f64], baseline: bool) -> Vec<f64> {
    if !baseline || utilities.is_empty() {
        return utilities.to_vec();
    }
    // Constant rewards carry no signal; keep them exactly zero despite rounding in the mean.
    if utilities.iter().all(|u| *u == utilities[0]) {
        return vec![0.0; utilities.len()];
    }
    let mean = utilities.iter().sum::<f64>() / utilities.len() as f64;
    utilities.iter().map(|u| u - mean).collect()
}

/// One sampled design with everything random held fixed: the noise, the
/// low-rank basis and the drawn mask.
#[derive(Debug, Clone)]
pub struct FrozenEpisode {
    pub noise: NoiseDraw,
    pub basis: Matrix,
    pub mask: EdgeMask,
    pub advantage: f64,
}

impl FrozenEpisode {
    pub fn from_episode(ep: &Episode, advantage: f64) -> Self {
        Self {
            noise: ep.noise.clone(),
            basis: ep.trace.basis().clone(),
            mask: ep.record.sampled_edges.clone(),
            advantage,
        }
    }
}

/// Value and gradient of the training loss
/// `−(1/M)·Σ advantage_m·log P_m + l_anchor + l_sparse`.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub l_anchor: f64,
    pub l_sparse: f64,
    pub grad: DesignerParams,
}

/// Evaluates the loss at `params`. The regularizers use the deterministic
/// design; its basis is recomputed unless `det_basis` is given.
pub fn loss_and_grad(
    graph: &TaskGraph,
    params: &DesignerParams,
    config: &DesignConfig,
    episodes: &[FrozenEpisode],
    det_basis: Option<&Matrix>,
) -> Result<LossEval> {
    let n = graph.n_agents();
    let m = episodes.len().max(1) as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for ep in episodes {
        let trace = forward(graph, params, config, &ep.noise, Some(&ep.basis))?;
        let probs = clamp_probs(&trace.refined.s_tilde);
        loss -= ep.advantage * mask_log_prob(&probs, &ep.mask) / m;
        if ep.advantage != 0.0 {
            let up = Upstream::log_prob(&trace, &ep.mask, -ep.advantage / m);
            grad.axpy(1.0, &backward(&trace, params, &up)?);
        }
    }
    let det_noise = NoiseDraw::deterministic(n, params.dims().latent);
    let det = forward(graph, params, config, &det_noise, det_basis)?;
    let (l_anchor, l_sparse) = regularizers(&det, &graph.anchor);
    grad.axpy(1.0, &backward(&det, params, &Upstream::regularizers(&det, &graph.anchor))?);
    loss += l_anchor + l_sparse;
    Ok(LossEval {
        loss,
        l_anchor,
        l_sparse,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub l_anchor: f64,
    pub l_sparse: f64,
}

/// One update from the episodes of a single query. On a non-finite gradient
/// the parameters are left untouched.
pub fn reinforce_step(
    episodes: &[Episode],
    graph: &TaskGraph,
    params: &mut DesignerParams,
    config: &TrainConfig,
    optimizer: &mut Adam,
) -> Result<StepReport> {
    if episodes.is_empty() {
        return Err(Error::Config("reinforce step needs at least one episode".into()));
    }
    let utilities: Vec<f64> = episodes.iter().map(|e| e.record.utility).collect();
    let adv = advantages(&utilities, config.baseline);
    let frozen: Vec<FrozenEpisode> = episodes
        .iter()
        .zip(&adv)
        .map(|(e, &a)| FrozenEpisode::from_episode(e, a))
        .collect();
    let eval = loss_and_grad(graph, params, &config.design_config(), &frozen, None)?;
    if !eval.grad.is_finite() {
        return Err(Error::NonFiniteGradient("reinforce step".into()));
    }
    optimizer.step(params, &eval.grad);
    if !params.is_finite() {
        return Err(Error::NonFiniteGradient("parameters after update".into()));
    }
    Ok(StepReport {
        l_anchor: eval.l_anchor,
        l_sparse: eval.l_sparse,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub query_index: usize,
    pub mean_utility: f64,
    pub mean_edges: f64,
    pub l_anchor: f64,
    pub l_sparse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DesignerParams,
    pub log: Vec<TrainLogRecord>,
    pub trained_queries: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint::new(config.clone(), self.params.clone(), self.trained_queries)
    }
}

fn run_episodes(
    graph: &TaskGraph,
    params: &DesignerParams,
    config: &TrainConfig,
    task: &SyntheticTask,
    env: &dyn Environment,
    query_rng: &Rng,
) -> Vec<Result<Episode>> {
    let run = |m: usize| {
        let mut rng = query_rng.child(m as u64);
        sample_episode(graph, params, config, task, env, &mut rng)
    };
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.m_samples)
            .map(|m| scope.spawn(move || run(m)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("episode worker panicked"))
            .collect()
    })
}

/// Cycles through `tasks` for `config.budget` queries, one update per query.
/// Each log record is also written as a JSON line to `log_sink` if given.
pub fn train(
    tasks: &[SyntheticTask],
    agents: &[AgentSpec],
    embedder: &dyn Embedder,
    env: &dyn Environment,
    config: &TrainConfig,
    mut params: DesignerParams,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.validate()?;
    if tasks.is_empty() && config.budget > 0 {
        return Err(Error::Config("training needs at least one task".into()));
    }
    let graphs: Vec<TaskGraph> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| task_graph(agents, &t.query, config.anchor, embedder, config.seed, i))
        .collect::<Result<_>>()?;
    let mut optimizer = Adam::new(&params, config.learning_rate);
    let master = Rng::new(mix_seed(config.seed, QUERY_STREAM));
    let mut log = Vec::with_capacity(config.budget);
    let mut trained = 0;
    for q in 0..config.budget {
        let idx = q % tasks.len();
        let (task, graph) = (&tasks[idx], &graphs[idx]);
        let results = run_episodes(graph, &params, config, task, env, &master.child(q as u64));
        let mut episodes = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(e) => episodes.push(e),
                Err(e) => log::warn!("query {q}: dropping failed episode: {e}"),
            }
        }
        let mut record = TrainLogRecord {
            query_index: q,
            mean_utility: 0.0,
            mean_edges: 0.0,
            l_anchor: 0.0,
            l_sparse: 0.0,
            skipped: None,
        };
        if episodes.is_empty() {
            record.skipped = Some("every episode failed".into());
        } else {
            let m = episodes.len() as f64;
            record.mean_utility = episodes.iter().map(|e| e.record.utility).sum::<f64>() / m;
            record.mean_edges = episodes.iter().map(|e| e.record.dag_edges as f64).sum::<f64>() / m;
            match reinforce_step(&episodes, graph, &mut params, config, &mut optimizer) {
                Ok(s) => {
                    record.l_anchor = s.l_anchor;
                    record.l_sparse = s.l_sparse;
                    trained += 1;
                }
                Err(e @ (Error::NonFiniteGradient(_) | Error::Numeric(_))) => {
                    log::warn!("query {q}: skipping update: {e}");
                    record.skipped = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(sink) = log_sink.as_deref_mut() {
            writeln!(sink, "{}", serde_json::to_string(&record)?)?;
        }
        log::debug!(
            "query {q}: utility {:.3}, edges {:.2}",
            record.mean_utility,
            record.mean_edges
        );
        log.push(record);
    }
    Ok(TrainOutcome {
        params,
        log,
        trained_queries: trained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designer::{RefinedMatrix};

    #[test]
    fn loss_examples() {
        let a = AdjacencyMatrix::from_edges(2, &[(0, 1)]).unwrap();
        let refined = RefinedMatrix {
            s_tilde: a.matrix().clone(),
            z: Matrix::identity(2),
            w: a.matrix().clone(),
            rank_r: 2,
        };
        let (la, _) = compute_losses(a.matrix(), &refined, &a, 0.1).unwrap();
        assert_eq!(la, 0.0);
        let refined = RefinedMatrix {
            s_tilde: Matrix::zeros(2, 2),
            z: Matrix::identity(2),
            w: Matrix::diag(&[1.0, 2.0]),
            rank_r: 2,
        };
        let (_, ls) = compute_losses(&Matrix::zeros(2, 2), &refined, &AdjacencyMatrix::empty(2), 0.1).unwrap();
        assert!((ls - 0.3).abs() < 1e-12);
    }

    #[test]
    fn baseline_cancels_constant_rewards() {
        assert_eq!(advantages(&[0.7, 0.7, 0.7], true), vec![0.0, 0.0, 0.0]);
        let a = advantages(&[1.0, 0.0, 0.5], true);
        let b = advantages(&[4.0, 3.0, 3.5], true);
        assert_eq!(a, b);
        assert_eq!(advantages(&[1.0, 0.0], false), vec![1.0, 0.0]);
    }

    #[test]
    fn empty_refinement_has_near_zero_likelihood() {
        let probs = clamp_probs(&Matrix::zeros(3, 3));
        let mask = sample_mask(&probs, &mut Rng::new(0));
        assert!(mask.iter().flatten().all(|e| !e));
        let lp = mask_log_prob(&probs, &mask);
        assert!(lp <= 0.0 && lp > -1e-4);
        assert_eq!(mask_topology(&probs, &mask).edge_count(), 0);
    }

    #[test]
    fn config_defaults_and_schema() {
        let c = TrainConfig::default();
        assert_eq!((c.m_samples, c.k_rounds, c.budget), (10, 3, 40));
        assert_eq!((c.tau, c.zeta), (0.01, 0.1));
        let parsed: TrainConfig = serde_json::from_str(r#"{"m": 4, "lr": 0.05, "rank": 2}"#).unwrap();
        assert_eq!(parsed.m_samples, 4);
        assert_eq!(parsed.rank_r, Some(2));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = TrainConfig {
            m_samples: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
