use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tasks::{evaluate, Category, SyntheticTask};
use crate::agents::{AgentSpec, AttackSpec, Embedder};
use crate::designer::{design, CommTopology, DesignerParams, Mode};
use crate::error::{Error, Result};
use crate::executor::{run_dialogue, DialogueOptions, Team, Transcript};
use crate::network::{make_anchor, AnchorKind};
use crate::numerics::{mix_seed, Rng};
use crate::trainer::{task_graph, TrainConfig};

const BENCH_STREAM: u64 = 3;
const ANCHOR_STREAM: u64 = 4;

/// Weights of the three-term protocol score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacpWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for MacpWeights {
    fn default() -> Self {
        Self {
            beta1: 0.01,
            beta2: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub tasks: usize,
    pub mean_utility: f64,
    pub mean_edges: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub tasks: usize,
    pub mean_utility: f64,
    /// Mean edge count of the executed DAGs.
    pub mean_edges: f64,
    /// Mean edge count before cycle breaking.
    pub mean_raw_edges: f64,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub macp_score: f64,
    pub robustness_drop: Option<f64>,
    pub per_category: BTreeMap<Category, CategoryStats>,
}

pub const CSV_HEADER: [&str; 10] = [
    "method",
    "tasks",
    "mean_utility",
    "mean_edges",
    "mean_raw_edges",
    "total_prompt_tokens",
    "total_completion_tokens",
    "macp_score",
    "robustness_drop",
    "per_category_edges",
];

impl BenchReport {
    /// `−utility + β1·edges + β2·drop`, an absent drop counting as zero.
    pub fn macp(mean_utility: f64, mean_edges: f64, drop: Option<f64>, w: MacpWeights) -> f64 {
        -mean_utility + w.beta1 * mean_edges + w.beta2 * drop.unwrap_or(0.0)
    }

    pub fn set_robustness_drop(&mut self, drop: f64, w: MacpWeights) {
        self.robustness_drop = Some(drop);
        self.macp_score = Self::macp(self.mean_utility, self.mean_edges, self.robustness_drop, w);
    }

    pub fn csv_row(&self) -> Vec<String> {
        let per_cat = self
            .per_category
            .iter()
            .map(|(c, s)| format!("{c}={}", s.mean_edges))
            .collect::<Vec<_>>()
            .join(";");
        vec![
            self.method.clone(),
            self.tasks.to_string(),
            self.mean_utility.to_string(),
            self.mean_edges.to_string(),
            self.mean_raw_edges.to_string(),
            self.total_prompt_tokens.to_string(),
            self.total_completion_tokens.to_string(),
            self.macp_score.to_string(),
            self.robustness_drop.map(|d| d.to_string()).unwrap_or_default(),
            per_cat,
        ]
    }

    pub fn mean_edges_for(&self, c: Category) -> Option<f64> {
        self.per_category.get(&c).map(|s| s.mean_edges)
    }

    pub fn mean_utility_for(&self, c: Category) -> Option<f64> {
        self.per_category.get(&c).map(|s| s.mean_utility)
    }
}

/// Writes reports as CSV (header plus one row each).
pub fn write_csv<W: std::io::Write>(reports: &[BenchReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in reports {
        w.write_record(r.csv_row()).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Run settings shared by every benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub options: DialogueOptions,
    pub weights: MacpWeights,
    pub seed: u64,
}

/// What produces the topology for each task.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    Baseline(AnchorKind),
    Designer {
        params: &'a DesignerParams,
        config: &'a TrainConfig,
        embedder: &'a dyn Embedder,
    },
}

impl Method<'_> {
    pub fn name(&self) -> String {
        match self {
            Method::Baseline(k) => k.name().to_string(),
            Method::Designer { .. } => "designer".to_string(),
        }
    }

    /// The topology used for task `index`, with its raw (pre cycle-break) edge count.
    pub fn topology(&self, agents: &[AgentSpec], task: &SyntheticTask, index: usize, seed: u64) -> Result<(CommTopology, usize)> {
        match *self {
            Method::Baseline(kind) => {
                let mut rng = Rng::new(mix_seed(seed, ANCHOR_STREAM)).child(index as u64);
                let anchor = make_anchor(kind, agents.len(), &mut rng)?;
                Ok((CommTopology::from_adjacency(&anchor), anchor.edge_count()))
            }
            Method::Designer {
                params,
                config,
                embedder,
            } => {
                let graph = task_graph(agents, &task.query, config.anchor, embedder, config.seed, index)?;
                let d = design(&graph, params, &config.design_config(), &mut Rng::new(0), Mode::Deterministic)?;
                let raw = d.topology.edge_count();
                Ok((d.topology, raw))
            }
        }
    }
}

/// Per-task result of a benchmark run.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub topology: CommTopology,
    pub raw_edges: usize,
    pub transcript: Transcript,
    pub utility: f64,
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, t)| f(c * chunk + k, t))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("benchmark worker panicked"))
            .collect()
    })
}

/// Runs every task of `suite` with `method` and aggregates the results.
pub fn run_method(
    method: Method<'_>,
    suite: &[SyntheticTask],
    team: &Team,
    settings: &BenchSettings,
) -> Result<(BenchReport, Vec<TaskRun>)> {
    team.validate()?;
    let base = Rng::new(mix_seed(settings.seed, BENCH_STREAM));
    let results = par_map(suite, |i, task| -> Result<TaskRun> {
        let (topology, raw_edges) = method.topology(&team.agents, task, i, settings.seed)?;
        let transcript = run_dialogue(&topology, team, &task.query, &settings.options, &mut base.child(i as u64))?;
        let utility = evaluate(&transcript.final_answer, task);
        Ok(TaskRun {
            topology,
            raw_edges,
            transcript,
            utility,
        })
    });
    let runs: Vec<TaskRun> = results.into_iter().collect::<Result<_>>()?;
    Ok((summarize(&method.name(), suite, &runs, settings.weights), runs))
}

fn summarize(method: &str, suite: &[SyntheticTask], runs: &[TaskRun], w: MacpWeights) -> BenchReport {
    let n = runs.len();
    let mean = |f: &dyn Fn(&TaskRun) -> f64| {
        if n == 0 {
            0.0
        } else {
            runs.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mean_utility = mean(&|r| r.utility);
    let mean_edges = mean(&|r| r.topology.edge_count() as f64);
    let mut per_category: BTreeMap<Category, CategoryStats> = BTreeMap::new();
    for (task, run) in suite.iter().zip(runs) {
        let s = per_category.entry(task.category).or_default();
        s.tasks += 1;
        s.mean_utility += run.utility;
        s.mean_edges += run.topology.edge_count() as f64;
    }
    for s in per_category.values_mut() {
        s.mean_utility /= s.tasks as f64;
        s.mean_edges /= s.tasks as f64;
    }
    BenchReport {
        method: method.to_string(),
        tasks: n,
        mean_utility,
        mean_edges,
        mean_raw_edges: mean(&|r| r.raw_edges as f64),
        total_prompt_tokens: runs.iter().map(|r| r.transcript.total_prompt_tokens).sum(),
        total_completion_tokens: runs.iter().map(|r| r.transcript.total_completion_tokens).sum(),
        macp_score: BenchReport::macp(mean_utility, mean_edges, None, w),
        robustness_drop: None,
        per_category,
    }
}

pub fn run_baseline(
    kind: AnchorKind,
    suite: &[SyntheticTask],
    team: &Team,
    settings: &BenchSettings,
) -> Result<BenchReport> {
    Ok(run_method(Method::Baseline(kind), suite, team, settings)?.0)
}

/// Deterministic-mode designs for every task, then dialogue and scoring.
pub fn run_designer(
    params: &DesignerParams,
    config: &TrainConfig,
    embedder: &dyn Embedder,
    suite: &[SyntheticTask],
    team: &Team,
    settings: &BenchSettings,
) -> Result<(BenchReport, Vec<TaskRun>)> {
    let method = Method::Designer {
        params,
        config,
        embedder,
    };
    run_method(method, suite, team, settings)
}

/// Runs the suite without and with `attack`. The attacked report carries
/// `robustness_drop = clean utility − attacked utility`.
pub fn run_attack(
    method: Method<'_>,
    suite: &[SyntheticTask],
    attack: &AttackSpec,
    team: &Team,
    settings: &BenchSettings,
) -> Result<(BenchReport, BenchReport)> {
    attack.validate(team.len())?;
    let mut clean_settings = settings.clone();
    clean_settings.options.attack = None;
    let (clean, _) = run_method(method, suite, team, &clean_settings)?;
    let mut attacked_settings = settings.clone();
    attacked_settings.options.attack = Some(attack.clone());
    let (mut attacked, _) = run_method(method, suite, team, &attacked_settings)?;
    attacked.method = format!("{} (attack on agent {})", clean.method, attack.target_agent);
    attacked.set_robustness_drop(clean.mean_utility - attacked.mean_utility, settings.weights);
    Ok((clean, attacked))
}
