//! Multi-round dialogue over a communication DAG.
//!
//! Each round walks the topology in a deterministic topological order. An
//! agent sees the query plus the same-round responses of its in-neighbors;
//! memory across rounds flows only through agent state. After every round
//! the responses are aggregated into that round's answer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agents::mock::extract_answer;
use crate::agents::{validate_agents, AgentResponse, AgentSpec, AttackSpec, Prompt, SharedBackend};
use crate::designer::CommTopology;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Execution order σ: every edge points forward in `order`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub order: Vec<usize>,
}

impl ExecutionPlan {
    pub fn position(&self, agent: usize) -> Option<usize> {
        self.order.iter().position(|&a| a == agent)
    }

    /// Whether `order` is a permutation that respects every edge of `topology`.
    pub fn respects(&self, topology: &CommTopology) -> bool {
        let n = topology.n;
        let mut pos = vec![usize::MAX; n];
        for (p, &a) in self.order.iter().enumerate() {
            if a >= n || pos[a] != usize::MAX {
                return false;
            }
            pos[a] = p;
        }
        self.order.len() == n && topology.edges.iter().all(|e| pos[e.from] < pos[e.to])
    }
}

/// Kahn's algorithm, lowest ready index first. A cycle is an invariant violation.
pub fn topo_order(topology: &CommTopology) -> Result<ExecutionPlan> {
    let n = topology.n;
    let mut indegree = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &topology.edges {
        if e.from >= n || e.to >= n {
            return Err(Error::Invariant(format!(
                "edge ({}, {}) outside {n} agents",
                e.from, e.to
            )));
        }
        indegree[e.to] += 1;
        out[e.from].push(e.to);
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(next) = ready.pop_first() {
        order.push(next);
        for &j in &out[next] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.insert(j);
            }
        }
    }
    if order.len() != n {
        return Err(Error::Invariant(
            "communication topology contains a cycle".into(),
        ));
    }
    Ok(ExecutionPlan { order })
}

fn system_prompt(agent: &AgentSpec) -> String {
    if agent.state.is_empty() {
        return agent.role.clone();
    }
    let mut s = format!("{}\n\nMemory:", agent.role);
    for entry in &agent.state {
        s.push_str("\n- ");
        s.push_str(entry);
    }
    s
}

fn upstream_block(agent: &AgentSpec, response: &AgentResponse) -> String {
    format!("Agent {} ({}): {}", agent.id, agent.role, response.text)
}

/// Builds the prompt for `agent`. `upstream` pairs each in-neighbor with its
/// response and must already be in execution order.
pub fn build_prompt(
    agent: &AgentSpec,
    query: &str,
    upstream: &[(&AgentSpec, &AgentResponse)],
    attack: Option<&AttackSpec>,
) -> Prompt {
    let system = match attack {
        Some(a) if a.target_agent == agent.id => a.adversarial_system_prompt.clone(),
        _ => system_prompt(agent),
    };
    let mut user = query.to_string();
    for (spec, response) in upstream {
        user.push_str("\n\n");
        user.push_str(&upstream_block(spec, response));
    }
    Prompt { system, user }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    #[default]
    MajorityVote,
    SummarizerAgent,
    LastAgent,
}

/// A non-graph agent that reads every response of a round.
#[derive(Clone)]
pub struct Summarizer {
    pub spec: AgentSpec,
    pub backend: SharedBackend,
}

/// The agents of a system with one backend per agent.
#[derive(Clone)]
pub struct Team {
    pub agents: Vec<AgentSpec>,
    pub backends: Vec<SharedBackend>,
    pub summarizer: Option<Summarizer>,
}

impl Team {
    /// Every agent shares `backend`.
    pub fn uniform(agents: Vec<AgentSpec>, backend: SharedBackend) -> Self {
        let backends = vec![backend; agents.len()];
        Self {
            agents,
            backends,
            summarizer: None,
        }
    }

    pub fn with_summarizer(mut self, summarizer: Summarizer) -> Self {
        self.summarizer = Some(summarizer);
        self
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        validate_agents(&self.agents)?;
        if self.backends.len() != self.agents.len() {
            return Err(Error::Config(format!(
                "{} backends for {} agents",
                self.backends.len(),
                self.agents.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueOptions {
    pub k_rounds: usize,
    pub strategy: AggregationStrategy,
    pub attack: Option<AttackSpec>,
}

impl Default for DialogueOptions {
    fn default() -> Self {
        Self {
            k_rounds: 3,
            strategy: AggregationStrategy::MajorityVote,
            attack: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    /// Responses of each completed round in execution order.
    pub rounds: Vec<Vec<AgentResponse>>,
    pub answers: Vec<String>,
    pub final_answer: String,
    /// Summarizer responses, one per round when a summarizer aggregates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub summaries: Vec<AgentResponse>,
    /// Responses committed in a round that failed before completing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interrupted_round: Vec<AgentResponse>,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
}

impl Transcript {
    fn all_responses(&self) -> impl Iterator<Item = &AgentResponse> {
        self.rounds
            .iter()
            .flatten()
            .chain(&self.summaries)
            .chain(&self.interrupted_round)
    }

    fn recount(&mut self) {
        let (p, c) = self.all_responses().fold((0, 0), |(p, c), r| {
            (p + r.prompt_tokens, c + r.completion_tokens)
        });
        self.total_prompt_tokens = p;
        self.total_completion_tokens = c;
    }

    /// Totals recomputed from the contained responses.
    pub fn token_sums(&self) -> (u64, u64) {
        let mut copy = self.clone();
        copy.recount();
        (copy.total_prompt_tokens, copy.total_completion_tokens)
    }
}

/// A failure inside a round: which agent failed and what was committed before it.
struct RoundFailure {
    agent_id: usize,
    committed: Vec<AgentResponse>,
    error: Error,
}

/// Runs one round. On failure, responses committed before the failing agent
/// (in execution order) are returned with the error.
fn run_round_inner(
    plan: &ExecutionPlan,
    topology: &CommTopology,
    team: &Team,
    query: &str,
    attack: Option<&AttackSpec>,
    rng: &mut Rng,
) -> std::result::Result<Vec<AgentResponse>, RoundFailure> {
    let n = team.len();
    let seeds: BTreeMap<usize, u64> = plan.order.iter().map(|&a| (a, rng.next_u64())).collect();
    let in_neighbors: Vec<Vec<usize>> = (0..n).map(|i| topology.in_neighbors(i)).collect();
    let mut done: Vec<Option<AgentResponse>> = vec![None; n];
    let mut failures: BTreeMap<usize, Error> = BTreeMap::new();

    let prompt_for = |agent: usize, done: &[Option<AgentResponse>]| {
        let mut ups: Vec<(&AgentSpec, &AgentResponse)> = Vec::new();
        for &a in &plan.order {
            if in_neighbors[agent].contains(&a) {
                let r = done[a].as_ref().expect("in-neighbors run first");
                ups.push((&team.agents[a], r));
            }
        }
        build_prompt(&team.agents[agent], query, &ups, attack)
    };

    let mut remaining: Vec<usize> = plan.order.clone();
    while !remaining.is_empty() && failures.is_empty() {
        let (ready, rest): (Vec<usize>, Vec<usize>) = remaining
            .iter()
            .partition(|&&a| in_neighbors[a].iter().all(|&u| done[u].is_some()));
        remaining = rest;
        let cap = ready
            .iter()
            .map(|&a| team.backends[a].max_in_flight())
            .min()
            .unwrap_or(1)
            .max(1);
        for chunk in ready.chunks(cap) {
            let prompts: Vec<Prompt> = chunk.iter().map(|&a| prompt_for(a, &done)).collect();
            let call = |k: usize| {
                let a = chunk[k];
                team.backends[a].respond(&team.agents[a], &prompts[k], seeds[&a])
            };
            let results: Vec<Result<AgentResponse>> = if chunk.len() == 1 {
                vec![call(0)]
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = (0..chunk.len())
                        .map(|k| scope.spawn(move || call(k)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("backend call panicked"))
                        .collect()
                })
            };
            for (&a, result) in chunk.iter().zip(results) {
                match result {
                    Ok(r) => done[a] = Some(r),
                    Err(e) => {
                        failures.insert(a, e);
                    }
                }
            }
        }
    }

    let mut committed = Vec::with_capacity(n);
    for &a in &plan.order {
        if let Some(error) = failures.remove(&a) {
            return Err(RoundFailure {
                agent_id: a,
                committed,
                error,
            });
        }
        match done[a].take() {
            Some(r) => committed.push(r),
            None => break,
        }
    }
    Ok(committed)
}

/// One round over `topology`; responses are returned in execution order.
pub fn run_round(
    topology: &CommTopology,
    team: &Team,
    query: &str,
    round_index: usize,
    attack: Option<&AttackSpec>,
    rng: &mut Rng,
) -> Result<Vec<AgentResponse>> {
    team.validate()?;
    let plan = topo_order(topology)?;
    run_round_inner(&plan, topology, team, query, attack, rng).map_err(|f| Error::Execution {
        agent_id: f.agent_id,
        round: round_index,
        partial: Box::new(Transcript {
            interrupted_round: f.committed,
            ..Transcript::default()
        }),
        source: Box::new(f.error),
    })
}

/// Trimmed, case-folded answer a response commits to.
pub fn normalize_answer(text: &str) -> String {
    extract_answer(text).trim().to_lowercase()
}

fn summarizer_prompt(summarizer: &AgentSpec, query: &str, responses: &[(&AgentSpec, &AgentResponse)]) -> Prompt {
    let mut prompt = build_prompt(summarizer, query, responses, None);
    prompt
        .user
        .push_str("\n\nCombine the answers above and state the final one on a line starting with \"Answer:\".");
    prompt
}

/// Combines one round's responses. Returns the answer text and, for the
/// summarizer strategy, the summarizer's response.
pub fn aggregate(
    responses: &[AgentResponse],
    strategy: AggregationStrategy,
    plan: &ExecutionPlan,
    team: &Team,
    query: &str,
    seed: u64,
) -> Result<(String, Option<AgentResponse>)> {
    if responses.is_empty() {
        return Err(Error::Invariant("nothing to aggregate".into()));
    }
    let in_order = |f: &mut dyn FnMut(&AgentResponse)| {
        for &a in &plan.order {
            if let Some(r) = responses.iter().find(|r| r.agent_id == a) {
                f(r);
            }
        }
    };
    match strategy {
        AggregationStrategy::MajorityVote => {
            let mut tally: Vec<(String, String, usize)> = Vec::new();
            in_order(&mut |r| {
                let raw = extract_answer(&r.text).trim().to_string();
                let key = raw.to_lowercase();
                match tally.iter_mut().find(|(k, _, _)| *k == key) {
                    Some(entry) => entry.2 += 1,
                    None => tally.push((key, raw, 1)),
                }
            });
            let best = tally.iter().map(|t| t.2).max().unwrap_or(0);
            let winner = tally.into_iter().find(|t| t.2 == best).expect("non-empty tally");
            Ok((winner.1, None))
        }
        AggregationStrategy::LastAgent => {
            let mut last = None;
            in_order(&mut |r| last = Some(r.text.clone()));
            last.map(|t| (t, None))
                .ok_or_else(|| Error::Invariant("no response from planned agents".into()))
        }
        AggregationStrategy::SummarizerAgent => {
            let s = team.summarizer.as_ref().ok_or_else(|| {
                Error::Config("summarizer_agent aggregation requires a summarizer".into())
            })?;
            let mut ups = Vec::new();
            in_order(&mut |r| ups.push(r.clone()));
            let pairs: Vec<(&AgentSpec, &AgentResponse)> =
                ups.iter().map(|r| (&team.agents[r.agent_id], r)).collect();
            let prompt = summarizer_prompt(&s.spec, query, &pairs);
            let reply = s.backend.respond(&s.spec, &prompt, seed)?;
            Ok((reply.text.clone(), Some(reply)))
        }
    }
}

/// `K` rounds with state updates between them. The caller's agents are not modified.
pub fn run_dialogue(
    topology: &CommTopology,
    team: &Team,
    query: &str,
    options: &DialogueOptions,
    rng: &mut Rng,
) -> Result<Transcript> {
    team.validate()?;
    if options.k_rounds == 0 {
        return Err(Error::Config("k_rounds must be at least 1".into()));
    }
    if topology.n != team.len() {
        return Err(Error::Config(format!(
            "topology has {} nodes for {} agents",
            topology.n,
            team.len()
        )));
    }
    if let Some(a) = &options.attack {
        a.validate(team.len())?;
    }
    let plan = topo_order(topology)?;
    let mut live = team.clone();
    let mut transcript = Transcript::default();
    for round in 0..options.k_rounds {
        let responses = match run_round_inner(&plan, topology, &live, query, options.attack.as_ref(), rng) {
            Ok(r) => r,
            Err(f) => {
                transcript.interrupted_round = f.committed;
                transcript.recount();
                return Err(Error::Execution {
                    agent_id: f.agent_id,
                    round,
                    partial: Box::new(transcript),
                    source: Box::new(f.error),
                });
            }
        };
        let seed = rng.next_u64();
        let (answer, summary) =
            match aggregate(&responses, options.strategy, &plan, &live, query, seed) {
                Ok(x) => x,
                Err(e) => {
                    transcript.rounds.push(responses);
                    transcript.recount();
                    let agent_id = live.summarizer.as_ref().map_or(usize::MAX, |s| s.spec.id);
                    return Err(Error::Execution {
                        agent_id,
                        round,
                        partial: Box::new(transcript),
                        source: Box::new(e),
                    });
                }
            };
        for r in &responses {
            live.agents[r.agent_id].remember(r.text.clone());
        }
        transcript.rounds.push(responses);
        transcript.answers.push(answer);
        transcript.summaries.extend(summary);
    }
    transcript.final_answer = transcript.answers.last().cloned().unwrap_or_default();
    transcript.recount();
    Ok(transcript)
}
