//! Offline agent simulator.
//!
//! A [`MockAgent`] understands the synthetic task language below, solves a
//! task with a per-category success probability, and otherwise leans on the
//! answers it receives from upstream agents. On single-step tasks an agent
//! may also defer to what it hears before trying (its conformity), which is
//! how extra communication can hurt an otherwise independent vote. An agent
//! whose system prompt no longer carries its role has been hijacked and
//! answers with a deterministic corruption of the ground truth.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{whitespace_tokens, AgentBackend, AgentResponse, AgentSpec, Prompt};
use crate::error::Result;
use crate::numerics::Rng;

pub const ARITH_EASY: &str = "arith_easy";
pub const ARITH_HARD: &str = "arith_hard";
pub const CHOICE: &str = "choice";
pub const RELAY: &str = "relay";

pub const CATEGORIES: [&str; 4] = [ARITH_EASY, ARITH_HARD, CHOICE, RELAY];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }

    fn verb(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply by",
        }
    }
}

pub const CHOICE_LABELS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Parsed form of a synthetic query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskQuery {
    /// `compute 3+4`
    Easy { a: i64, op: Op, b: i64 },
    /// `compute in 3 steps: start with 2, add 5, multiply by 3, subtract 4`
    Hard { start: i64, steps: Vec<(Op, i64)> },
    /// `choose the value of 6*7: (A) 41 (B) 42 (C) 43 (D) 44`
    Choice {
        a: i64,
        b: i64,
        options: [i64; 4],
    },
    /// `retrieve the archive code for record 4821`
    Relay { record: u64 },
    Unknown,
}

/// Secret mapping only relay specialists know.
pub fn relay_code(record: u64) -> u64 {
    (record.wrapping_mul(7919).wrapping_add(104_729)) % 9000 + 1000
}

impl TaskQuery {
    pub fn parse(query: &str) -> TaskQuery {
        let q = query.trim();
        Self::parse_hard(q)
            .or_else(|| Self::parse_easy(q))
            .or_else(|| Self::parse_choice(q))
            .or_else(|| Self::parse_relay(q))
            .unwrap_or(TaskQuery::Unknown)
    }

    fn parse_easy(q: &str) -> Option<TaskQuery> {
        let expr = q.strip_prefix("compute ")?.trim();
        let (a, op, b) = split_binary(expr)?;
        Some(TaskQuery::Easy { a, op, b })
    }

    fn parse_hard(q: &str) -> Option<TaskQuery> {
        let rest = q.strip_prefix("compute in ")?;
        let (_, rest) = rest.split_once(" steps: start with ")?;
        let mut parts = rest.split(", ");
        let start = parts.next()?.trim().parse().ok()?;
        let mut steps = Vec::new();
        for part in parts {
            let part = part.trim();
            let (op, num) = if let Some(n) = part.strip_prefix("multiply by ") {
                (Op::Mul, n)
            } else if let Some(n) = part.strip_prefix("add ") {
                (Op::Add, n)
            } else {
                (Op::Sub, part.strip_prefix("subtract ")?)
            };
            steps.push((op, num.trim().parse().ok()?));
        }
        if steps.is_empty() {
            return None;
        }
        Some(TaskQuery::Hard { start, steps })
    }

    fn parse_choice(q: &str) -> Option<TaskQuery> {
        let rest = q.strip_prefix("choose the value of ")?;
        let (expr, opts) = rest.split_once(':')?;
        let (a, op, b) = split_binary(expr.trim())?;
        if op != Op::Mul {
            return None;
        }
        let mut options = [0i64; 4];
        let mut rest = opts.trim();
        for (i, label) in CHOICE_LABELS.iter().enumerate() {
            let tag = format!("({label}) ");
            rest = rest.strip_prefix(tag.as_str())?;
            let end = rest.find(" (").unwrap_or(rest.len());
            options[i] = rest[..end].trim().parse().ok()?;
            rest = rest[end..].trim_start();
        }
        Some(TaskQuery::Choice { a, b, options })
    }

    fn parse_relay(q: &str) -> Option<TaskQuery> {
        let record = q
            .strip_prefix("retrieve the archive code for record ")?
            .trim()
            .parse()
            .ok()?;
        Some(TaskQuery::Relay { record })
    }

    pub fn category(&self) -> Option<&'static str> {
        match self {
            TaskQuery::Easy { .. } => Some(ARITH_EASY),
            TaskQuery::Hard { .. } => Some(ARITH_HARD),
            TaskQuery::Choice { .. } => Some(CHOICE),
            TaskQuery::Relay { .. } => Some(RELAY),
            TaskQuery::Unknown => None,
        }
    }

    /// Intermediate values of a multi-step task, last one being the answer.
    pub fn step_values(&self) -> Vec<i64> {
        match self {
            TaskQuery::Hard { start, steps } => {
                let mut acc = *start;
                steps
                    .iter()
                    .map(|(op, x)| {
                        acc = op.apply(acc, *x);
                        acc
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn ground_truth(&self) -> Option<String> {
        match self {
            TaskQuery::Easy { a, op, b } => Some(op.apply(*a, *b).to_string()),
            TaskQuery::Hard { .. } => self.step_values().last().map(i64::to_string),
            TaskQuery::Choice { a, b, options } => {
                let target = a * b;
                options
                    .iter()
                    .position(|o| *o == target)
                    .map(|i| CHOICE_LABELS[i].to_string())
            }
            TaskQuery::Relay { record } => Some(relay_code(*record).to_string()),
            TaskQuery::Unknown => None,
        }
    }

    /// Deterministic wrong answer: numbers shifted by one, options rotated by one.
    pub fn corrupted_answer(&self) -> String {
        match (self, self.ground_truth()) {
            (TaskQuery::Choice { .. }, Some(label)) => {
                let i = CHOICE_LABELS
                    .iter()
                    .position(|c| label.starts_with(*c))
                    .unwrap_or(0);
                CHOICE_LABELS[(i + 1) % 4].to_string()
            }
            (_, Some(gt)) => match gt.parse::<i64>() {
                Ok(v) => (v + 1).to_string(),
                Err(_) => format!("not {gt}"),
            },
            (_, None) => "unknown".to_string(),
        }
    }
}

impl fmt::Display for TaskQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskQuery::Easy { a, op, b } => write!(f, "compute {a}{}{b}", op.symbol()),
            TaskQuery::Hard { start, steps } => {
                write!(f, "compute in {} steps: start with {start}", steps.len())?;
                for (op, x) in steps {
                    write!(f, ", {} {x}", op.verb())?;
                }
                Ok(())
            }
            TaskQuery::Choice { a, b, options } => {
                write!(f, "choose the value of {a}*{b}:")?;
                for (label, v) in CHOICE_LABELS.iter().zip(options) {
                    write!(f, " ({label}) {v}")?;
                }
                Ok(())
            }
            TaskQuery::Relay { record } => {
                write!(f, "retrieve the archive code for record {record}")
            }
            TaskQuery::Unknown => write!(f, "unknown task"),
        }
    }
}

fn split_binary(expr: &str) -> Option<(i64, Op, i64)> {
    // Skip index 0 so a leading minus sign belongs to the first operand.
    let (idx, op) = expr
        .char_indices()
        .skip(1)
        .find_map(|(i, c)| match c {
            '+' => Some((i, Op::Add)),
            '-' => Some((i, Op::Sub)),
            '*' => Some((i, Op::Mul)),
            _ => None,
        })?;
    let a = expr[..idx].trim().parse().ok()?;
    let b = expr[idx + 1..].trim().parse().ok()?;
    Some((a, op, b))
}

/// Extracts the answer a response commits to: the last `Answer:` line if any,
/// else the last whitespace token.
pub fn extract_answer(text: &str) -> String {
    for line in text.lines().rev() {
        if let Some(idx) = line.find("Answer:") {
            return line[idx + "Answer:".len()..].trim().to_string();
        }
    }
    text.split_whitespace().last().unwrap_or("").to_string()
}

fn extract_progress(text: &str) -> Option<usize> {
    text.lines().find_map(|l| {
        l.trim()
            .strip_prefix("Progress: ")
            .and_then(|p| p.split('/').next())
            .and_then(|k| k.trim().parse().ok())
    })
}

/// Per-category probability of solving a task unaided, plus how readily an
/// agent defers to the answers it hears on single-step tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skills {
    #[serde(default)]
    pub by_category: BTreeMap<String, f64>,
    #[serde(default = "default_skill")]
    pub default: f64,
    /// Probability of adopting the upstream plurality instead of working the
    /// task out, per category. Missing categories never defer.
    #[serde(default)]
    pub conformity: BTreeMap<String, f64>,
}

fn default_skill() -> f64 {
    0.5
}

impl Skills {
    pub fn uniform(p: f64) -> Self {
        Self {
            by_category: BTreeMap::new(),
            default: p,
            conformity: BTreeMap::new(),
        }
    }

    pub fn with_conformity(mut self, category: &str, p: f64) -> Self {
        self.conformity.insert(category.to_string(), p);
        self
    }

    pub fn conformity(&self, category: &str) -> f64 {
        self.conformity.get(category).copied().unwrap_or(0.0)
    }

    pub fn with(mut self, category: &str, p: f64) -> Self {
        self.by_category.insert(category.to_string(), p);
        self
    }

    pub fn get(&self, category: &str) -> f64 {
        self.by_category
            .get(category)
            .copied()
            .unwrap_or(self.default)
    }
}

impl Default for Skills {
    fn default() -> Self {
        Self::uniform(default_skill())
    }
}

/// Upstream block as it appears in a user prompt.
struct Upstream<'a> {
    text: &'a str,
}

fn split_user_prompt(user: &str) -> (&str, Vec<Upstream<'_>>) {
    let mut blocks = user.split("\n\n");
    let query = blocks.next().unwrap_or("");
    let upstream = blocks
        .filter(|b| b.starts_with("Agent "))
        .map(|text| Upstream { text })
        .collect();
    (query, upstream)
}

/// Most frequent answer; ties go to the one seen first.
fn plurality<'a>(answers: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for a in answers {
        match counts.iter_mut().find(|(x, _)| *x == a) {
            Some((_, c)) => *c += 1,
            None => counts.push((a, 1)),
        }
    }
    let best = counts.iter().map(|(_, c)| *c).max()?;
    counts
        .into_iter()
        .find(|(_, c)| *c == best)
        .map(|(a, _)| a.to_string())
}

/// Deterministic simulated agent; see the module docs for the behavior model.
#[derive(Debug, Clone, Default)]
pub struct MockAgent {
    pub skills: Skills,
}

impl MockAgent {
    pub fn new(skills: Skills) -> Self {
        Self { skills }
    }

    pub fn perfect() -> Self {
        Self::new(Skills::uniform(1.0))
    }

    fn wrong_guess(task: &TaskQuery, rng: &mut Rng) -> String {
        match task {
            TaskQuery::Choice { .. } => {
                let gt = task.ground_truth().unwrap_or_default();
                let wrong: Vec<char> = CHOICE_LABELS
                    .iter()
                    .copied()
                    .filter(|c| !gt.starts_with(*c))
                    .collect();
                wrong[rng.below(wrong.len())].to_string()
            }
            TaskQuery::Relay { .. } | TaskQuery::Unknown => "unknown".to_string(),
            _ => {
                let gt: i64 = task
                    .ground_truth()
                    .and_then(|g| g.parse().ok())
                    .unwrap_or(0);
                let offsets = [-3, -2, -1, 2, 3, 4];
                (gt + offsets[rng.below(offsets.len())]).to_string()
            }
        }
    }

    fn decide(
        &self,
        agent: &AgentSpec,
        prompt: &Prompt,
        seed: u64,
    ) -> (String, Option<(usize, usize)>) {
        let (query, upstream) = split_user_prompt(&prompt.user);
        let task = TaskQuery::parse(query);
        let hijacked = !prompt.system.contains(agent.role.as_str());
        let mut rng = Rng::new(seed);

        if let TaskQuery::Hard { steps, .. } = &task {
            let total = steps.len();
            if hijacked {
                return (task.corrupted_answer(), Some((total, total)));
            }
            return self.advance_multi_step(&task, &upstream, &mut rng);
        }

        if hijacked {
            return (task.corrupted_answer(), None);
        }
        let heard: Vec<String> = upstream
            .iter()
            .map(|u| extract_answer(u.text))
            .filter(|a| !a.is_empty() && a != "unknown")
            .collect();
        let consensus = plurality(heard.iter().map(String::as_str));
        let conformity = task.category().map_or(0.0, |c| self.skills.conformity(c));
        if let Some(c) = &consensus {
            if conformity > 0.0 && rng.uniform() < conformity {
                return (c.clone(), None);
            }
        }
        let skill = task.category().map_or(0.0, |c| self.skills.get(c));
        let solved = rng.uniform() < skill;
        let answer = match (solved, task.ground_truth()) {
            (true, Some(gt)) => gt,
            _ => consensus.unwrap_or_else(|| Self::wrong_guess(&task, &mut rng)),
        };
        (answer, None)
    }

    /// Each successful agent performs one more step on the furthest upstream progress.
    fn advance_multi_step(
        &self,
        task: &TaskQuery,
        upstream: &[Upstream<'_>],
        rng: &mut Rng,
    ) -> (String, Option<(usize, usize)>) {
        let TaskQuery::Hard { start, steps } = task else {
            unreachable!()
        };
        let total = steps.len();
        let mut best: Option<(usize, i64)> = None;
        for u in upstream {
            let Some(progress) = extract_progress(u.text) else {
                continue;
            };
            let Ok(value) = extract_answer(u.text).parse::<i64>() else {
                continue;
            };
            if best.is_none_or(|(p, _)| progress > p) {
                best = Some((progress.min(total), value));
            }
        }
        let solved = rng.uniform() < self.skills.get(ARITH_HARD);
        let (done, value) = best.unwrap_or((0, *start));
        if solved && done < total {
            let (op, x) = steps[done];
            let next = op.apply(value, x);
            return (next.to_string(), Some((done + 1, total)));
        }
        if done > 0 {
            return (value.to_string(), Some((done, total)));
        }
        (Self::wrong_guess(task, rng), Some((0, total)))
    }
}

impl AgentBackend for MockAgent {
    fn respond(&self, agent: &AgentSpec, prompt: &Prompt, seed: u64) -> Result<AgentResponse> {
        let (answer, progress) = self.decide(agent, prompt, seed);
        let (_, upstream) = split_user_prompt(&prompt.user);
        let mut text = format!("As the {}, I worked through the task", agent.role);
        if !upstream.is_empty() {
            text.push_str(&format!(
                " and weighed {} message(s) from other agents",
                upstream.len()
            ));
        }
        text.push('.');
        if let Some((done, total)) = progress {
            text.push_str(&format!("\nProgress: {done}/{total}"));
        }
        text.push_str(&format!("\nAnswer: {answer}"));
        Ok(AgentResponse {
            agent_id: agent.id,
            prompt_tokens: whitespace_tokens(&prompt.system) + whitespace_tokens(&prompt.user),
            completion_tokens: whitespace_tokens(&text),
            text,
        })
    }

    fn max_in_flight(&self) -> usize {
        1
    }
}
