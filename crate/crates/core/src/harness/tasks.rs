use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::mock::{self, Op, TaskQuery};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ArithEasy,
    ArithHard,
    Choice,
    Relay,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::ArithEasy,
        Category::ArithHard,
        Category::Choice,
        Category::Relay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::ArithEasy => mock::ARITH_EASY,
            Category::ArithHard => mock::ARITH_HARD,
            Category::Choice => mock::CHOICE,
            Category::Relay => mock::RELAY,
        }
    }

    pub fn difficulty(self) -> f64 {
        match self {
            Category::ArithEasy => 0.2,
            Category::ArithHard => 0.9,
            Category::Choice => 0.5,
            Category::Relay => 0.7,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task category '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub query: String,
    pub category: Category,
    pub ground_truth: String,
    pub difficulty: f64,
}

impl SyntheticTask {
    /// Task for a query in the synthetic task language; `None` if it does not parse.
    pub fn from_query(query: &str) -> Option<Self> {
        let parsed = TaskQuery::parse(query);
        let category = parsed.category()?.parse().ok()?;
        Some(Self::from_parsed(&parsed, category))
    }

    fn from_parsed(parsed: &TaskQuery, category: Category) -> Self {
        Self {
            query: parsed.to_string(),
            category,
            ground_truth: parsed.ground_truth().expect("generated tasks have an answer"),
            difficulty: category.difficulty(),
        }
    }
}

/// Answer normalization shared by evaluation: final `Answer:` line, trimmed, case-folded.
pub fn normalize(answer: &str) -> String {
    mock::extract_answer(answer).trim().to_lowercase()
}

/// Exact match after normalization.
pub fn evaluate(answer: &str, task: &SyntheticTask) -> f64 {
    if normalize(answer) == task.ground_truth.trim().to_lowercase() {
        1.0
    } else {
        0.0
    }
}

/// Number of tasks of each category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteCounts {
    #[serde(default)]
    pub arith_easy: usize,
    #[serde(default)]
    pub arith_hard: usize,
    #[serde(default)]
    pub choice: usize,
    #[serde(default)]
    pub relay: usize,
}

impl SuiteCounts {
    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::ArithEasy => self.arith_easy,
            Category::ArithHard => self.arith_hard,
            Category::Choice => self.choice,
            Category::Relay => self.relay,
        }
    }

    pub fn only(c: Category, count: usize) -> Self {
        let mut s = Self::default();
        match c {
            Category::ArithEasy => s.arith_easy = count,
            Category::ArithHard => s.arith_hard = count,
            Category::Choice => s.choice = count,
            Category::Relay => s.relay = count,
        }
        s
    }

    pub fn total(&self) -> usize {
        Category::ALL.iter().map(|&c| self.get(c)).sum()
    }
}

fn random_task(c: Category, rng: &mut Rng) -> TaskQuery {
    let int = |rng: &mut Rng, lo: i64, hi: i64| lo + rng.below((hi - lo + 1) as usize) as i64;
    match c {
        Category::ArithEasy => TaskQuery::Easy {
            a: int(rng, 1, 20),
            op: Op::Add,
            b: int(rng, 1, 20),
        },
        Category::ArithHard => {
            let start = int(rng, 1, 9);
            let steps = (0..3)
                .map(|_| match rng.below(3) {
                    0 => (Op::Add, int(rng, 1, 9)),
                    1 => (Op::Mul, int(rng, 2, 4)),
                    _ => (Op::Sub, int(rng, 1, 9)),
                })
                .collect();
            TaskQuery::Hard { start, steps }
        }
        Category::Choice => {
            let a = int(rng, 2, 12);
            let b = int(rng, 2, 12);
            let slot = rng.below(4) as i64;
            let first = a * b - slot;
            TaskQuery::Choice {
                a,
                b,
                options: [first, first + 1, first + 2, first + 3],
            }
        }
        Category::Relay => TaskQuery::Relay {
            record: int(rng, 1000, 9999) as u64,
        },
    }
}

/// Deterministic suite; categories are interleaved round-robin so that any
/// prefix mixes difficulties.
pub fn generate_suite(seed: u64, counts: SuiteCounts) -> Vec<SyntheticTask> {
    let mut rng = Rng::new(seed);
    let mut left: Vec<(Category, usize)> = Category::ALL.iter().map(|&c| (c, counts.get(c))).collect();
    let mut suite = Vec::with_capacity(counts.total());
    while left.iter().any(|(_, k)| *k > 0) {
        for (c, k) in left.iter_mut() {
            if *k > 0 {
                *k -= 1;
                suite.push(SyntheticTask::from_parsed(&random_task(*c, &mut rng), *c));
            }
        }
    }
    suite
}
