use std::path::PathBuf;
use std::sync::Arc;

use gdesigner::agents::{AgentSpec, HashEmbedder, MockAgent, Skills};
use gdesigner::designer::grad::{clamp_probs, NoiseDraw};
use gdesigner::designer::{CommTopology, DesignerParams, Dims};
use gdesigner::executor::{DialogueOptions, Team};
use gdesigner::harness::{generate_suite, run_designer, Category, RunConfig, SuiteCounts, SyntheticTask};
use gdesigner::network::AnchorKind;
use gdesigner::numerics::Rng;
use gdesigner::trainer::{
    advantages, init_params, load_checkpoint, loss_and_grad, reinforce_step, sample_episode,
    save_checkpoint, task_graph, train, Adam, Checkpoint, DialogueEnv, Environment, FrozenEpisode,
    Outcome, TrainConfig,
};
use gdesigner::Result;
use proptest::prelude::*;

fn small_dims() -> Dims {
    Dims {
        feature: 32,
        hidden: 16,
        latent: 8,
        ffn: 16,
    }
}

fn team(n: usize, skill: f64) -> Team {
    let agents = (0..n).map(|i| AgentSpec::new(i, "mock", format!("Solver {i}"))).collect();
    Team::uniform(agents, Arc::new(MockAgent::new(Skills::uniform(skill))))
}

fn config() -> TrainConfig {
    TrainConfig {
        m_samples: 4,
        k_rounds: 1,
        budget: 8,
        ..TrainConfig::default()
    }
}

fn env(n: usize, skill: f64) -> DialogueEnv {
    DialogueEnv {
        team: team(n, skill),
        options: DialogueOptions {
            k_rounds: 1,
            ..DialogueOptions::default()
        },
    }
}

fn suite() -> Vec<SyntheticTask> {
    generate_suite(3, SuiteCounts { arith_easy: 3, arith_hard: 3, choice: 3, relay: 3 })
}

fn repo_config(name: &str) -> RunConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    RunConfig::load(&path).unwrap()
}

#[test]
fn perfect_agents_earn_full_utility_and_consistent_likelihoods() {
    let embedder = HashEmbedder::new(32).unwrap();
    let env = env(4, 1.0);
    let params = init_params(small_dims(), 1);
    let cfg = config();
    for (i, task) in suite().iter().filter(|t| t.category == Category::ArithEasy).enumerate() {
        let graph = task_graph(&env.team.agents, &task.query, AnchorKind::Chain, &embedder, 1, i).unwrap();
        let ep = sample_episode(&graph, &params, &cfg, task, &env, &mut Rng::new(i as u64)).unwrap();
        assert_eq!(ep.record.utility, 1.0);
        let p = &ep.record.edge_probs;
        let mut expected = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert!(p[(a, b)] >= 1e-6 && p[(a, b)] <= 1.0 - 1e-6);
                    expected += if ep.record.sampled_edges[a][b] { p[(a, b)].ln() } else { (1.0 - p[(a, b)]).ln() };
                }
            }
        }
        assert!((ep.record.log_prob - expected).abs() < 1e-12);
        assert_eq!(ep.record.edge_probs, clamp_probs(&ep.trace.refined.s_tilde));
    }
}

/// Utility equals a fixed function of the sampled edge set.
struct EdgeCountEnv;

impl Environment for EdgeCountEnv {
    fn run(&self, _task: &SyntheticTask, topology: &CommTopology, _rng: &mut Rng) -> Result<Outcome> {
        Ok(Outcome {
            utility: (topology.edge_count() % 5) as f64 / 4.0,
            prompt_tokens: 0,
            completion_tokens: 0,
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn a_constant_shift_of_utilities_leaves_the_update_unchanged(
        quarters in proptest::collection::vec(0u8..=4, 8),
        shift in -16i32..16,
        seed in 0u64..1000,
    ) {
        // Quarters, an integer shift and M = 8 keep every sum and mean exact in binary.
        let utilities: Vec<f64> = quarters.iter().map(|&q| q as f64 / 4.0).collect();
        let shifted: Vec<f64> = utilities.iter().map(|u| u + shift as f64).collect();
        let a = advantages(&utilities, true);
        let b = advantages(&shifted, true);
        prop_assert_eq!(&a, &b);

        let embedder = HashEmbedder::new(32).unwrap();
        let agents = team(3, 1.0).agents;
        let graph = task_graph(&agents, "compute 2+3", AnchorKind::Chain, &embedder, seed, 0).unwrap();
        let params = init_params(small_dims(), seed);
        let cfg = config();
        let episodes: Vec<_> = (0..8)
            .map(|m| {
                let task = &suite()[0];
                sample_episode(&graph, &params, &cfg, task, &EdgeCountEnv, &mut Rng::new(seed).child(m)).unwrap()
            })
            .collect();
        let frozen = |adv: &[f64]| -> Vec<FrozenEpisode> {
            episodes.iter().zip(adv).map(|(e, &x)| FrozenEpisode::from_episode(e, x)).collect()
        };
        let ga = loss_and_grad(&graph, &params, &cfg.design_config(), &frozen(&a), None).unwrap();
        let gb = loss_and_grad(&graph, &params, &cfg.design_config(), &frozen(&b), None).unwrap();
        prop_assert_eq!(ga.grad, gb.grad);
        prop_assert_eq!(ga.loss.to_bits(), gb.loss.to_bits());
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>()) {
        let mut params = DesignerParams::init(small_dims(), &mut Rng::new(seed));
        params.ffn_b2 = f64::from_bits(0x3FB9_9999_9999_999A ^ (seed & 0xFF));
        let ck = Checkpoint::new(TrainConfig { seed, ..TrainConfig::default() }, params, 17);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.params.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        ck.params.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, ck);
    }
}

#[test]
fn checkpoint_files_reload_and_reject_other_versions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let ck = Checkpoint::new(TrainConfig::default(), init_params(small_dims(), 4), 3);
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
    let text = std::fs::read_to_string(&path).unwrap().replace("gdesigner-ckpt-v1", "gdesigner-ckpt-v0");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(gdesigner::Error::Version { .. })));
}

#[test]
fn parameters_stay_finite_for_a_thousand_steps() {
    let embedder = HashEmbedder::new(32).unwrap();
    let env = env(4, 0.7);
    let tasks = suite();
    let cfg = TrainConfig {
        m_samples: 4,
        k_rounds: 1,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let graphs: Vec<_> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| task_graph(&env.team.agents, &t.query, AnchorKind::Chain, &embedder, 0, i).unwrap())
        .collect();
    let mut params = init_params(small_dims(), 0);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let master = Rng::new(77);
    for step in 0..1000 {
        let i = step % tasks.len();
        let mut rng = master.child(step as u64);
        let episodes: Vec<_> = (0..cfg.m_samples)
            .map(|_| sample_episode(&graphs[i], &params, &cfg, &tasks[i], &env, &mut rng).unwrap())
            .collect();
        reinforce_step(&episodes, &graphs[i], &mut params, &cfg, &mut adam).unwrap();
        assert!(params.is_finite(), "step {step}");
    }
}

#[test]
fn training_is_reproducible_and_logs_every_query() {
    let embedder = HashEmbedder::new(32).unwrap();
    let env = env(4, 0.7);
    let run = || {
        let mut log = Vec::new();
        let out = train(&suite(), &env.team.agents, &embedder, &env, &config(), init_params(small_dims(), 2), Some(&mut log)).unwrap();
        (out, String::from_utf8(log).unwrap())
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a.params, b.params);
    assert_eq!(log_a, log_b);
    assert_eq!(a.log.len(), config().budget);
    assert_eq!(log_a.lines().count(), config().budget);
    assert_eq!(a.trained_queries, config().budget);
}

#[test]
fn deterministic_designs_ignore_the_noise_draw_shape() {
    let d = NoiseDraw::deterministic(3, 4);
    assert!(d.latent.as_slice().iter().all(|x| *x == 0.0));
    assert!(d.uniform.as_slice().iter().all(|x| *x == 0.5));
}

/// Mean designed edge count after training, averaged over five seeds.
fn mean_edges_after_training(zeta: f64) -> f64 {
    let mut cfg = repo_config("adaptive.json");
    cfg.train.zeta = zeta;
    let mut total = 0.0;
    for seed in 0..5 {
        cfg.train.seed = seed;
        let team = cfg.team().unwrap();
        let embedder = cfg.embedder().unwrap();
        let suite = cfg.suite();
        let env = DialogueEnv { team: team.clone(), options: cfg.dialogue_options() };
        let out = train(&suite, &team.agents, embedder.as_ref(), &env, &cfg.train, init_params(cfg.dims(), seed), None).unwrap();
        let (report, _) = run_designer(&out.params, &cfg.train, embedder.as_ref(), &suite, &team, &cfg.bench_settings()).unwrap();
        total += report.mean_edges;
    }
    total / 5.0
}

#[test]
fn stronger_sparsity_never_yields_denser_trained_designs() {
    let edges: Vec<f64> = [0.0, 0.1, 1.0].iter().map(|&z| mean_edges_after_training(z)).collect();
    println!("mean designed edges for zeta 0, 0.1, 1: {edges:?}");
    assert!(edges[0] >= edges[1] && edges[1] >= edges[2], "{edges:?}");
}
