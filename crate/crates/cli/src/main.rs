use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gdesigner::designer::{design, CommTopology, DesignerParams, Mode};
use gdesigner::executor::run_dialogue;
use gdesigner::harness::{
    export_dot, run_attack, run_baseline, run_designer, to_dot, write_csv, BenchReport, Method,
    RunConfig,
};
use gdesigner::network::AnchorKind;
use gdesigner::numerics::Rng;
use gdesigner::trainer::{
    init_params, load_checkpoint, save_checkpoint, task_graph, train, DialogueEnv, TrainConfig,
};

#[derive(Parser)]
#[command(name = "gdesigner", version, about = "Design, train and benchmark multi-agent communication topologies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to read (or, for `train`, to write).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query text for single-query commands.
    #[arg(long)]
    query: Option<String>,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the designer on the configured suite and save a checkpoint.
    Train(Common),
    /// Design a topology for one query and print it as JSON.
    Design(Common),
    /// Design a topology for one query, run the dialogue and print the answer.
    Run(Common),
    /// Benchmark the designer against every fixed topology.
    Bench(Common),
    /// Measure the utility drop under an adversarial agent.
    Attack(Common),
    /// Write the designed topology for one query as Graphviz DOT.
    ExportDot(Common),
}

struct Session {
    config: RunConfig,
    common: Common,
}

impl Session {
    fn open(common: Common) -> Result<Self> {
        let mut config = RunConfig::load(&common.config)
            .with_context(|| format!("loading {}", common.config.display()))?;
        if let Some(seed) = common.seed {
            config.train.seed = seed;
        }
        Ok(Self { config, common })
    }

    fn query(&self) -> Result<&str> {
        match &self.common.query {
            Some(q) => Ok(q),
            None => bail!("this command needs --query"),
        }
    }

    /// Parameters and training configuration: from the checkpoint if one is
    /// given, otherwise a fresh initialization under the configured seed.
    fn designer(&self) -> Result<(DesignerParams, TrainConfig)> {
        let path = self.common.checkpoint.as_ref().or(self.config.output.checkpoint.as_ref());
        match path {
            Some(p) if p.exists() => {
                let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
                let mut train = ck.config;
                if let Some(seed) = self.common.seed {
                    train.seed = seed;
                }
                Ok((ck.params, train))
            }
            Some(p) if self.common.checkpoint.is_some() => {
                bail!("checkpoint {} does not exist", p.display())
            }
            _ => {
                log::info!("no checkpoint; using freshly initialized parameters");
                Ok((init_params(self.config.dims(), self.config.train.seed), self.config.train.clone()))
            }
        }
    }

    fn design_one(&self) -> Result<CommTopology> {
        let (params, train) = self.designer()?;
        let embedder = self.config.embedder()?;
        let graph = task_graph(
            &self.config.agent_specs(),
            self.query()?,
            train.anchor,
            embedder.as_ref(),
            train.seed,
            0,
        )?;
        let d = design(&graph, &params, &train.design_config(), &mut Rng::new(0), Mode::Deterministic)?;
        Ok(d.topology)
    }

    fn report_dir(&self) -> Option<PathBuf> {
        self.common.out.clone().or_else(|| self.config.output.report_dir.clone())
    }
}

fn write_reports(dir: Option<&Path>, stem: &str, reports: &[BenchReport]) -> Result<()> {
    write_csv(reports, std::io::stdout().lock())?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(reports)? + "\n")?;
        write_csv(reports, fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        log::info!("wrote {} and {stem}.csv", json.display());
    }
    Ok(())
}

fn cmd_train(s: &Session) -> Result<()> {
    let c = &s.config;
    let team = c.team()?;
    let embedder = c.embedder()?;
    let env = DialogueEnv {
        team: team.clone(),
        options: c.dialogue_options(),
    };
    let params = init_params(c.dims(), c.train.seed);
    let log_path = s.common.out.clone().or_else(|| c.output.train_log.clone());
    let mut log_file = match &log_path {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let sink = log_file.as_mut().map(|f| f as &mut dyn Write);
    let out = train(&c.suite(), &team.agents, embedder.as_ref(), &env, &c.train, params, sink)?;
    let path = s
        .common
        .checkpoint
        .clone()
        .or_else(|| c.output.checkpoint.clone())
        .unwrap_or_else(|| PathBuf::from("checkpoint.json"));
    save_checkpoint(&path, &out.checkpoint(&c.train))?;
    let skipped = out.log.iter().filter(|r| r.skipped.is_some()).count();
    println!(
        "trained {} queries ({} skipped); checkpoint written to {}",
        out.trained_queries,
        skipped,
        path.display()
    );
    Ok(())
}

fn cmd_design(s: &Session) -> Result<()> {
    let topology = s.design_one()?;
    println!("{}", serde_json::to_string_pretty(&topology)?);
    if let Some(out) = &s.common.out {
        export_dot(&topology, &s.config.agent_specs(), out)?;
    }
    Ok(())
}

fn cmd_run(s: &Session) -> Result<()> {
    let topology = s.design_one()?;
    let team = s.config.team()?;
    let mut rng = Rng::new(s.config.train.seed);
    let transcript = run_dialogue(&topology, &team, s.query()?, &s.config.dialogue_options(), &mut rng)?;
    println!("{}", transcript.final_answer);
    log::info!(
        "{} edges, {} prompt tokens, {} completion tokens",
        topology.edge_count(),
        transcript.total_prompt_tokens,
        transcript.total_completion_tokens
    );
    if let Some(out) = &s.common.out {
        fs::write(out, serde_json::to_string_pretty(&transcript)? + "\n")?;
    }
    Ok(())
}

fn cmd_bench(s: &Session) -> Result<()> {
    let c = &s.config;
    let team = c.team()?;
    let suite = c.suite();
    let settings = c.bench_settings();
    let mut reports = Vec::with_capacity(AnchorKind::ALL.len() + 1);
    for kind in AnchorKind::ALL {
        reports.push(run_baseline(kind, &suite, &team, &settings)?);
    }
    let (params, train) = s.designer()?;
    let embedder = c.embedder()?;
    let (report, runs) = run_designer(&params, &train, embedder.as_ref(), &suite, &team, &settings)?;
    reports.push(report);
    let dir = s.report_dir();
    write_reports(dir.as_deref(), "bench", &reports)?;
    if let Some(dir) = dir {
        let agents = c.agent_specs();
        let dots = dir.join("topologies");
        fs::create_dir_all(&dots)?;
        for (i, run) in runs.iter().enumerate() {
            fs::write(dots.join(format!("task_{i:03}.dot")), to_dot(&run.topology, &agents))?;
        }
    }
    Ok(())
}

fn cmd_attack(s: &Session) -> Result<()> {
    let c = &s.config;
    let team = c.team()?;
    let suite = c.suite();
    let settings = c.bench_settings();
    let target = c.attack.as_ref().map_or(0, |a| a.target_agent);
    let attack = c.attack_spec(target)?;
    let (params, train) = s.designer()?;
    let embedder = c.embedder()?;
    let designer = Method::Designer {
        params: &params,
        config: &train,
        embedder: embedder.as_ref(),
    };
    let mut reports = Vec::new();
    for method in [Method::Baseline(AnchorKind::Chain), Method::Baseline(AnchorKind::Complete), designer] {
        let (clean, attacked) = run_attack(method, &suite, &attack, &team, &settings)?;
        reports.push(clean);
        reports.push(attacked);
    }
    write_reports(s.report_dir().as_deref(), "attack", &reports)
}

fn cmd_export_dot(s: &Session) -> Result<()> {
    let Some(out) = &s.common.out else {
        bail!("export-dot needs --out");
    };
    let topology = s.design_one()?;
    export_dot(&topology, &s.config.agent_specs(), out)?;
    println!("wrote {} ({} edges)", out.display(), topology.edge_count());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, run): (Common, fn(&Session) -> Result<()>) = match cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::Design(c) => (c, cmd_design),
        Command::Run(c) => (c, cmd_run),
        Command::Bench(c) => (c, cmd_bench),
        Command::Attack(c) => (c, cmd_attack),
        Command::ExportDot(c) => (c, cmd_export_dot),
    };
    run(&Session::open(common)?)
}
