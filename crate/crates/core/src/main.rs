use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use signal_lab::agents::Algorithm;
use signal_lab::harness::{
    evaluate, flow_census, load_config, read_records, run_seeds, write_census_plots,
    write_indicator_plots, write_records, write_trace, write_training_log, HarnessError,
    ScenarioConfig,
};

#[derive(Parser)]
#[command(
    name = "signal-lab",
    version,
    about = "Multi-agent traffic signal control experiments on a grid simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the fixed-time controller once per seed, without learning.
    Simulate(Common),
    /// Train the chosen algorithm over every seed and write results.csv.
    Train(Common),
    /// Greedy rollout of a checkpoint (or of fresh networks) per seed.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train` (e.g. out/checkpoints/seed_42).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Paired blocked and unblocked flow censuses under fixed-time control.
    Census {
        #[command(flatten)]
        common: Common,
        /// Edges to chart; defaults to the edges closed by the scenario.
        #[arg(long, value_delimiter = ',')]
        edges: Vec<String>,
    },
    /// Draw one SVG per indicator from results CSV files.
    Plot {
        /// `label=path` or plain `path` (label taken from the file stem).
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON scenario file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: normal, peak or block.
    #[arg(long)]
    preset: Option<String>,
    /// Single seed (overrides the config's seed list).
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    episodes: Option<usize>,
    /// fixed, ippo, mappo, idqn or maclight.
    #[arg(long)]
    algo: Option<String>,
    /// Override the scenario's vehicle count.
    #[arg(long)]
    vehicles: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn scenario(&self) -> Result<ScenarioConfig, HarnessError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(p), _) => load_config(p)?,
            (None, Some(name)) => ScenarioConfig::preset(name)?,
            (None, None) => ScenarioConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if let Some(a) = &self.algo {
            cfg.algorithm = a.parse().map_err(|e: String| HarnessError::Config(e))?;
        }
        if let Some(v) = self.vehicles {
            cfg.total_vehicles = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn train(c: &Common, simulate: bool) -> Result<(), HarnessError> {
    let mut cfg = c.scenario()?;
    if simulate {
        cfg.algorithm = Algorithm::Fixed;
        if c.episodes.is_none() {
            cfg.episodes = 1;
        }
    }
    log::info!(
        "{} on {:?}: {} episodes, seeds {:?}",
        cfg.algorithm,
        cfg.name,
        cfg.episodes,
        cfg.seeds
    );
    let runs = run_seeds(&cfg)?;
    let records: Vec<_> = runs
        .iter()
        .flat_map(|r| r.records.iter().cloned())
        .collect();
    let csv_path = c.out.join("results.csv");
    write_records(&records, create(&csv_path)?)?;
    for r in &runs {
        if let Some(last) = r.stats.last() {
            write_trace(
                &last.trace,
                create(&c.out.join(format!("trace_seed_{}.csv", r.seed)))?,
            )?;
        }
    }
    if !simulate {
        write_training_log(&runs, create(&c.out.join("training_log.jsonl"))?)?;
        for r in &runs {
            let dir = c.out.join("checkpoints").join(format!("seed_{}", r.seed));
            r.agents.save(&dir)?;
            if !r.agents.latent_trace.rows.is_empty() {
                let f = create(&c.out.join(format!("latent_seed_{}.csv", r.seed)))?;
                r.agents.latent_trace.write_csv(f)?;
            }
        }
    }
    let label = cfg.algorithm.to_string();
    write_indicator_plots(&c.out.join("plots"), &[(label, records.clone())])?;
    let n = cfg.seeds.len() as f64;
    let last: f64 = records
        .iter()
        .filter(|r| r.episode + 1 == cfg.episodes)
        .map(|r| r.ret)
        .sum::<f64>()
        / n;
    println!(
        "wrote {} ({} rows); final-episode mean return {last:.4}",
        csv_path.display(),
        records.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Simulate(c) => train(&c, true),
        Cmd::Train(c) => train(&c, false),
        Cmd::Evaluate { common, checkpoint } => {
            let cfg = common.scenario()?;
            let rep = evaluate(&cfg, checkpoint.as_deref())?;
            let p = common.out.join("eval.csv");
            write_records(&rep.per_seed, create(&p)?)?;
            for r in &rep.per_seed {
                println!("seed {}: return {:.4}", r.seed, r.ret);
            }
            println!("mean return {:.4}", rep.mean_return);
            Ok(())
        }
        Cmd::Census { common, edges } => {
            let cfg = common.scenario()?;
            let seed = cfg.seeds[0];
            let census = flow_census(&cfg, seed)?;
            census.write_csv(create(&common.out.join("census.csv"))?)?;
            let edges = if edges.is_empty() {
                let mut e: Vec<String> = census
                    .windows
                    .iter()
                    .flat_map(|w| w.0.iter().cloned())
                    .collect();
                e.dedup();
                e
            } else {
                edges
            };
            let files = write_census_plots(&common.out, &census, &edges)?;
            println!(
                "wrote census.csv and {} plots to {}",
                files.len(),
                common.out.display()
            );
            Ok(())
        }
        Cmd::Plot { inputs, out } => {
            let mut series = Vec::new();
            for s in inputs {
                let (label, path) = match s.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(&s);
                        (
                            p.file_stem()
                                .map(|x| x.to_string_lossy().into_owned())
                                .unwrap_or(s),
                            p,
                        )
                    }
                };
                let recs = read_records(&path)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                series.push((label, recs));
            }
            let files = write_indicator_plots(&out, &series)?;
            println!("wrote {} plots to {}", files.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // help and version land here too
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
