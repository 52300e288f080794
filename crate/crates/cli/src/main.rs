use std::path::PathBuf;
use std::process::ExitCode;

use cellworld::commands::{self, RolloutSource, RunConfig};
use cellworld::scripted::ScriptedKind;
use cellworld::Error;
use clap::{Parser, Subcommand, ValueEnum};

/// Predator-prey arena: maps, training, rollouts and behavioral analysis.
#[derive(Parser, Debug)]
#[command(name = "cellworld", version)]
struct Cli {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed, overriding the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scripted {
    WallHugger,
    Dasher,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a map file (generated from the seed, or the shipped default).
    GenMap {
        #[arg(long)]
        default: bool,
    },
    /// Train an agent per seed and save checkpoints plus metrics logs.
    Train,
    /// Roll out a checkpoint greedily, or a scripted generator.
    Rollout {
        #[arg(
            long,
            required_unless_present = "scripted",
            conflicts_with = "scripted"
        )]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        scripted: Option<Scripted>,
        /// Episodes; defaults to the configured eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Output file name inside the output directory.
        #[arg(long, default_value = "trajectories.jsonl")]
        name: String,
    },
    /// Behavior reports and heatmaps for trajectory files.
    Analyze {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Trajectories whose visitation serves as the overlap reference.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Overlap, side-by-side statistics and optional policy KL for two files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, requires = "policy_b")]
        policy_a: Option<PathBuf>,
        #[arg(long, requires = "policy_a")]
        policy_b: Option<PathBuf>,
    },
    /// Chat-model prey episodes, or an offline replay of saved transcripts.
    LlmRun {
        /// Use the bundled stub endpoint.
        #[arg(long)]
        stub: bool,
        #[arg(long)]
        episodes: Option<usize>,
        /// Replay these transcripts instead of calling an endpoint.
        #[arg(long, num_args = 1..)]
        replay: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> cellworld::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let seed = cfg.seeds[0];
    let out = cfg.out.clone();
    match cli.command {
        Command::GenMap { default } => {
            let p = commands::cmd_gen_map(&cfg, seed, default, &out)?;
            println!("map {}", p.display());
        }
        Command::Train => {
            for o in commands::cmd_train(&cfg, &cfg.seeds.clone(), &out)? {
                println!(
                    "seed {} checkpoint {} log {}",
                    o.seed,
                    o.checkpoint.display(),
                    o.log.display()
                );
            }
        }
        Command::Rollout {
            checkpoint,
            scripted,
            episodes,
            name,
        } => {
            let source = match (checkpoint, scripted) {
                (Some(c), _) => RolloutSource::Checkpoint(c),
                (None, Some(Scripted::WallHugger)) => {
                    RolloutSource::Scripted(ScriptedKind::wall_hugger())
                }
                (None, Some(Scripted::Dasher)) => RolloutSource::Scripted(ScriptedKind::Dasher),
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "rollout needs --checkpoint or --scripted".into(),
                    ))
                }
            };
            let n = episodes.unwrap_or(cfg.eval_episodes);
            let p = commands::cmd_rollout(&cfg, &source, n, seed, &out, &name)?;
            println!("trajectories {}", p.display());
        }
        Command::Analyze { files, reference } => {
            let o = commands::cmd_analyze(&cfg, &files, reference.as_deref(), &out)?;
            print!(
                "{}",
                std::fs::read_to_string(&o.table).map_err(|e| Error::io(&o.table, e))?
            );
        }
        Command::Compare {
            a,
            b,
            policy_a,
            policy_b,
        } => {
            let policies = policy_a.as_deref().zip(policy_b.as_deref());
            let c = commands::cmd_compare(&cfg, &a, &b, policies, &out)?;
            print!("{}", c.to_table());
        }
        Command::LlmRun {
            stub,
            episodes,
            replay,
        } => {
            cfg.llm.stub |= stub;
            if let Some(n) = episodes {
                cfg.llm.episodes = n;
            }
            let o = commands::cmd_llm_run(&cfg, seed, &replay, &out)?;
            println!(
                "trajectories {} transcripts {} aborted {} retries {} clamped {}",
                o.trajectories.display(),
                o.transcripts.len(),
                o.aborted,
                o.retries,
                o.violations
            );
        }
    }
    Ok(())
}

fn error_line(kind: &str, msg: &str) -> String {
    format!("error: kind={kind} msg={}", serde_json_escape(msg))
}

/// Double-quoted, with quotes, backslashes and control characters escaped,
/// so the line stays single and parseable.
fn serde_json_escape(msg: &str) -> String {
    let mut s = String::with_capacity(msg.len() + 2);
    s.push('"');
    for c in msg.chars() {
        match c {
            '"' => s.push_str("\\\""),
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            c if c.is_control() => s.push_str(&format!("\\u{:04x}", c as u32)),
            c => s.push(c),
        }
    }
    s.push('"');
    s
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version requests
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
