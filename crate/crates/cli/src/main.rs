use anyhow::{Context, Result};
use boxbench_core::canon;
use boxbench_core::dataset::{emit_dataset, CommandParaphraser, DatasetConfig, ParaphraseProvider};
use boxbench_core::harness::{
    evaluate_suite, replay, run_episode, sample_episode, EpisodeRecord, ExternalConfig,
    ExternalPolicy, HarnessError, Policy, PolicyError, PolicySpec, SamplerConfig, SuiteConfig,
};
use boxbench_core::metrics::{ablation_delta, MetricsReport};
use boxbench_core::oracle::oracle_rollout;
use boxbench_core::perception::{synthesize_cloud, CloudConfig};
use boxbench_core::scene_gen::{generate_scene, SceneConfig};
use boxbench_core::tasks::TaskVariant;
use boxbench_core::warehouse::ExecutionMode;
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_PROTOCOL: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_USAGE: u8 = 64;
const EXIT_VALIDATION: u8 = 65;

/// Deterministic benchmark for language-conditioned box rearrangement.
#[derive(Parser, Debug)]
#[command(name = "boxbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Snap,
    Freeform,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<ExecutionMode> {
        match self {
            ModeArg::Snap => vec![ExecutionMode::SnapToTarget],
            ModeArg::Freeform => vec![ExecutionMode::FreeForm],
            ModeArg::Both => vec![ExecutionMode::SnapToTarget, ExecutionMode::FreeForm],
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate one scene and print its canonical JSON.
    GenScene {
        #[arg(long)]
        seed: Option<u64>,
        /// TOML scene config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        boxes: Option<u32>,
        /// Write the scene here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the labeled point cloud of the scene.
        #[arg(long)]
        cloud: Option<PathBuf>,
    },
    /// Emit a supervision dataset from oracle rollouts.
    GenDataset {
        #[arg(long)]
        seed: Option<u64>,
        /// TOML dataset config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<u32>,
        /// Skip binary point clouds.
        #[arg(long)]
        no_clouds: bool,
        /// Shell command that rewrites a goal text read from stdin into up
        /// to three lines on stdout.
        #[arg(long)]
        paraphrase_cmd: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Sample one episode and run the oracle on it.
    OracleRollout {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "basic-placement")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, value_enum, default_value = "snap")]
        mode: ModeArg,
        /// Write the episode record here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a policy over the scenario grid and print the report.
    Evaluate {
        #[arg(long)]
        seed: Option<u64>,
        /// TOML suite config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// oracle | noisy:<p> | random-valid | external:<command>
        #[arg(long, default_value = "oracle")]
        policy: String,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        /// Scenes per variant.
        #[arg(short = 'n', long = "scenes")]
        scenes: Option<u32>,
        /// Comma-separated variant names; default all.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        no_one_step: bool,
        /// Write report.json and episodes.ndjson here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Print the canonical JSON report instead of the table.
        #[arg(long)]
        json: bool,
        /// Send ground-truth labels to an external policy (marks it privileged).
        #[arg(long)]
        external_labels: bool,
        /// Exchange clouds with an external policy through files in this directory.
        #[arg(long)]
        cloud_dir: Option<PathBuf>,
    },
    /// Re-execute logged episodes and verify every digest.
    Replay {
        /// Episode record JSON, or NDJSON with one record per line.
        record: PathBuf,
    },
    /// Print a stored report, or the difference of two.
    Report {
        report: PathBuf,
        /// Baseline report; prints `report - against` in percentage points.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

/// Input that parsed but is not acceptable.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return EXIT_VALIDATION;
        }
        let protocol = matches!(
            cause.downcast_ref::<PolicyError>(),
            Some(PolicyError::Protocol(_))
        ) || matches!(
            cause.downcast_ref::<HarnessError>(),
            Some(HarnessError::Policy(PolicyError::Protocol(_)))
        );
        if protocol {
            return EXIT_PROTOCOL;
        }
    }
    EXIT_RUNTIME
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// One line on stderr that pins down what produced the output.
fn header<T: Serialize>(command: &str, seed: u64, config: &T) -> Result<String> {
    let line = format!(
        "# boxbench {} {command} seed={seed} config-sha256={}",
        env!("CARGO_PKG_VERSION"),
        canon::digest(config)?
    );
    eprintln!("{line}");
    Ok(line)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn parse_variant(name: &str) -> Result<TaskVariant> {
    TaskVariant::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = TaskVariant::ALL.iter().map(|v| v.name()).collect();
        invalid(format!(
            "unknown variant {name:?}; expected one of {}",
            known.join(", ")
        ))
    })
}

fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(invalid("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    Ok(())
}

fn build_policy(spec: &str, external: ExternalConfig) -> Result<Box<dyn Policy>> {
    let spec: PolicySpec = spec.parse().map_err(invalid)?;
    Ok(match spec {
        PolicySpec::External(cmd) => Box::new(ExternalPolicy::spawn(&cmd, external)?),
        other => other.build()?,
    })
}

fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(one) = serde_json::from_str::<EpisodeRecord>(&text) {
        return Ok(vec![one]);
    }
    BufReader::new(text.as_bytes())
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(n, l)| {
            serde_json::from_str(&l?)
                .map_err(|e| invalid(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenScene {
            seed,
            config,
            boxes,
            out,
            cloud,
        } => {
            let mut cfg: SceneConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = boxes {
                cfg.num_boxes = b;
            }
            header("gen-scene", cfg.seed, &cfg)?;
            let scene = generate_scene(&cfg).map_err(|e| invalid(e.to_string()))?;
            if let Some(path) = cloud {
                let c = synthesize_cloud(&scene, &CloudConfig::default(), cfg.seed);
                let f = fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                c.write_binary(std::io::BufWriter::new(f))?;
            }
            write_or_print(out.as_deref(), &canon::to_line(&scene)?)
        }
        Cmd::GenDataset {
            seed,
            config,
            out,
            episodes,
            no_clouds,
            paraphrase_cmd,
            workers,
        } => {
            init_workers(workers)?;
            let mut cfg: DatasetConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = episodes {
                cfg.episodes = e;
            }
            if no_clouds {
                cfg.write_clouds = false;
            }
            header("gen-dataset", cfg.seed, &cfg)?;
            let provider = paraphrase_cmd.map(|command| CommandParaphraser { command });
            let manifest = emit_dataset(
                &cfg,
                &out,
                provider.as_ref().map(|p| p as &dyn ParaphraseProvider),
            )?;
            let c = manifest.counts;
            println!(
                "wrote {} episodes, {} samples ({} action, {} auxiliary, {} terminal, {} paraphrase; {} train / {} test) to {}",
                manifest.episodes.len(),
                c.total,
                c.action,
                c.auxiliary,
                c.terminal,
                c.paraphrase,
                c.train,
                c.test,
                out.display()
            );
            Ok(())
        }
        Cmd::OracleRollout {
            seed,
            variant,
            index,
            mode,
            out,
            json,
        } => {
            let variant = parse_variant(&variant)?;
            let modes = mode.modes();
            if modes.len() != 1 {
                return Err(invalid(
                    "oracle-rollout takes --mode snap or --mode freeform",
                ));
            }
            let spec = sample_episode(seed, index, variant, &SamplerConfig::default())?;
            header("oracle-rollout", seed, &spec)?;
            let record = run_episode(
                &spec,
                &boxbench_core::harness::OraclePolicy,
                modes[0],
                &Default::default(),
            )?;
            if let Some(p) = &out {
                fs::write(p, canon::to_line(&record)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if json {
                print!("{}", canon::to_line(&record)?);
            } else {
                let plan = oracle_rollout(&spec.task, &spec.scene()?)?;
                println!("goal: {}", spec.task.prompt());
                println!(
                    "boxes: {}  outcome: {}",
                    spec.num_boxes(),
                    record.outcome.name()
                );
                for (t, s) in plan.steps.iter().enumerate() {
                    println!(
                        "{t:>3}  pick {:>4} -> {}  (distance {:.3}, {} valid)",
                        s.choice.action.pickup,
                        serde_json::to_string(&s.choice.action.putdown)?,
                        s.choice.distance,
                        s.choice.candidate_count
                    );
                }
            }
            Ok(())
        }
        Cmd::Evaluate {
            seed,
            config,
            policy,
            mode,
            scenes,
            variants,
            no_one_step,
            out,
            workers,
            json,
            external_labels,
            cloud_dir,
        } => {
            init_workers(workers)?;
            let mut cfg: SuiteConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(n) = scenes {
                cfg.scenes_per_variant = n;
            }
            if !variants.is_empty() {
                cfg.variants = variants
                    .iter()
                    .map(|v| parse_variant(v))
                    .collect::<Result<_>>()?;
            }
            if config.is_none() || mode != ModeArg::Both {
                cfg.modes = mode.modes();
            }
            if no_one_step {
                cfg.one_step = false;
            }
            let policy = build_policy(
                &policy,
                ExternalConfig {
                    include_labels: external_labels,
                    cloud_dir,
                },
            )?;
            let head = header("evaluate", cfg.master_seed, &cfg)?;
            let result = evaluate_suite(&cfg, policy.as_ref())?;
            let report = MetricsReport::from_suite(&result);
            if let Some(dir) = &out {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("report.json"), report.to_canonical_json())?;
                let lines: String = result
                    .episodes
                    .iter()
                    .map(canon::to_line)
                    .collect::<Result<_, _>>()?;
                fs::write(dir.join("episodes.ndjson"), lines)?;
                fs::write(dir.join("run.txt"), format!("{head}\n"))?;
            }
            if json {
                print!("{}", report.to_canonical_json());
            } else {
                print!("{}", report.to_table());
            }
            Ok(())
        }
        Cmd::Replay { record } => {
            let records = read_records(&record)?;
            if records.is_empty() {
                return Err(invalid(format!(
                    "{} holds no episode records",
                    record.display()
                )));
            }
            for r in &records {
                replay(r).map_err(|e| invalid(format!("episode {}: {e}", r.spec.episode_id)))?;
            }
            println!("verified {} episode(s)", records.len());
            Ok(())
        }
        Cmd::Report {
            report,
            against,
            json,
        } => {
            let a = read_report(&report)?;
            match against {
                None => {
                    if json {
                        print!("{}", a.to_canonical_json());
                    } else {
                        print!("{}", a.to_table());
                    }
                }
                Some(b) => {
                    let b = read_report(&b)?;
                    let delta = ablation_delta(&a, &b).map_err(|e| invalid(e.to_string()))?;
                    if json {
                        print!("{}", canon::to_line(&delta)?);
                    } else {
                        print!("{}", delta.to_table());
                    }
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
