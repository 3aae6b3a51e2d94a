//! `unirewrite` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or configuration),
//! 2 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use unirewrite::bundle::DataBundle;
use unirewrite::checkpoint::Checkpoint;
use unirewrite::config::{RunConfig, KEYS};
use unirewrite::datapipe::ExampleKind;
use unirewrite::eval::{best_by_accuracy, emit_report, run_translation_benchmark, sweep_lambda, EvalSet, Exemplars};
use unirewrite::experiment::{benchmark_sets, engine_from_checkpoint, scenario_pairs};
use unirewrite::inference::{DecodeConfig, Engine, Mode, RewriteRequest, Strategy, DEFAULT_MAX_LEN};
use unirewrite::trainer::{metrics_csv, recent_loss, timing_csv, Trainer, METRICS_HEADER, PRESETS};
use unirewrite_service::{AppState, Loaded};

/// Environment variable naming a default configuration file.
pub const CONFIG_ENV: &str = "UNIREWRITE_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "unirewrite",
    version,
    about = "Train and run a multilingual exemplar-conditioned rewriter on synthetic languages",
    after_long_help = config_help()
)]
pub struct Cli {
    /// Configuration file (flat `key = value` lines). Defaults to $UNIREWRITE_CONFIG when set.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world, vocabulary and corpora.
    GenData {
        /// Output directory; created when missing.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model on generated data.
    Train {
        /// Directory written by `gen-data`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for model.ckpt, metrics.csv, timing.csv and config.txt.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Ablation preset: -para, -lang-tokens, -exemplars or -BT; repeatable.
        #[arg(long, value_name = "NAME", allow_hyphen_values = true, conflicts_with = "resume")]
        preset: Vec<String>,
        /// Continue from a checkpoint; training settings come from the checkpoint
        /// and only train.total_steps is taken from the configuration.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Rewrite one input; prints the output text.
    Rewrite {
        #[command(flatten)]
        model: ModelArgs,
        /// Input sentence.
        #[arg(long, value_name = "TEXT")]
        input: String,
        /// Output language id.
        #[arg(long, value_name = "LANG")]
        target_lang: String,
        /// File with source-attribute exemplars, one per line; required when λ > 0.
        #[arg(long, value_name = "FILE")]
        exemplars_a: Option<PathBuf>,
        /// File with target-attribute exemplars, one per line; required when λ > 0.
        #[arg(long, value_name = "FILE")]
        exemplars_b: Option<PathBuf>,
        /// Transfer scale λ.
        #[arg(long, value_name = "X")]
        lambda: f64,
        /// Rewriting mode.
        #[arg(long, value_enum)]
        mode: CliMode,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Translate one input; prints the output text.
    Translate {
        #[command(flatten)]
        model: ModelArgs,
        /// Input sentence.
        #[arg(long, value_name = "TEXT")]
        input: String,
        /// Output language id.
        #[arg(long, value_name = "LANG")]
        target_lang: String,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Sweep λ per scenario and write one report per scenario.
    EvalSweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Report directory; created when missing.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Scenario tag (within, cross-supervised, cross-zero-shot, cross-unsupervised);
        /// repeatable; default all.
        #[arg(long, value_name = "TAG")]
        scenario: Vec<String>,
    },
    /// BLEU of pivot-to-language and language-to-pivot translation.
    Benchmark {
        #[command(flatten)]
        model: ModelArgs,
        /// Also write the table to this CSV file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        /// Listen address; overrides service.bind.
        #[arg(long, value_name = "ADDR")]
        bind: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory written by `gen-data`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Decoding strategy; default beam 5, or beam 1 for cross mode with λ > 0.
    #[arg(long, value_enum)]
    pub strategy: Option<CliStrategy>,
    /// Beam width for the beam strategy.
    #[arg(long, value_name = "K", default_value_t = 5)]
    pub beam: usize,
    /// Sampling temperature for the sample strategy.
    #[arg(long, value_name = "T", default_value_t = 1.0)]
    pub temperature: f64,
    /// Maximum generated tokens.
    #[arg(long, value_name = "N", default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    /// Seed for the sample strategy.
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    pub sample_seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CliMode {
    Within,
    Cross,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CliStrategy {
    Greedy,
    Beam,
    Sample,
}

impl DecodeArgs {
    fn config(&self) -> Option<DecodeConfig> {
        let strategy = match self.strategy? {
            CliStrategy::Greedy => Strategy::Greedy,
            CliStrategy::Beam => Strategy::Beam { k: self.beam },
            CliStrategy::Sample => Strategy::Sample { temperature: self.temperature },
        };
        Some(DecodeConfig { strategy, max_len: self.max_len, seed: self.sample_seed })
    }
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys (file lines `key = value`, or --set key=value):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<28} {d}\n"));
    }
    s.push_str(&format!("\nTraining presets: {}\n", PRESETS.join(", ")));
    s.push_str("\nExit codes: 0 success, 1 usage error, 2 runtime error.\n");
    s
}

pub fn command() -> clap::Command {
    Cli::command()
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<unirewrite::Error> for Failure {
    fn from(e: unirewrite::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(e: unirewrite::Error) -> Failure {
    Failure::Usage(e.to_string())
}

type Outcome = Result<(), Failure>;

/// Parses `args` (program name first) and runs the command. `default_config`
/// is the value of [`CONFIG_ENV`], if any.
pub fn run(args: Vec<String>, default_config: Option<PathBuf>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, default_config) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn effective_config(cli: &Cli, default_config: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = cli.config.clone().or(default_config) {
        cfg.apply_file(&path).map_err(usage)?;
    }
    for item in &cli.overrides {
        cfg.apply_override(item).map_err(usage)?;
    }
    if let Command::Train { preset, .. } = &cli.command {
        for p in preset {
            cfg.train.apply_preset(p).map_err(usage)?;
        }
    }
    if let Command::Serve { bind: Some(b), .. } = &cli.command {
        cfg.service_bind = b.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn execute(cli: Cli, default_config: Option<PathBuf>) -> Outcome {
    let cfg = effective_config(&cli, default_config)?;
    eprint!("# effective configuration\n{}", cfg.to_text());
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::Train { data, out, resume, .. } => train(&cfg, &data, &out, resume.as_deref()),
        Command::Rewrite { model, input, target_lang, exemplars_a, exemplars_b, lambda, mode, decode } => {
            let (engine, _) = load_engine(&model)?;
            let mode = match mode {
                CliMode::Within => Mode::Within,
                CliMode::Cross => Mode::Cross,
            };
            let read = |p: &Option<PathBuf>, flag: &str| -> Result<Vec<String>, Failure> {
                match p {
                    Some(p) => read_exemplars(p),
                    None if lambda > 0.0 => Err(Failure::Usage(format!("--{flag} is required when λ > 0"))),
                    None => Ok(Vec::new()),
                }
            };
            let req = RewriteRequest {
                input_text: input,
                target_lang,
                exemplars_a: read(&exemplars_a, "exemplars-a")?,
                exemplars_b: read(&exemplars_b, "exemplars-b")?,
                lambda,
                mode,
                decode: decode.config(),
            };
            let res = engine.rewrite(&req)?;
            println!("{}", res.output_text);
            Ok(())
        }
        Command::Translate { model, input, target_lang, decode } => {
            let (engine, _) = load_engine(&model)?;
            println!("{}", engine.translate(&input, &target_lang, decode.config())?);
            Ok(())
        }
        Command::EvalSweep { model, out, scenario } => eval_sweep(&cfg, &model, &out, &scenario),
        Command::Benchmark { model, out } => {
            let (engine, bundle) = load_engine(&model)?;
            let sets = benchmark_sets(&bundle, cfg.eval.translation_lines, cfg.eval.seed + 2)?;
            let rows = run_translation_benchmark(&engine, &sets, None)?;
            let csv = unirewrite::eval::benchmark_csv(&rows);
            print!("{csv}");
            if let Some(p) = out {
                write(&p, &csv)?;
            }
            Ok(())
        }
        Command::Serve { model, .. } => serve(&cfg, &model),
    }
}

fn write(path: &Path, body: &str) -> Outcome {
    fs::write(path, body).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_exemplars(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("cannot read exemplar file {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn load_engine(args: &ModelArgs) -> Result<(Engine, DataBundle), Failure> {
    let bundle = DataBundle::load(&args.data)?;
    let ck = Checkpoint::load(&args.checkpoint, Some(&bundle.vocab.hash()))?;
    let engine = engine_from_checkpoint(&ck, bundle.vocab.clone(), &bundle.world)?;
    Ok((engine, bundle))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Outcome {
    let bundle = DataBundle::generate(&cfg.data)?;
    bundle.save(out)?;
    println!(
        "wrote {} languages, vocabulary of {} tokens to {}",
        bundle.world.languages.len(),
        bundle.vocab.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Outcome {
    let bundle = DataBundle::load(data)?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let train_data = bundle.train_data()?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p, Some(&bundle.vocab.hash()))?;
            if ck.step > cfg.train.total_steps {
                return Err(Failure::Usage(format!(
                    "checkpoint is at step {} beyond train.total_steps {}",
                    ck.step, cfg.train.total_steps
                )));
            }
            Trainer::resume(ck, train_data, Some(cfg.train.total_steps))?
        }
        None => {
            let model = unirewrite::model::ModelConfig { vocab_size: bundle.vocab.len(), ..cfg.model.clone() };
            Trainer::new(model, cfg.train.clone(), train_data)?
        }
    };
    let start = trainer.step;
    let stdout = std::io::stdout();
    trainer.run(|t, row| {
        if row.step % 100 == 0 || row.step == t.cfg.total_steps {
            let f = |k| recent_loss(&t.metrics, k, 20).map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                stdout.lock(),
                "step {} denoise {} backtranslate {} parallel {}",
                row.step,
                f(ExampleKind::Denoise),
                f(ExampleKind::Backtranslate),
                f(ExampleKind::Parallel)
            );
        }
    })?;
    trainer.checkpoint()?.save(&out.join("model.ckpt"))?;
    // A resumed run appends to the metrics of the run it continues.
    let append = |name: &str, header: &str, body: String| -> Outcome {
        let path = out.join(name);
        let existing = if start > 0 { fs::read_to_string(&path).unwrap_or_default() } else { String::new() };
        let rows = body.strip_prefix(header).unwrap_or(&body).trim_start_matches('\n');
        let text = if existing.starts_with(header) { existing + rows } else { body.clone() };
        write(&path, &text)
    };
    append("metrics.csv", METRICS_HEADER, metrics_csv(&trainer.metrics))?;
    append("timing.csv", unirewrite::trainer::TIMING_HEADER, timing_csv(&trainer.timing))?;
    let mut effective = cfg.clone();
    effective.train = trainer.cfg.clone();
    write(&out.join("config.txt"), &effective.to_text())?;
    let c = trainer.counters;
    println!(
        "trained steps {}..{}; denoise {} backtranslate {} parallel {} batches",
        start, trainer.step, c.denoise, c.backtranslate, c.parallel
    );
    Ok(())
}

fn eval_sweep(cfg: &RunConfig, model: &ModelArgs, out: &Path, tags: &[String]) -> Outcome {
    let plan = &cfg.eval;
    let scenarios = if tags.is_empty() {
        plan.scenarios.clone()
    } else {
        tags.iter()
            .map(|t| {
                plan.scenarios.iter().copied().find(|s| s.tag() == *t).ok_or_else(|| {
                    let known: Vec<String> = plan.scenarios.iter().map(|s| s.tag()).collect();
                    Failure::Usage(format!("unknown scenario `{t}` (expected one of {})", known.join(", ")))
                })
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    let (engine, bundle) = load_engine(model)?;
    let world = &bundle.world;
    let evalset = EvalSet::generate(world, &world.lang_ids(), plan.per_value, plan.seed)?;
    let exemplars = Exemplars::generate(world, bundle.pivot(), plan.exemplars_per_value, plan.seed + 1)?;
    let mut sweeps = Vec::new();
    for scenario in scenarios {
        let pairs = scenario_pairs(&bundle, scenario)?;
        if pairs.is_empty() {
            eprintln!("skipping {}: no language pairs", scenario.tag());
            continue;
        }
        let lambdas = match scenario.mode() {
            Mode::Within => &plan.within_lambdas,
            Mode::Cross => &plan.cross_lambdas,
        };
        let sweep = sweep_lambda(&engine, world, &evalset, &exemplars, lambdas, scenario, &pairs, None)?;
        if let Some(best) = best_by_accuracy(&sweep.by_lambda(None)) {
            println!(
                "{}: best λ {} transfer accuracy {:.3} self-BLEU {:.1}",
                scenario.tag(),
                best.lambda,
                best.transfer_accuracy,
                best.self_bleu
            );
        }
        sweeps.push(sweep);
    }
    for p in emit_report(out, &sweeps, None)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn serve(cfg: &RunConfig, model: &ModelArgs) -> Outcome {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.service_bind)
            .await
            .map_err(|e| Failure::Runtime(format!("cannot bind {}: {e}", cfg.service_bind)))?;
        let addr = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
        let state = AppState::new(cfg.service_max_concurrent);
        // Health reports `loading` until the checkpoint is in memory.
        let server = tokio::spawn(unirewrite_service::serve(listener, state.clone()));
        println!("listening on http://{addr}");
        let args = ModelArgs { data: model.data.clone(), checkpoint: model.checkpoint.clone() };
        let loaded = tokio::task::spawn_blocking(move || -> Result<Loaded, Failure> {
            let (engine, bundle) = load_engine(&args)?;
            Ok(Loaded::new(engine, &bundle.world)?)
        })
        .await
        .map_err(|e| Failure::Runtime(e.to_string()))??;
        if state.load(loaded).is_err() {
            return Err(Failure::Runtime("model loaded twice".into()));
        }
        println!("model loaded");
        match server.await {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(Failure::Runtime(e.to_string())),
            Err(e) => Err(Failure::Runtime(e.to_string())),
        }
    })
}
