use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gbsg_core::grading::SearchMethod;
use gbsg_core::pipeline::{self, BenchmarkSpec, ErrorKind, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "gbsg", version, about = "Graph of brain structures grading pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides `threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Patch search; overrides `grading.method`.
    #[arg(long, global = true, value_parser = ["exact", "patchmatch"])]
    grading_mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic cohort.
    Synth,
    /// Grade every subject.
    Grade,
    /// Build structure graphs and the raw feature table.
    Graph,
    /// Age-correct, z-score and select features.
    Features,
    /// Train the classifiers on CN/AD.
    Train,
    /// Evaluate on sMCI/pMCI.
    Eval,
    /// Run every stage.
    Run,
    /// Rewrite the report from stage artifacts.
    Report,
    /// Time exact and PatchMatch grading on a synthetic volume.
    Bench {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        templates: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Comma-separated worker counts.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        workers: Vec<usize>,
    },
}

fn load_config(g: &Global) -> Result<PipelineConfig, PipelineError> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::new("config", ErrorKind::Usage, "--config is required"))?;
    let mut cfg =
        PipelineConfig::load(path).map_err(|e| PipelineError::new("config", ErrorKind::Usage, e))?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(m) = &g.grading_mode {
        cfg.grading.method = m.parse::<SearchMethod>().expect("validated by clap");
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<String, PipelineError> {
    if let Command::Bench {
        size,
        templates,
        repeats,
        workers,
    } = &cli.command
    {
        let mut spec = BenchmarkSpec {
            size: *size,
            templates: *templates,
            repeats: *repeats,
            threads: workers.clone(),
            ..Default::default()
        };
        if cli.global.config.is_some() {
            let cfg = load_config(&cli.global)?;
            spec.k = cfg.grading.k;
            spec.patch_radius = cfg.grading.patch_radius;
            spec.search_window = cfg.grading.search_window;
            spec.pm_iterations = cfg.grading.pm_iterations;
            spec.seed = cfg.seed;
        } else if let Some(s) = cli.global.seed {
            spec.seed = s;
        }
        let report = pipeline::benchmark_grading(&spec)
            .map_err(|e| PipelineError::new("bench", ErrorKind::Data, e))?;
        return Ok(report.to_text());
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth => {
            let out = pipeline::run_synth(&cfg)?;
            Ok(format!("{} subjects, manifest {}", out.cohort.len(), out.manifest.display()))
        }
        Command::Run => {
            let out = pipeline::run_pipeline(&cfg)?;
            Ok(format!(
                "{}\nreport written to {}",
                pipeline::summary_line(&out.outcome),
                out.report_path.display()
            ))
        }
        Command::Grade => pipeline::run_stage(&cfg, Stage::Grade),
        Command::Graph => pipeline::run_stage(&cfg, Stage::Graph),
        Command::Features => pipeline::run_stage(&cfg, Stage::Features),
        Command::Train => pipeline::run_stage(&cfg, Stage::Train),
        Command::Eval => pipeline::run_stage(&cfg, Stage::Eval),
        Command::Report => pipeline::run_stage(&cfg, Stage::Report),
        Command::Bench { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
