// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seed_harness::attention::dump_attention;
use seed_harness::config::RunConfig;
use seed_harness::error::{EXIT_ORACLE, EXIT_VALIDATION};
use seed_harness::oracles::check_oracles;
use seed_harness::pipeline::run_pipeline;
use seed_harness::scene::{gen_scene, Scene, SceneSpec};
use seed_harness::{json, HarnessError, Result};

const THREADS_ENV: &str = "SEED_HEAD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "seed-head", version, about = "BEV detection head harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene directory from a JSON spec.
    GenScene {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the head end to end on a scene and write the report and artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the numerical kernels against their oracles.
    CheckOracles {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Render one query's attention samples for one decoder layer as a PGM.
    DumpAttention {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        query: usize,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| HarnessError::Validation(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::Validation(format!("thread pool: {e}")))
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenScene { spec, out } => {
            let spec: SceneSpec = json::read(&spec)?;
            let scene = gen_scene(&spec)?;
            scene.save(&out)?;
            println!("wrote {} objects to {}", scene.boxes.len(), out.display());
        }
        Command::Run { config, scene, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| HarnessError::config("/output_dir", "no output directory given"))?;
            let scene = Scene::load(&scene)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let result = run_pipeline(&cfg, &scene, base)?;
            result.save(&out)?;
            let m = &result.report.metrics;
            println!(
                "n_c={} n_f={} dqs_recall={} fine_recall={} -> {}",
                m.n_c,
                m.n_f_effective,
                m.dqs_recall,
                m.fine_recall,
                out.display()
            );
        }
        Command::CheckOracles {
            seed,
            trials,
            inject_fault,
        } => {
            let report = check_oracles(seed, trials as usize, inject_fault);
            for s in &report.suites {
                eprintln!(
                    "{} {}: {}/{} failed, max error {:.3e} (tolerance {:.1e})",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.failures,
                    s.trials,
                    s.max_error,
                    s.tolerance
                );
            }
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if !report.passed {
                return Ok(EXIT_ORACLE);
            }
        }
        Command::DumpAttention { run, query, layer, out } => {
            let img = dump_attention(&run, query, layer, &out)?;
            println!("wrote {}x{} image to {}", img.width, img.height, out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let outcome = configure_threads().and_then(|()| execute(cli.command));
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
