//! `dbkd` — black-box few-shot distillation pipeline CLI.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use dbkd_cli::config::{self, ExperimentConfig};
use dbkd_cli::pipeline::{self, run_pipeline, PipelineError};
use dbkd_cli::plot;
use dbkd_core::teacher::{Classifier, ClassifierSidecar, InProcessTeacher};

const EXIT_CONFIG: i32 = 2;
const EXIT_STAGE: i32 = 3;

#[derive(Parser)]
#[command(name = "dbkd", version, about = "Black-box few-shot knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or attach) the teacher only.
    TeacherTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve saved teacher weights over HTTP.
    TeacherServe {
        /// Path to weights.dbkw (sidecar meta.json expected next to it).
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, default_value_t = 250)]
        max_batch: usize,
    },
    /// Run the generation phase: few-shot set, thresholds, WGAN.
    GanTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        teacher_url: Option<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Run the distillation phase on an existing generation run.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        teacher_url: Option<String>,
    },
    /// Recompute metrics.json from a run directory's artifacts.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Render SVG plots from metrics.json (run dir or sweep root).
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Full pipeline: teacher, thresholds, WGAN, balanced generation,
    /// all four students, evaluation.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        teacher_url: Option<String>,
        #[arg(long)]
        resume: bool,
        /// Stop after the named stage (teacher, fewshot, thresholds,
        /// gan, synth, students, evaluate).
        #[arg(long)]
        stop_after: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e.downcast_ref::<PipelineError>() {
                Some(PipelineError::Config(_)) => EXIT_CONFIG,
                Some(_) => EXIT_STAGE,
                None => {
                    if e.downcast_ref::<config::ConfigError>().is_some() {
                        EXIT_CONFIG
                    } else {
                        EXIT_STAGE
                    }
                }
            }
        }
    };
    std::process::exit(code);
}

fn out_root(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os("DBKD_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(
    path: &PathBuf,
    seed: Option<u64>,
    teacher_url: Option<String>,
) -> Result<ExperimentConfig, anyhow::Error> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(u) = teacher_url {
        cfg.teacher_url = Some(u);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), anyhow::Error> {
    match cli.command {
        Command::TeacherTrain { config, out, seed } => {
            let cfg = load_config(&config, seed, None)?;
            let outcome = run_pipeline(&cfg, &out_root(out), true, Some("teacher"))?;
            println!("teacher ready in {}", outcome.run_dir.display());
            println!("fingerprint: {}", outcome.manifest.teacher_fingerprint);
            Ok(())
        }
        Command::TeacherServe { weights, bind, max_batch } => {
            let sidecar_path =
                weights.parent().unwrap_or(std::path::Path::new(".")).join("meta.json");
            let sidecar: ClassifierSidecar = pipeline::read_json(&sidecar_path)
                .map_err(|e| anyhow::anyhow!("sidecar {}: {e}", sidecar_path.display()))?;
            let clf =
                Classifier::load(&weights, sidecar.arch, sidecar.num_classes, sidecar.input_shape)?;
            let teacher = Arc::new(InProcessTeacher::new(clf));
            let handle = dbkd_core::service::serve(teacher, &bind, max_batch)?;
            println!("serving teacher on {} (Ctrl-C to stop)", handle.endpoint());
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::GanTrain { config, out, seed, teacher_url, resume } => {
            let cfg = load_config(&config, seed, teacher_url)?;
            let outcome = run_pipeline(&cfg, &out_root(out), resume, Some("gan"))?;
            println!("generation phase complete in {}", outcome.run_dir.display());
            Ok(())
        }
        Command::Distill { config, out, seed, teacher_url } => {
            let cfg = load_config(&config, seed, teacher_url)?;
            // Resumes the run dir produced by gan-train and continues
            // through the students stage.
            let outcome = run_pipeline(&cfg, &out_root(out), true, Some("students"))?;
            println!("distillation phase complete in {}", outcome.run_dir.display());
            Ok(())
        }
        Command::Evaluate { run_dir } => {
            let doc = pipeline::evaluate_run_dir(&run_dir)?;
            println!("teacher accuracy: {:.4}", doc.teacher_accuracy);
            for s in &doc.students {
                println!("student {:>12}: {:.4}", s.variant, s.final_accuracy);
            }
            println!(
                "coverage: synthetic {:.4} vs few-shot {:.4}",
                doc.coverage.synthetic, doc.coverage.fewshot
            );
            println!("metrics written to {}", run_dir.join("metrics.json").display());
            Ok(())
        }
        Command::Plot { run_dir } => {
            let written = if run_dir.join("metrics.json").exists() {
                plot::plot_run(&run_dir)?
            } else {
                plot::plot_sweep(&run_dir)?
            };
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Pipeline { config, out, seed, teacher_url, resume, stop_after } => {
            let cfg = load_config(&config, seed, teacher_url)?;
            let outcome = run_pipeline(&cfg, &out_root(out), resume, stop_after.as_deref())?;
            println!("run directory: {}", outcome.run_dir.display());
            let metrics = outcome.run_dir.join("metrics.json");
            if metrics.exists() {
                let doc: dbkd_core::metrics::MetricsDoc = pipeline::read_json(&metrics)
                    .map_err(|e| anyhow::anyhow!("metrics.json: {e}"))?;
                println!("teacher accuracy: {:.4}", doc.teacher_accuracy);
                for s in &doc.students {
                    println!("student {:>12}: {:.4}", s.variant, s.final_accuracy);
                }
                println!(
                    "coverage: synthetic {:.4} vs few-shot {:.4}",
                    doc.coverage.synthetic, doc.coverage.fewshot
                );
                println!(
                    "teacher queries: {} calls / {} images",
                    doc.teacher_queries.total_calls, doc.teacher_queries.total_images
                );
            }
            Ok(())
        }
    }
}
