use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use xfm_core::data::{export_corpus, ShapeWorld};
use xfm_core::encoders::{EncoderConfig, XfmModel};
use xfm_core::eval::{ablate, emit_reports, gradcheck_suite, stop_gradient_suite, GradcheckConfig, ReportOptions};
use xfm_core::gradflow::Variant;
use xfm_core::trainer::{train, RunConfig};

#[derive(Parser)]
#[command(name = "xfm", version, about = "Tri-encoder vision-language pre-training on a synthetic shape world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus to disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        texts: usize,
        #[arg(long, default_value_t = 96)]
        images: usize,
        #[arg(long, default_value_t = 96)]
        pairs: usize,
    },
    /// Pre-train one model.
    Train {
        /// JSON run configuration; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every gradient-flow variant from one seed and compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        pool: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference and stop-gradient suites on freshly initialized
    /// models. Exits non-zero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieval, probing and invariant reports for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        pool: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        gradcheck_seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            texts,
            images,
            pairs,
        } => {
            let s = export_corpus(&ShapeWorld::default(), &out, seed, texts, images, pairs)?;
            println!("wrote {} texts, {} images, {} pairs to {}", s.texts, s.images, s.pairs, out.display());
            Ok(true)
        }
        Command::Train {
            config,
            variant,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = train(&cfg, Some(&out))?;
            let last = outcome.metrics.last().map_or(f64::NAN, |m| m.total);
            println!(
                "trained {} steps ({}), final total loss {last:.5}, {} skipped updates; outputs in {}",
                outcome.metrics.len(),
                cfg.variant,
                outcome.skipped_updates,
                out.display()
            );
            Ok(true)
        }
        Command::Ablate {
            config,
            seed,
            pool,
            k,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = ablate(&cfg, pool, k, Some(&out))?;
            write_json(&out.join("ablation.json"), &report)?;
            let table = report.table();
            fs::write(out.join("ablation.md"), &table)?;
            print!("{table}");
            Ok(true)
        }
        Command::Gradcheck { seeds, out } => {
            let cfg = GradcheckConfig {
                seeds,
                ..GradcheckConfig::default()
            };
            let fd = gradcheck_suite(&cfg)?;
            for (o, e) in &fd.worst {
                println!("finite differences {o}: max relative error {e:.2e}");
            }
            let model = XfmModel::new(EncoderConfig::default(), 0)?;
            let sg = stop_gradient_suite(&model, &ShapeWorld::default(), 0)?;
            for r in &sg.reports {
                println!("stop-gradient {}: {}", r.variant, if r.pass { "pass" } else { "FAIL" });
                for f in &r.failures {
                    println!("  {f}");
                }
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_json(&dir.join("gradcheck.json"), &fd)?;
                write_json(&dir.join("stopgrad.json"), &sg)?;
            }
            Ok(fd.pass && sg.pass)
        }
        Command::Eval {
            checkpoint,
            pool,
            k,
            gradcheck_seeds,
            out,
        } => {
            let opts = ReportOptions {
                pool,
                k,
                gradcheck: GradcheckConfig {
                    seeds: gradcheck_seeds,
                    ..GradcheckConfig::default()
                },
                ..ReportOptions::default()
            };
            let s = emit_reports(&checkpoint, &out, &opts)?;
            println!(
                "text retrieval R@1 {:.3} R@5 {:.3}; image retrieval R@1 {:.3} R@5 {:.3}; probe accuracy {:.3}",
                s.retrieval.text_retrieval.r1,
                s.retrieval.text_retrieval.r5,
                s.retrieval.image_retrieval.r1,
                s.retrieval.image_retrieval.r5,
                s.probe.accuracy
            );
            println!(
                "stop-gradient suite: {}; gradient check: {}",
                if s.stopgrad_pass { "pass" } else { "FAIL" },
                if s.gradcheck_pass { "pass" } else { "FAIL" }
            );
            Ok(s.pass())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
