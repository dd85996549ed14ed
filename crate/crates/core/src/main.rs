use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use arl::config::RunConfig;
use arl::corpus::{generate_synthetic, FeatureCorpus};
use arl::error::{ArlError, Result};
use arl::eval::{audit, audit_csv, evaluate};
use arl::gradcheck;
use arl::trainer::{checkpoint, resume, train};

#[derive(Parser)]
#[command(
    name = "arl",
    version,
    about = "Ambiguity-restrained video retrieval training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-ambiguity corpus
    GenCorpus {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// key=value override, repeatable
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Train both branches and write checkpoint.prvk, train_log.csv and config.txt
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Recall@K of the fused score on a corpus, as JSON
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity / uncertainty distributions and detection quality on the train split
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training objective's gradient
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| ArlError::config(format!("cannot read config {}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(ArlError::config(format!(
            "{what} {} does not exist",
            p.display()
        )));
    }
    Ok(())
}

fn require_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(ArlError::config(
            format!("output directory {} does not exist", dir.display()),
        )),
        _ => Ok(()),
    }
}

fn print_config(cfg: &RunConfig) {
    println!("# resolved config");
    print!("{}", cfg.to_text());
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus {
            spec,
            out,
            overrides,
        } => {
            if let Some(s) = &spec {
                require_file(s, "spec")?;
            }
            require_parent(&out)?;
            let cfg = load_config(spec.as_deref(), &overrides)?;
            print_config(&cfg);
            let corpus = generate_synthetic(&cfg.corpus)?;
            corpus.write(&out)?;
            println!(
                "wrote {} ({} queries, {} videos, {} planted pairs)",
                out.display(),
                corpus.n_queries(),
                corpus.n_videos(),
                corpus.planted_ambiguity.as_ref().map_or(0, Vec::len)
            );
        }
        Command::Train {
            corpus,
            config,
            out,
            overrides,
        } => {
            require_file(&corpus, "corpus")?;
            if let Some(c) = &config {
                require_file(c, "config")?;
            }
            let cfg = load_config(config.as_deref(), &overrides)?;
            fs::create_dir_all(&out)?;
            print_config(&cfg);
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let data = FeatureCorpus::read(&corpus)?;
            let state = train(&data, &cfg.train)?;
            checkpoint(&state, out.join("checkpoint.prvk"))?;
            fs::write(out.join("train_log.csv"), state.history.to_csv())?;
            if let Some(last) = state.history.rows.last() {
                println!(
                    "trained {} epochs, final loss {:.6}",
                    state.epoch, last.loss.grand_total
                );
            }
        }
        Command::Evaluate {
            checkpoint: ckpt,
            corpus,
            out,
        } => {
            require_file(&ckpt, "checkpoint")?;
            require_file(&corpus, "corpus")?;
            require_parent(&out)?;
            let state = resume(&ckpt)?;
            let data = FeatureCorpus::read(&corpus)?;
            let report = evaluate(&state, &data)?;
            let json = report.to_json();
            fs::write(&out, format!("{json}\n"))?;
            println!("{json}");
        }
        Command::Audit {
            checkpoint: ckpt,
            corpus,
            out,
        } => {
            require_file(&ckpt, "checkpoint")?;
            require_file(&corpus, "corpus")?;
            require_parent(&out)?;
            let state = resume(&ckpt)?;
            let data = FeatureCorpus::read(&corpus)?;
            let reports = [audit(&state, &data, 0)?, audit(&state, &data, 1)?];
            fs::write(&out, audit_csv(&state, &reports))?;
            for r in &reports {
                println!(
                    "branch {}: detected {} planted {} precision {:.4} recall {:.4} f1 {:.4}",
                    r.branch,
                    r.quality.detected,
                    r.quality.planted,
                    r.quality.precision,
                    r.quality.recall,
                    r.quality.f1
                );
            }
        }
        Command::GradCheck { seed, instances } => {
            let report = gradcheck::run(seed, instances)?;
            println!(
                "max_rel_err {:e} over {} instances ({} scalars), worst at {}",
                report.max_rel_err, report.instances, report.scalars_checked, report.worst_tensor
            );
            if report.max_rel_err >= 1e-4 {
                return Err(ArlError::numerical(
                    report.worst_tensor,
                    format!("relative error {:e} exceeds 1e-4", report.max_rel_err),
                ));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &ArlError) -> u8 {
    match e {
        ArlError::Config(_) => 3,
        ArlError::Numerical { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
