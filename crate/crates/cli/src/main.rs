use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use ppid_core::checks::{self, CheckModule, CHECK_TOLERANCE};
use ppid_core::experiment::{self, ExperimentConfig};
use ppid_core::train::{evaluate_checkpoint, train_student, train_teacher};
use ppid_core::{Dataset, DistillConfig, Error, LocalMode, SemanticMode, TrainConfig};

#[derive(Parser)]
#[command(name = "ppid", version, about = "Privileged-trimap distillation for image matting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic composite dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Pretrain the trimap-conditioned teacher.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the trimap-free student against a frozen teacher.
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Keep only one distillation variant (`none` = plain baseline).
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        #[arg(long, conflicts_with = "no_ald_attention")]
        no_ald_feature: bool,
        #[arg(long)]
        no_ald_attention: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    GradCheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Teacher / baseline / PPID comparison over several seeds.
    Reproduce {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Sd,
    Clsd,
    Ld,
    Ald,
    None,
}

fn apply_ablation(d: &mut DistillConfig, a: Ablation) {
    let (semantic, local) = match a {
        Ablation::Sd => (SemanticMode::Sd, LocalMode::None),
        Ablation::Clsd => (SemanticMode::Clsd, LocalMode::None),
        Ablation::Ld => (SemanticMode::None, LocalMode::Ld),
        Ablation::Ald => (SemanticMode::None, LocalMode::Ald),
        Ablation::None => (SemanticMode::None, LocalMode::None),
    };
    d.semantic_mode = semantic;
    d.local_mode = local;
}

/// Failure carrying its exit status.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::NonFinite(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData {
            out,
            count,
            size,
            seed,
        } => {
            if size == 0 || size % 16 != 0 {
                return Err(Error::Config(format!("size must be a positive multiple of 16, got {size}")).into());
            }
            Dataset::generate(count, size, seed)?.save(&out)?;
            println!("wrote {count} samples of {size}x{size} to {}", out.display());
        }
        Cmd::TrainTeacher { config } => {
            let cfg = TrainConfig::load(&config)?;
            let out = train_teacher(&cfg)?;
            print_losses(&out.losses);
        }
        Cmd::TrainStudent {
            config,
            teacher,
            ablate,
            no_ald_feature,
            no_ald_attention,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(a) = ablate {
                apply_ablation(&mut cfg.distill, a);
            }
            if no_ald_feature {
                cfg.distill.ald_feature = false;
            }
            if no_ald_attention {
                cfg.distill.ald_attention = false;
            }
            cfg.validate()?;
            let out = train_student(&cfg, &teacher)?;
            print_losses(&out.losses);
        }
        Cmd::Eval { ckpt, data, out } => {
            let report = evaluate_checkpoint(&ckpt, &data)?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                std::fs::write(&path, report.to_json())?;
            }
        }
        Cmd::GradCheck { module, seed } => {
            let module: CheckModule = module.parse().map_err(|e: Error| Failure {
                code: 2,
                msg: e.to_string(),
            })?;
            let start = Instant::now();
            let results = checks::run(module, seed)?;
            let mut ok = true;
            for c in &results {
                ok &= c.passed();
                println!(
                    "{:<20} max_rel_error {:.3e}  coords {:>5}  kink_retries {}  {}",
                    c.name,
                    c.report.max_rel_error,
                    c.report.coords_checked,
                    c.report.kink_retries,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            let worst = results.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
            println!(
                "max_rel_error {worst:.3e} (tolerance {CHECK_TOLERANCE:e}) in {:.1} s",
                start.elapsed().as_secs_f64()
            );
            if !ok {
                return Err(Failure {
                    code: 3,
                    msg: "gradient check failed".into(),
                });
            }
        }
        Cmd::Reproduce { seeds, iters, out } => {
            let mut cfg = ExperimentConfig::default();
            if let Some(n) = iters {
                cfg.train.max_iter = n;
            }
            cfg.train.validate()?;
            let summary = experiment::run(&cfg, &seeds)?;
            for r in &summary.seeds {
                println!(
                    "seed {}: teacher SAD {:.4}  baseline SAD {:.4}  ppid SAD {:.4}  ({:.0} s)",
                    r.seed, r.teacher.whole.sad, r.baseline.whole.sad, r.ppid.whole.sad, r.seconds
                );
            }
            println!(
                "mean SAD: teacher {:.4}  baseline {:.4}  ppid {:.4}; ppid wins {}/{}; {:.1} min",
                summary.teacher_mean_sad,
                summary.baseline_mean_sad,
                summary.ppid_mean_sad,
                summary.ppid_wins,
                summary.seeds.len(),
                summary.seconds / 60.0
            );
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
                std::fs::write(path, text)?;
            }
        }
    }
    Ok(())
}

fn print_losses(losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("{} iterations, loss {first:.6} -> {last:.6}", losses.len());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
