use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use menet_core::data::{gen_dataset, list_cases, read_mvol, split, write_mvol, Case, SplitRatio, SPLIT_FILE};
use menet_core::model::{loss_gradient_check, predict_volume, Variant, DEFAULT_THRESHOLD, LOSS_CHECK_OPS};
use menet_core::tensor::gradcheck::{default_shapes, grad_check, OPS};
use menet_core::train::{ablate, evaluate, train, write_json, EvalReport, TrainConfig};
use menet_core::{checkpoint, metrics, Error, Result};

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_SEEDS: [u64; 3] = [1, 2, 3];

/// Two-modality thin-structure segmentation: data, training and evaluation.
#[derive(Parser)]
#[command(name = "menet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write DATA/split.json.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "8:1:1")]
        ratio: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes checkpoint.mnck, run.json and run.csv under OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or the ground truth itself with --oracle) on a split.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Segment one case directory into a binary MVOL mask.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "case")]
        case_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Compare two binary MVOL masks.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Train menet and baseline with identical settings over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks for one op or all of them.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn summary_csv(model: &str, seed: Option<u64>, r: &EvalReport) -> String {
    let cell = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v}"));
    format!(
        "model,seed,dsc,ravd,hd,assd\n{model},{},{},{},{},{}\n",
        seed.map_or(String::new(), |s| s.to_string()),
        cell(r.dsc.mean),
        cell(r.ravd.mean),
        cell(r.hd.mean),
        cell(r.assd.mean)
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, cases, size, seed } => {
            let ids = gen_dataset(&out, cases, size, seed)?;
            println!("wrote {} cases of {size}³ to {}", ids.len(), out.display());
        }
        Command::Split { data, ratio, seed } => {
            let ratio: SplitRatio = ratio.parse()?;
            let ids = list_cases(&data)?;
            let spec = split(&ids, ratio, seed)?;
            spec.save(data.join(SPLIT_FILE))?;
            println!(
                "train {} / val {} / test {} (ratio {ratio}, seed {seed})",
                spec.train.len(),
                spec.val.len(),
                spec.test.len()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let record = train(&cfg, &data, Some(&out))?;
            for e in &record.epochs {
                let val = e.val_dsc.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("epoch {:>3}  loss {:.5}  val dsc {val}", e.epoch + 1, e.train_loss);
            }
            println!("best epoch {}", record.best_epoch + 1);
            print!("{}", record.test.table());
            write_text(
                &out.join("run.csv"),
                &summary_csv(cfg.model.variant.name(), Some(cfg.seed), &record.test),
            )?;
        }
        Command::Eval { checkpoint: ckpt, data, split, out, oracle, threshold } => {
            let params = match (&ckpt, oracle) {
                (_, true) => None,
                (Some(path), false) => Some(checkpoint::load(path)?),
                (None, false) => return Err(Error::Config("--checkpoint or --oracle required".into())),
            };
            let report = evaluate(params.as_ref(), &data, &split, threshold)?;
            print!("{}", report.table());
            write_json(&report, &out)?;
            let model = params.as_ref().map_or("oracle", |p| p.config.variant.name());
            write_text(&out.with_extension("csv"), &summary_csv(model, None, &report))?;
        }
        Command::Predict { checkpoint: ckpt, case_dir, out, threshold } => {
            let params = checkpoint::load(&ckpt)?;
            let case = Case::load(&case_dir)?;
            let mask = predict_volume(&params, &case, threshold)?;
            write_mvol(&mask, &out)?;
            println!("{} foreground voxels written to {}", mask.foreground_count()?, out.display());
        }
        Command::Metrics { pred, gt } => {
            let report = metrics::report(&read_mvol(&pred)?, &read_mvol(&gt)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { config, data, seeds, out } => {
            let cfg = TrainConfig::load(&config)?;
            if seeds == 0 {
                return Err(Error::Config("--seeds must be positive".into()));
            }
            let list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let report = ablate(&cfg, &data, &list, &[Variant::Menet, Variant::Baseline], Some(&out))?;
            print!("{}", report.csv());
            print!("{}", report.table());
        }
        Command::Gradcheck { op } => {
            let names: Vec<&str> = match &op {
                Some(name) => vec![name.as_str()],
                None => OPS.iter().chain(LOSS_CHECK_OPS).copied().collect(),
            };
            let mut failed = Vec::new();
            for name in names {
                let mut worst = 0.0f64;
                for seed in GRAD_SEEDS {
                    let err = match name {
                        "menet_loss" => loss_gradient_check(Variant::Menet, seed)?,
                        "baseline_loss" => loss_gradient_check(Variant::Baseline, seed)?,
                        _ => grad_check(name, &default_shapes(name)?, seed)?,
                    };
                    worst = worst.max(err);
                }
                let ok = worst < GRAD_TOLERANCE;
                println!("{name:<16} max rel. error {worst:.3e}  {}", if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(name.to_string());
                }
            }
            if !failed.is_empty() {
                return Err(Error::NonFinite(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}
