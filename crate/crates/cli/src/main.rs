//! `ssodlab` command line: data generation, training, evaluation, and
//! inspection dumps. Exit codes: 0 success, 1 invalid input, 2 runtime
//! failure. All randomness is controlled by `--seed`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use ssodlab_core::config::Config;
use ssodlab_core::data::{gen_synthetic_dataset, Dataset};
use ssodlab_core::pseudo::{generate_pseudo_labels, PseudoDump};
use ssodlab_core::trainer::{load_checkpoint, Trainer, TrainerState};
use ssodlab_core::{Error, Real};

#[derive(Parser)]
#[command(name = "ssodlab", version, about = "Semi-supervised object detection training lab")]
struct Cli {
    /// Configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. `train.epochs=3` (repeatable).
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,

    /// Seed override (shorthand for `train.seed=...`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Checkpoint path (resume for `train`, model source for the others).
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (images/, annotations.json, manifest.json).
    GenData {
        /// Number of images.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Train (burn-in + SSOD) per the configuration.
    Train,
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        /// Dataset directory; defaults to `data.val_dir` or `data.train_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dump the per-class threshold table backed by a checkpoint's stats.
    InspectThresholds,
    /// Dump teacher pseudo labels for dataset images.
    InspectPseudo {
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of images to label.
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 1,
        e if e.is_validation() => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(path) = &cli.config {
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("config file {} not found", path.display()),
            )));
        }
    }
    Config::load(cli.config.as_deref(), &overrides)
}

fn write_snapshot(cfg: &Config, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config_resolved.toml"), cfg.snapshot())?;
    Ok(())
}

fn require<'a, T>(opt: &'a Option<T>, what: &str) -> Result<&'a T, Error> {
    opt.as_ref()
        .ok_or_else(|| Error::config(format!("--{what} is required for this command")))
}

fn existing(path: &Path, what: &str) -> Result<(), Error> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} not found", path.display()),
        )));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { n } => {
            let cfg = load_config(&cli)?;
            let out = require(&cli.out, "out")?.clone();
            write_snapshot(&cfg, &out)?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let manifest =
                gen_synthetic_dataset::<Real>(&cfg.synthetic.spec(), n, seed, &out)?;
            println!(
                "generated {} images ({}x{}, {} classes) into {}",
                manifest.n_images,
                manifest.canvas,
                manifest.canvas,
                manifest.num_classes,
                out.display()
            );
            Ok(())
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            if cfg.data.train_dir.is_empty() {
                return Err(Error::config("data.train_dir must be set for train"));
            }
            let train_dir = PathBuf::from(&cfg.data.train_dir);
            existing(&train_dir, "training data directory")?;
            let train_ds = Dataset::<Real>::load(&train_dir)?;
            let val_ds = match &cfg.data.val_dir {
                Some(dir) => {
                    let d = PathBuf::from(dir);
                    existing(&d, "validation data directory")?;
                    Some(Dataset::<Real>::load(&d)?)
                }
                None => None,
            };
            let out = cli.out.clone();
            if let Some(out) = &out {
                write_snapshot(&cfg, out)?;
            }
            let mut trainer = match &cli.ckpt {
                Some(ckpt) => {
                    existing(ckpt, "checkpoint")?;
                    let (_, state): (Config, TrainerState<Real>) = load_checkpoint(ckpt)?;
                    Trainer::resume(cfg, train_ds, val_ds, out, state)?
                }
                None => Trainer::new(cfg, train_ds, val_ds, out)?,
            };
            eprintln!(
                "training: {} labeled / {} unlabeled images, {} parameters",
                trainer.num_labeled(),
                trainer.num_unlabeled(),
                trainer.state.student.num_scalars()
            );
            trainer.run()?;
            if let Some(m) = trainer.state.metrics.last() {
                println!(
                    "done: epoch {} [{}] AP50 {:.4} AP50:95 {:.4} P {:.4} R {:.4}",
                    m.epoch, m.phase, m.ap50, m.ap50_95, m.p, m.r
                );
            }
            Ok(())
        }
        Command::Eval { ref data } => {
            let ckpt = require(&cli.ckpt, "ckpt")?;
            existing(ckpt, "checkpoint")?;
            let (ckpt_cfg, state): (Config, TrainerState<Real>) = load_checkpoint(ckpt)?;
            let data_dir = match data {
                Some(d) => d.clone(),
                None => {
                    let fallback = ckpt_cfg
                        .data
                        .val_dir
                        .clone()
                        .unwrap_or_else(|| ckpt_cfg.data.train_dir.clone());
                    if fallback.is_empty() {
                        return Err(Error::config("--data is required (checkpoint has no dataset paths)"));
                    }
                    PathBuf::from(fallback)
                }
            };
            existing(&data_dir, "dataset directory")?;
            let ds = Dataset::<Real>::load(&data_dir)?;
            // evaluate on the full directory as the validation set
            let mut eval_cfg = ckpt_cfg.clone();
            eval_cfg.data.val_frac = 0.0;
            eval_cfg.data.labeled_pct = 100.0;
            eval_cfg.train.epochs = 0;
            eval_cfg.train.burnin_epochs = Some(0);
            let trainer = Trainer::new(eval_cfg, ds.clone(), Some(ds), None)?;
            let params = state.teacher.as_ref().unwrap_or(&state.student);
            let result = trainer.evaluate_params(params)?;
            let json = serde_json::to_string_pretty(&result).map_err(Error::Json)?;
            println!("{json}");
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                write_snapshot(&ckpt_cfg, out)?;
                std::fs::write(out.join("eval.json"), json)?;
            }
            Ok(())
        }
        Command::InspectThresholds => {
            let ckpt = require(&cli.ckpt, "ckpt")?;
            existing(ckpt, "checkpoint")?;
            let (cfg, state): (Config, TrainerState<Real>) = load_checkpoint(ckpt)?;
            let alpha = cfg.epoch_corresponding.alpha;
            let schedule = if state.stats.is_sealed() {
                ssodlab_core::epoch::compute_thresholds(&state.stats, alpha)?
            } else {
                return Err(Error::state(
                    "checkpoint stats are unsealed; train at least one epoch first",
                ));
            };
            let sizes: Vec<usize> = (0..cfg.model.num_classes)
                .map(|c| state.stats.score_list(c).len())
                .collect();
            let table = schedule.table(&sizes);
            print!("{table}");
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                write_snapshot(&cfg, out)?;
                std::fs::write(
                    out.join(format!("thresholds_epoch_{:04}.txt", schedule.epoch)),
                    table,
                )?;
            }
            Ok(())
        }
        Command::InspectPseudo { ref data, n } => {
            let ckpt = require(&cli.ckpt, "ckpt")?;
            existing(ckpt, "checkpoint")?;
            let (cfg, state): (Config, TrainerState<Real>) = load_checkpoint(ckpt)?;
            let data_dir = match data {
                Some(d) => d.clone(),
                None => PathBuf::from(&cfg.data.train_dir),
            };
            existing(&data_dir, "dataset directory")?;
            let ds = Dataset::<Real>::load(&data_dir)?;
            let arch = ssodlab_core::trainer::arch_from_config::<Real>(&cfg)?;
            let params = state.teacher.as_ref().unwrap_or(&state.student);
            let mut dumps = Vec::new();
            for i in 0..n.min(ds.len()) {
                let labels = generate_pseudo_labels(
                    &arch,
                    params,
                    &ds.images[i],
                    cfg.pseudo.conf_floor as Real,
                    cfg.pseudo.nms_iou as Real,
                )?;
                dumps.push(PseudoDump { image_id: ds.ids[i], labels });
            }
            let total: usize = dumps.iter().map(|d| d.labels.len()).sum();
            println!("{total} pseudo labels over {} images", dumps.len());
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                write_snapshot(&cfg, out)?;
                use std::io::Write;
                let mut f = std::fs::File::create(out.join("pseudo_labels.jsonl"))?;
                for d in &dumps {
                    writeln!(f, "{}", serde_json::to_string(d).map_err(Error::Json)?)?;
                }
            }
            Ok(())
        }
    }
}
