use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use cardiseg::cohort::Cohort;
use cardiseg::experiment::{self, Profile, RunConfig};
use cardiseg::inference::{predict_volume, segment};
use cardiseg::metrics::{auto_grade, evaluate};
use cardiseg::phantom::{generate_cohort, PhantomConfig, MANIFEST_FILE};
use cardiseg::stats;
use cardiseg::training::{self, load_checkpoint, make_fold_plan, prepare_image, train_one};
use cardiseg::volume_io::{self, IntensityKind, PreprocessSettings, Volume, NUM_CLASSES};
use cardiseg::{Error, Result};

#[derive(Parser)]
#[command(name = "cardiseg", version, about = "Whole-heart CT segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of aligned CCTA/VNC/NCCT phantoms.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// PhantomConfig JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Smooth, normalize and resample one image.
    Preprocess {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// PreprocessSettings JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one network of one fold.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Run configuration JSON (training, network, preprocess, num_folds, seed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment an image with an ensemble of checkpoints.
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated checkpoint directories (each holding params.bin and manifest.json).
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-class probability volumes on the network grid.
        #[arg(long)]
        save_probs: bool,
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
        /// PreprocessSettings JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare an automatic label map with a reference.
    Eval {
        #[arg(long)]
        auto: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Agreement statistics on CSV inputs.
    Stats {
        #[command(subcommand)]
        command: StatsCommand,
    },
    /// Five-point automatic grade of a label map against a reference.
    Grade {
        #[arg(long)]
        auto: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Full cross-validation experiment (resumable).
    Crossval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tables and plots from a finished experiment.
    Report {
        #[arg(long)]
        experiment: PathBuf,
        /// Two-observer grades (`case_id,observer_id,grade`).
        #[arg(long, conflicts_with = "confusion")]
        grades: Option<PathBuf>,
        /// 5×5 grade confusion matrix CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Bland-Altman and paired t-test on `case_id,a,b` rows.
    BlandAltman {
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Two one-sided tests for equivalence of paired means.
    Tost {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        margin: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Linearly weighted kappa and agreement summary.
    Kappa {
        #[arg(long, conflicts_with = "confusion", required_unless_present = "confusion")]
        grades: Option<PathBuf>,
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn run_config(path: Option<&Path>, profile: Profile, pinned: bool) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p, profile, pinned)?,
        None => RunConfig::for_profile(profile),
    };
    cfg.with_env_seed()
}

fn grades_matrix(grades: Option<&Path>, confusion: Option<&Path>) -> Result<Option<stats::Confusion>> {
    match (grades, confusion) {
        (Some(g), _) => Ok(Some(stats::confusion_matrix(&stats::read_grades_csv(g)?)?)),
        (None, Some(c)) => Ok(Some(stats::read_confusion_csv(c)?)),
        (None, None) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            count,
            seed,
            config,
        } => {
            let mut cfg: PhantomConfig = read_config(config.as_deref())?;
            cfg.validate()?;
            if let Some(s) = seed.or(experiment::env_seed()?) {
                cfg.seed = s;
            }
            generate_cohort(count, &cfg, &out)?;
            println!("{}", out.join(MANIFEST_FILE).display());
        }
        Command::Preprocess { image, out, config } => {
            let settings: PreprocessSettings = read_config(config.as_deref())?;
            let v = volume_io::preprocess(&volume_io::read_volume(&image)?, &settings)?;
            volume_io::write_volume(&v, &out)?;
        }
        Command::Train {
            manifest,
            config,
            fold,
            seed,
            out,
        } => {
            let cfg = run_config(config.as_deref(), Profile::Desk, false)?;
            let cohort = Cohort::open(&manifest)?;
            let ids = cohort.ids();
            let plan = make_fold_plan(&ids, cfg.num_folds, experiment::derive_seed(cfg.seed, 1))?;
            let data = ids
                .iter()
                .map(|id| Ok((id.clone(), prepare_image(&cohort, id, &cfg.preprocess)?)))
                .collect::<Result<_>>()?;
            let ckpts = train_one(fold, seed, &plan, &data, &cfg.training, &cfg.network, Some(&out))?;
            let listing: Vec<_> = ckpts
                .iter()
                .map(|c| {
                    serde_json::json!({
                        "iteration": c.iteration,
                        "dir": training::checkpoint_dir(&out, fold, seed, c.iteration),
                        "val_loss": c.val_losses,
                    })
                })
                .collect();
            print_json(&listing)?;
        }
        Command::Infer {
            image,
            checkpoints,
            out,
            save_probs,
            overlap,
            config,
        } => {
            let settings: PreprocessSettings = read_config(config.as_deref())?;
            let params = checkpoints
                .iter()
                .map(|d| Ok(load_checkpoint(d)?.params))
                .collect::<Result<Vec<_>>>()?;
            let raw = volume_io::read_volume(&image)?;
            let result = segment(&params, &raw, &settings, overlap)?;
            volume_io::write_labels(&result.labels, &out)?;
            if save_probs {
                let prepared = volume_io::preprocess(&raw, &settings)?;
                let pred = predict_volume(&params, &prepared, params[0].spec.patch_shape, overlap)?;
                let probs = pred.probabilities.expect("predict_volume keeps probabilities");
                let n = prepared.grid.len();
                let stem = out.with_extension("");
                for c in 0..NUM_CLASSES {
                    let v = Volume::new(prepared.grid, probs[c * n..(c + 1) * n].to_vec(), IntensityKind::Normalized)?;
                    let mut name = stem.as_os_str().to_owned();
                    name.push(format!("_prob{c}.vol"));
                    volume_io::write_volume(&v, PathBuf::from(name))?;
                }
            }
            print_json(&result.provenance)?;
        }
        Command::Eval {
            auto,
            reference,
            out,
        } => {
            let report = evaluate(&volume_io::read_labels(&auto)?, &volume_io::read_labels(&reference)?)?;
            match out {
                Some(p) => {
                    let text = serde_json::to_string_pretty(&report)? + "\n";
                    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                }
                None => print_json(&report)?,
            }
        }
        Command::Stats { command } => match command {
            StatsCommand::BlandAltman { pairs } => {
                let rows = stats::read_pairs_csv(&pairs)?;
                let p: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();
                print_json(&serde_json::json!({
                    "bland_altman": stats::bland_altman(&p)?,
                    "paired_t_test": stats::paired_t_test(&p)?,
                }))?;
            }
            StatsCommand::Tost { pairs, margin, alpha } => {
                let rows = stats::read_pairs_csv(&pairs)?;
                let p: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();
                print_json(&stats::tost_equivalence(&p, margin, alpha)?)?;
            }
            StatsCommand::Kappa { grades, confusion } => {
                let m = grades_matrix(grades.as_deref(), confusion.as_deref())?.expect("clap requires one input");
                print_json(&stats::agreement_summary(&m)?)?;
            }
        },
        Command::Grade { auto, reference } => {
            print_json(&auto_grade(&volume_io::read_labels(&auto)?, &volume_io::read_labels(&reference)?)?)?;
        }
        Command::Crossval {
            out,
            config,
            profile,
            seed,
        } => {
            let mut cfg = run_config(config.as_deref(), profile, true)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            print_json(&experiment::run_crossval(&cfg, &out)?)?;
        }
        Command::Report {
            experiment: exp,
            grades,
            confusion,
        } => {
            let m = grades_matrix(grades.as_deref(), confusion.as_deref())?;
            for p in experiment::run_report(&exp, m.as_ref())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
