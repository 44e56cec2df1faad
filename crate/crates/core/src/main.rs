use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lma_core::backbone::BackboneConfig;
use lma_core::error::{Error, Result};
use lma_core::gradcheck::{check_model, randomize_adaptors, GradCheckOptions, MODEL_CHECK_STEP};
use lma_core::metrics::{self, BiasSource};
use lma_core::synth::{self, DatasetConfig, Split};
use lma_core::trainer::{self, Mode, RunConfig};

#[derive(Parser)]
#[command(name = "lma", version, about = "Shared backbone with low-rank modal adaptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    HighFrequency,
    Homogeneous,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Dataset config JSON; overrides --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long)]
        val_samples: Option<usize>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model, or continue one from a checkpoint.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        /// Adaptor rank for lma_fixed.
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy of a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Correlation histograms between modality features.
    AnalyzeBias {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Heterogeneity proxy per tap.
    DepthProfile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Average active adaptor rank per block.
    RankReport {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Parameter counts and increments over the unimodal model.
    ParamReport {
        /// Run config or bare backbone config JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference check of model gradients.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        max_entries: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A run config, or a bare backbone config wrapped in a default run.
fn load_any_config(path: &Path) -> Result<RunConfig> {
    let text = read_text(path)?;
    match RunConfig::from_json(&text) {
        Ok(c) => Ok(c),
        Err(run_err) => match serde_json::from_str::<BackboneConfig>(&text) {
            Ok(backbone) => {
                let mut c = RunConfig::new("", Mode::LmaFixed);
                c.fixed_rank = Some(backbone.rank);
                c.backbone = backbone;
                Ok(c)
            }
            Err(_) => Err(run_err),
        },
    }
}

fn dataset_for(checkpoint: &Path, dataset: Option<PathBuf>) -> Result<PathBuf> {
    match dataset {
        Some(d) => Ok(d),
        None => {
            let ck = lma_core::checkpoint::Checkpoint::read(checkpoint)?;
            let text = std::str::from_utf8(ck.require_blob("config.json")?)
                .map_err(|_| Error::InvalidArgument("config echo is not UTF-8".into()))?
                .to_string();
            Ok(RunConfig::from_json(&text)?.dataset)
        }
    }
}

fn sample_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    (0..limit.map_or(n, |l| l.min(n))).collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            config,
            preset,
            seed,
            train_samples,
            val_samples,
            overwrite,
        } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_str(&read_text(&p)?)?,
                None => match preset {
                    Preset::Default => DatasetConfig::default_benchmark(),
                    Preset::HighFrequency => DatasetConfig::high_frequency(),
                    Preset::Homogeneous => DatasetConfig::homogeneous_only(),
                },
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = train_samples {
                cfg.train_samples = n;
            }
            if let Some(n) = val_samples {
                cfg.val_samples = n;
            }
            for f in synth::make_dataset(&cfg, &out, overwrite)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Train {
            config,
            resume,
            mode,
            r,
            seed,
            dataset,
            output,
            epochs,
        } => {
            let outcome = if let Some(ck) = resume {
                trainer::resume(&ck)?
            } else {
                let path = config.expect("clap enforces --config without --resume");
                let mut c = RunConfig::load(&path)?;
                if let Some(m) = mode {
                    c.mode = m.parse()?;
                }
                if let Some(r) = r {
                    c.fixed_rank = Some(r);
                }
                if let Some(s) = seed {
                    c.seed = s;
                }
                if let Some(d) = dataset {
                    c.dataset = d;
                }
                if let Some(o) = output {
                    c.output_dir = o;
                }
                if let Some(e) = epochs {
                    c.epochs = e;
                }
                trainer::train(&c)?
            };
            let last = outcome.session.history.last();
            println!(
                "mode={} epochs={} final_loss={} val_accuracy={:.4} active_rank_total={}",
                outcome.session.config.mode.as_str(),
                outcome.session.epoch,
                last.map_or(f64::NAN, |r| r.loss),
                outcome.val.accuracy,
                outcome.session.model.active_rank_total()
            );
            println!("checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => {
            let dir = dataset_for(&checkpoint, dataset)?;
            let model = trainer::load_model(&checkpoint)?;
            let data = synth::load_split(&dir, split.into())?;
            let report = trainer::evaluate(&model, &data)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::AnalyzeBias {
            checkpoint,
            source,
            dataset,
            split,
            samples,
        } => {
            let source: BiasSource = source.parse()?;
            let dir = dataset_for(&checkpoint, dataset)?;
            let model = trainer::load_model(&checkpoint)?;
            let data = synth::load_split(&dir, split.into())?;
            let hists = metrics::bias_histograms(&model, &data, &sample_indices(data.len(), samples), source)?;
            print!("{}", metrics::histograms_csv(&hists));
        }
        Command::DepthProfile {
            checkpoint,
            dataset,
            split,
            samples,
        } => {
            let dir = dataset_for(&checkpoint, dataset)?;
            let model = trainer::load_model(&checkpoint)?;
            let data = synth::load_split(&dir, split.into())?;
            let points = metrics::depth_profile(&model, &data, &sample_indices(data.len(), samples))?;
            print!("{}", metrics::depth_profile_csv(&points));
        }
        Command::RankReport { checkpoint } => {
            let ck = lma_core::checkpoint::Checkpoint::read(&checkpoint)?;
            let session = trainer::Session::from_checkpoint(&ck)?;
            let report = metrics::rank_report(&session.model, session.config.r_init, session.config.r_target);
            print!("{}", metrics::rank_report_csv(&report));
        }
        Command::ParamReport { config, csv } => {
            let c = load_any_config(&config)?;
            let backbone = c.backbone.clone().with_rank(c.build_rank().max(1));
            let reports = metrics::param_reports_for(&backbone)?;
            if csv {
                print!("{}", metrics::param_reports_csv(&reports));
            } else {
                for r in &reports {
                    println!("{}", r.increment_line());
                }
            }
            if let Some(bad) = reports.iter().find(|r| !r.storage_matches_closed_form()) {
                return Err(Error::InvalidArgument(format!(
                    "stored count {} differs from closed form {}",
                    bad.total_params, bad.closed_form_total
                )));
            }
        }
        Command::GradCheck {
            config,
            seed,
            max_entries,
            batch,
            tolerance,
        } => {
            let c = load_any_config(&config)?;
            let mut model = c.build_model()?;
            randomize_adaptors(&mut model, 0.5, seed);
            let opts = GradCheckOptions {
                step: MODEL_CHECK_STEP,
                max_entries_per_param: Some(max_entries),
                seed,
                kink_safe: true,
            };
            let report = check_model(&model, batch, &opts)?;
            for p in &report.params {
                println!("{:<24} checked={:<4} max_rel_error={:.3e}", p.name, p.checked, p.max_rel_error);
            }
            let ok = report.passes(tolerance);
            println!(
                "max_rel_error={:.3e} tolerance={tolerance:e} {}",
                report.max_rel_error(),
                if ok { "PASS" } else { "FAIL" }
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
