use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tpm_core::geometry::{generate_corpus, DataSplits, Dataset, NUM_SHAPES};
use tpm_core::loss::LambdaMode;
use tpm_core::masking::parse_constructions;
use tpm_core::pipeline::{
    ablate, fewshot_run, finetune_run, pretrain, probe_run, select_run, AblationPlan, FewshotProtocol, Run,
    RunConfig,
};
use tpm_core::probe::SelectionRule;

#[derive(Parser)]
#[command(name = "tpm", version, about = "Triple point masking pre-training for point cloud autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Cls,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus (train.tpmd and val.tpmd).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = NUM_SHAPES)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        /// Val clouds per class; defaults to a fifth of --per-class.
        #[arg(long)]
        val_per_class: Option<usize>,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train with the configured masks, probing and selecting as it goes.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-probe every checkpoint of a run under every mask.
    Probe {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory; defaults to the one recorded at pre-training.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Select weights from a run's probe table.
    Select {
        #[arg(long)]
        run: PathBuf,
    },
    /// Fine-tune the selected encoder with a classification head.
    Finetune {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "cls")]
        task: Task,
        #[arg(long)]
        freeze_encoder: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Which mask's best checkpoint to use, e.g. w0->m0.
        #[arg(long, default_value = "w0->m0")]
        rule: SelectionRule,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Episodic few-shot evaluation with the selected encoder frozen.
    Fewshot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        way: usize,
        #[arg(long)]
        shot: usize,
        #[arg(long)]
        query: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the mask-construction / loss-weighting / selection-rule grid.
    Ablate {
        /// Semicolon-separated constructions, e.g. "0.6,0.5,0.4;0.6,0.4".
        #[arg(long)]
        masks: String,
        #[arg(long, value_delimiter = ',', default_value = "normalized")]
        lambda_modes: Vec<LambdaMode>,
        #[arg(long, value_delimiter = ',', default_value = "w0->m0")]
        selection_rules: Vec<SelectionRule>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration as JSON.
    DefaultConfig,
}

const DATA_POINTER: &str = "data_dir.txt";

fn load_config(path: Option<&PathBuf>) -> tpm_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn data_for(run: &Run, explicit: Option<PathBuf>) -> tpm_core::Result<DataSplits> {
    let dir = match explicit {
        Some(d) => d,
        None => PathBuf::from(std::fs::read_to_string(run.dir.join(DATA_POINTER))?.trim()),
    };
    DataSplits::load(&dir)
}

fn run(cli: Cli) -> tpm_core::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            classes,
            per_class,
            val_per_class,
            points,
            seed,
        } => {
            let val_per_class = val_per_class.unwrap_or((per_class / 5).max(1));
            let train = generate_corpus(classes, per_class, points, seed)?;
            let val = generate_corpus(classes, val_per_class, points, tpm_core::rng::derive_seed(seed, &[1]))?;
            let splits = DataSplits { train, val };
            splits.save(&out)?;
            println!(
                "wrote {} train and {} val clouds to {}",
                splits.train.len(),
                splits.val.len(),
                out.display()
            );
        }
        Command::Pretrain { config, data, out } => {
            let cfg = load_config(config.as_ref())?;
            let splits = DataSplits::load(&data)?;
            let outcome = pretrain(&cfg, &splits, &out)?;
            std::fs::write(out.join(DATA_POINTER), std::fs::canonicalize(&data)?.display().to_string())?;
            let last = outcome.metrics.last().expect("at least one epoch");
            println!("final loss {:.6} after {} epochs", last.loss_total, last.epoch);
            if let Some(s) = outcome.selection {
                println!(
                    "selected epoch {} (mask {} probe accuracy {:.4})",
                    s.selected_epoch, s.selected_mask_index, s.selected_accuracy
                );
            }
        }
        Command::Probe { run, data } => {
            let run = Run::open(&run)?;
            let splits = data_for(&run, data)?;
            let rows = probe_run(&run, &splits)?;
            println!("wrote {} probe rows", rows.len());
        }
        Command::Select { run } => {
            let s = select_run(&Run::open(&run)?)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Finetune {
            run,
            task: Task::Cls,
            freeze_encoder,
            epochs,
            rule,
            data,
        } => {
            let run = Run::open(&run)?;
            let splits = data_for(&run, data)?;
            let mut cfg = run.manifest.config.finetune.clone();
            cfg.freeze_encoder |= freeze_encoder;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let r = finetune_run(&run, &splits, &cfg, rule)?;
            println!(
                "val accuracy {:.4} ({} classes, {} trainable parameters)",
                r.final_val_accuracy, r.num_classes, r.trainable_parameters
            );
        }
        Command::Fewshot {
            run,
            way,
            shot,
            query,
            trials,
            seed,
            split,
            data,
        } => {
            let run = Run::open(&run)?;
            let splits = data_for(&run, data)?;
            let dataset: Dataset = match split {
                Split::Train => splits.train,
                Split::Val => splits.val,
            };
            let protocol = FewshotProtocol {
                way,
                shot,
                query,
                trials,
                seed: seed.unwrap_or(run.manifest.seed),
            };
            let r = fewshot_run(&run, &dataset, protocol, &run.manifest.config.fewshot, SelectionRule(0))?;
            println!("{r}");
        }
        Command::Ablate {
            masks,
            lambda_modes,
            selection_rules,
            config,
            data,
            out,
        } => {
            let plan = AblationPlan {
                constructions: parse_constructions(&masks)?,
                lambda_modes,
                selection_rules,
            };
            let cfg = load_config(config.as_ref())?;
            let splits = DataSplits::load(&data)?;
            let rows = ablate(&cfg, &splits, &plan, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.join(tpm_core::pipeline::ABLATION_FILE).display());
        }
        Command::DefaultConfig => println!("{}", RunConfig::default().to_json()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
