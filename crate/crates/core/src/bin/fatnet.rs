use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fatnet::checkpoint;
use fatnet::config::{KeyValues, RunConfig};
use fatnet::data::{self, gen_seg_synthetic, gen_synthetic, save_dataset, CloudFile, PoseRange, SegSyntheticSpec, SyntheticSpec};
use fatnet::experiments::{run_ablation_suite, run_dropout_experiment, Variant};
use fatnet::geometry::{normalize_unit_sphere, parse_off, sample_surface};
use fatnet::gradcheck::{self, GradcheckSpec, TOLERANCE};
use fatnet::params::Mode;
use fatnet::train::{evaluate, train_to_dir};
use fatnet::{rng, Error, Model, Result, Task};

#[derive(Parser)]
#[command(name = "fatnet", version, about = "Feature-attentive point cloud networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus flag overrides.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set k=10`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    /// Dataset directory with train/ and test/ subdirectories
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            kv.set(k.trim(), v.trim());
        }
        let flags = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("points", self.points.map(|v| v.to_string())),
            ("dataset", self.dataset.as_ref().map(|v| v.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                kv.set(k, &v);
            }
        }
        RunConfig::from_kv(&kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as train/ and test/ directories
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "classify")]
        task: Task,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long, default_value_t = 64)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample an OFF mesh into a point file
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1024)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Center and scale into the unit sphere
        #[arg(long)]
        normalize: bool,
        /// Class label stored in the file
        #[arg(long)]
        label: Option<u32>,
    },
    /// Train a model and write checkpoints and history
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the configured train or test split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Check analytic gradients of a tiny classifier against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batch-norm mode: train or eval
        #[arg(long, default_value = "train")]
        bn: String,
    },
    /// Accuracy under random point dropout
    Dropout {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated keep counts
        #[arg(long, value_delimiter = ',', required = true)]
        keep: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train ablation variants over several seeds
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated variant names
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter count and the resolved configuration
    Info {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth {
            out,
            task,
            classes,
            samples_per_class,
            test_per_class,
            points,
            seed,
        } => {
            for (split, per) in [("train", samples_per_class), ("test", test_per_class)] {
                let split_seed = rng::derive_seed(seed, &format!("data/{split}"));
                let ds = match task {
                    Task::Classification => {
                        let mut spec = SyntheticSpec::new(classes, per, points, 0)?;
                        spec.seed = split_seed;
                        gen_synthetic(&spec)?
                    }
                    Task::Segmentation => gen_seg_synthetic(&SegSyntheticSpec {
                        samples_per_category: per,
                        points,
                        pose: PoseRange::default(),
                        seed: split_seed,
                    })?,
                };
                save_dataset(&out.join(split), &ds)?;
                println!("{split}: {} clouds -> {}", ds.len(), out.join(split).display());
            }
        }
        Command::Sample {
            input,
            output,
            points,
            seed,
            normalize,
            label,
        } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let mut pc = sample_surface(&parse_off(&text)?, points, seed)?;
            if normalize {
                pc = normalize_unit_sphere(&pc);
            }
            CloudFile::from_cloud(&pc, label.map(|l| vec![l])).write(&output)?;
            println!("{} points -> {}", pc.len(), output.display());
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            let (train_set, test_set) = data::load_splits(&cfg)?;
            let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write(&out.join("config.txt"), &cfg.to_kv().render())?;
            let metric = match cfg.model.task {
                Task::Classification => "val_acc",
                Task::Segmentation => "val_miou",
            };
            train_to_dir(&mut model, &train_set, Some(&test_set), &cfg.train, &out, |r| {
                println!(
                    "epoch {:>4}  lr {:.2e}  loss {:.4}  train_acc {:.4}  {metric} {:.4}",
                    r.epoch,
                    r.lr,
                    r.train_loss,
                    r.train_acc,
                    r.val_metric.unwrap_or(f64::NAN)
                );
            })?;
        }
        Command::Eval {
            cfg,
            checkpoint: path,
            split,
        } => {
            let cfg = cfg.resolve()?;
            let model = checkpoint::load(&path)?;
            let (train_set, test_set) = data::load_splits(&RunConfig {
                model: model.config.clone(),
                ..cfg
            })?;
            let ds = match split.as_str() {
                "train" => &train_set,
                "test" => &test_set,
                o => return Err(Error::Config(format!("unknown split `{o}` (expected train|test)"))),
            };
            let ev = evaluate(&model, ds, 32)?;
            match (ev.accuracy, ev.miou) {
                (Some(a), _) => println!("{split}_acc {:.4}  class_acc {:.4}", a.instance, a.class),
                (_, Some(m)) => println!("{split}_miou {m:.4}"),
                _ => unreachable!(),
            }
        }
        Command::Gradcheck { seed, bn } => {
            let mut spec = GradcheckSpec::tiny(seed);
            spec.mode = match bn.as_str() {
                "train" => Mode::Train,
                "eval" => Mode::Eval,
                o => return Err(Error::Config(format!("unknown bn mode `{o}` (expected train|eval)"))),
            };
            let r = gradcheck::run(&spec)?;
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            println!(
                "max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}) over {} parameters, {} kinks (gate {TOLERANCE:e}): {verdict}",
                r.max_rel_err, r.worst, r.worst_pair.0, r.worst_pair.1, r.checked, r.kinks
            );
            return Ok(r.passed());
        }
        Command::Dropout {
            cfg,
            checkpoint: path,
            keep,
            repeats,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let model = checkpoint::load(&path)?;
            let (_, test_set) = data::load_splits(&RunConfig {
                model: model.config.clone(),
                ..cfg.clone()
            })?;
            let table = run_dropout_experiment(&model, &test_set, &keep, repeats, cfg.train.seed)?;
            let csv = table.to_csv();
            print!("{csv}");
            if let Some(p) = out {
                write(&p, &csv)?;
            }
        }
        Command::Ablate {
            cfg,
            variants,
            seeds,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let variants = variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
            let (train_set, test_set) = data::load_splits(&cfg)?;
            let report = run_ablation_suite(&cfg.model, &train_set, &test_set, &variants, &seeds, &cfg.train, |v, s, m| {
                eprintln!("{v} seed {s}: {m:.4}")
            })?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(p) = out {
                write(&p, &csv)?;
            }
        }
        Command::Info { cfg } => {
            let cfg = cfg.resolve()?;
            let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            println!("parameters = {}", model.count_parameters());
            print!("{}", cfg.to_kv().render());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage = !matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
