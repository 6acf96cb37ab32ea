use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use spurtrain_core::contaminate::{contaminate_dataset, permute_contaminate, ContaminationSpec};
use spurtrain_core::data::{load_mnist_idx, save_masks, save_mnist_idx, Dataset};
use spurtrain_core::eval::model_overlap;
use spurtrain_core::experiment::{
    benchmark_throughput, export_saliency, run_groundtruth_experiment, run_teacher_experiment, sweep_lambda,
    write_manifest, ExperimentConfig, RunManifest,
};
use spurtrain_core::nn::{build_cnn, ModelSpec};
use spurtrain_core::{Model, XsConfig, XsMethod};

#[derive(Parser)]
#[command(name = "spurtrain", version, about = "Explanatory-supervision experiments on decoy MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Patch,
    Stripe,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Tap,
    Rrr,
}

#[derive(Subcommand)]
enum Command {
    /// Print the desk-scale default configuration as JSON.
    InitConfig {
        /// Directory holding the four MNIST IDX files.
        #[arg(long, default_value = "data/mnist-subset")]
        data: PathBuf,
    },
    /// Stamp spurious signals into an IDX dataset and write images, labels and masks.
    Contaminate {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "patch")]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Encode a random relabelling of the classes instead of the true label.
        #[arg(long)]
        permute: bool,
    },
    /// Ground-truth experiment: base, unpenalised and penalised models per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "SPURTRAIN_OUT")]
        out: Option<PathBuf>,
    },
    /// Teacher-student experiment.
    Teach {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "SPURTRAIN_OUT")]
        out: Option<PathBuf>,
    },
    /// Pick λ by permuted-validation loss.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Top-quartile overlap of a checkpoint's explanations with the stamped pixels.
    Overlap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        limit: usize,
    },
    /// Write PGM images of inputs, masks, input gradients and activation maps.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        indices: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Minibatch throughput of the unpenalised, TAP and RRR objectives.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn read_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ExperimentConfig::from_json(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<Model> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Model::load(ModelSpec::two_layer_cnn(cfg.model, 28, 28, 10), 0, std::io::BufReader::new(file))?)
}

/// Contaminated test images for the evaluation commands.
fn test_set(cfg: &ExperimentConfig, seed: u64, limit: usize) -> anyhow::Result<Dataset> {
    let mut test = load_mnist_idx(&cfg.data.test_images, &cfg.data.test_labels)?;
    test.images.truncate(limit);
    let spec = ContaminationSpec { seed, ..cfg.contamination };
    Ok(contaminate_dataset(&test, &spec)?)
}

fn save_run(manifest: &RunManifest, dir: &Path) -> anyhow::Result<()> {
    let mut written = write_manifest(manifest, dir)?;
    for run in &manifest.runs {
        if let Some(model) = &run.model {
            let path = dir.join(format!("{}_seed{}.sptr", run.name, run.seed));
            let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            model.save(std::io::BufWriter::new(file))?;
            written.push(path);
        }
    }
    for run in &manifest.runs {
        let acc = |s| run.value(s, spurtrain_core::eval::MetricKind::Accuracy).unwrap_or(f64::NAN);
        use spurtrain_core::eval::Split::*;
        println!(
            "{:<15} seed {:<3} contaminated {:.4}  permuted {:.4}  clean {:.4}  {:.1} it/s",
            run.name,
            run.seed,
            acc(Contaminated),
            acc(Permuted),
            acc(Clean),
            run.it_per_sec
        );
    }
    for t in &manifest.teacher {
        println!(
            "annotations     seed {:<3} density {:.4}  teacher recall {:.4}  random recall {:.4}",
            t.seed, t.mask_density, t.teacher_quality.recall, t.random_quality.recall
        );
    }
    eprintln!("wrote {} files to {}", written.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::InitConfig { data } => {
            println!("{}", ExperimentConfig::desk(&data).to_json());
        }
        Command::Contaminate {
            images,
            labels,
            out,
            kind,
            seed,
            permute,
        } => {
            let ds = load_mnist_idx(&images, &labels)?;
            let spec = match kind {
                KindArg::Patch => ContaminationSpec::corner_patch(seed),
                KindArg::Stripe => ContaminationSpec::stripe(ContaminationSpec::default().stripe_step, seed),
            };
            let stamped = if permute {
                let (d, perm) = permute_contaminate(&ds, &spec, seed)?;
                println!("permutation {perm:?}");
                d
            } else {
                contaminate_dataset(&ds, &spec)?
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_mnist_idx(&stamped, &out.join("images-idx3-ubyte.gz"), &out.join("labels-idx1-ubyte.gz"))?;
            save_masks(&stamped, &out.join("masks-idx3-ubyte.gz"))?;
            println!("{} images written to {}", stamped.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = read_config(&config)?;
            let manifest = run_groundtruth_experiment(&cfg)?;
            save_run(&manifest, &out_dir(&cfg, out))?;
        }
        Command::Teach { config, out } => {
            let cfg = read_config(&config)?;
            if cfg.teacher.is_none() {
                bail!("{} has no teacher block", config.display());
            }
            let manifest = run_teacher_experiment(&cfg)?;
            save_run(&manifest, &out_dir(&cfg, out))?;
        }
        Command::Sweep {
            config,
            method,
            grid,
            seed,
        } => {
            let cfg = read_config(&config)?;
            let base = match method {
                MethodArg::Tap => XsConfig::tap(0.0),
                MethodArg::Rrr => XsConfig::rrr(0.0),
            };
            let r = sweep_lambda(&cfg, &base, &grid, seed)?;
            println!("lambda,validation_loss,permuted_accuracy");
            for row in &r.table {
                println!("{},{},{}", row.lambda, row.validation_loss, row.permuted_accuracy);
            }
            println!("best {} lambda {}", r.method.name(), r.best_lambda);
        }
        Command::Overlap {
            config,
            checkpoint,
            seed,
            limit,
        } => {
            let cfg = read_config(&config)?;
            let model = load_checkpoint(&cfg, &checkpoint)?;
            let test = test_set(&cfg, seed, limit)?;
            for r in model_overlap(&model, &test, 0.25, seed)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Export {
            config,
            checkpoint,
            out,
            indices,
            seed,
        } => {
            let cfg = read_config(&config)?;
            let model = load_checkpoint(&cfg, &checkpoint)?;
            let limit = indices.iter().max().map_or(0, |m| m + 1);
            let test = test_set(&cfg, seed, limit)?;
            let files = export_saliency(&model, &test, &indices, &out)?;
            println!("{} files written to {}", files.len(), out.display());
        }
        Command::Bench { config, steps, repeats } => {
            let cfg = read_config(&config)?;
            let test = test_set(&cfg, 0, cfg.sgd.batch_size)?;
            let batch = test.batch(&(0..test.len()).collect::<Vec<_>>())?;
            let model = build_cnn(cfg.model, 0);
            let lambda = |m: XsMethod| cfg.xs.iter().find(|x| x.method == m).map_or(1e-3, |x| x.lambda);
            let methods = [
                XsConfig::none(),
                XsConfig::tap(lambda(XsMethod::Tap)),
                XsConfig::rrr(lambda(XsMethod::Rrr)),
            ];
            println!("method,it_per_sec,graph_bytes");
            for t in benchmark_throughput(&model, &batch, &methods, &cfg.sgd, 2, steps, repeats)? {
                println!("{},{:.2},{}", t.method.name(), t.it_per_sec, t.graph_bytes);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
