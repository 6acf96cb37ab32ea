//! End-to-end experiment recipes: ground-truth and teacher annotations,
//! λ sweeps, throughput measurement and saliency export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contaminate::{
    contaminate_dataset, draw_permutation, mask_density, permute_contaminate_with, random_masks,
    split_for_teacher, split_indices, ContaminationSpec,
};
use crate::data::{load_mnist_idx, write_pgm, Dataset};
use crate::eval::{
    evaluate, input_gradient_maps, model_overlap, upsample_bins, MetricKind, MetricsRecord,
    OverlapRecord, Split,
};
use crate::nn::{build_cnn, task_loss, train, CnnWidths, EpochSummary, Model, SgdConfig};
use crate::teacher::{
    annotate_dataset, mean_quality, train_teacher, AnnotationQuality, SaliencyTarget,
};
use crate::tensor::{cross_entropy, grad_with, GradOptions, Graph, Tensor};
use crate::xsloss::{XsConfig, XsMethod};
use crate::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Use only the first `n` training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

impl DataConfig {
    /// Standard MNIST file names inside `dir`, gzipped.
    pub fn mnist_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte.gz"),
            train_labels: dir.join("train-labels-idx1-ubyte.gz"),
            test_images: dir.join("t10k-images-idx3-ubyte.gz"),
            test_labels: dir.join("t10k-labels-idx1-ubyte.gz"),
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        for p in [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ] {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        self.check_paths()?;
        let mut train = load_mnist_idx(&self.train_images, &self.train_labels)?;
        let mut test = load_mnist_idx(&self.test_images, &self.test_labels)?;
        if let Some(n) = self.train_limit {
            train.images.truncate(n);
        }
        if let Some(n) = self.test_limit {
            test.images.truncate(n);
        }
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub clean_fraction: f64,
    pub tau: f64,
    #[serde(default)]
    pub target: SaliencyTarget,
    /// Teacher training schedule; defaults to the student's.
    #[serde(default)]
    pub sgd: Option<SgdConfig>,
    /// Penalty used by the students trained on teacher and random masks.
    pub student: XsConfig,
    /// Teacher widths; defaults to the student's.
    #[serde(default)]
    pub model: Option<CnnWidths>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub contamination: ContaminationSpec,
    #[serde(default = "desk_widths")]
    pub model: CnnWidths,
    /// Penalised models trained alongside the unpenalised one.
    #[serde(default)]
    pub xs: Vec<XsConfig>,
    /// Also train the base model on uncontaminated images.
    #[serde(default = "yes")]
    pub include_base: bool,
    pub sgd: SgdConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    /// Compute top-quartile overlap for every trained model.
    #[serde(default)]
    pub overlap: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn desk_widths() -> CnnWidths {
    CnnWidths::DESK
}

fn yes() -> bool {
    true
}

fn default_validation() -> f64 {
    0.1
}

/// Learning schedule used for the desk-scale runs.
pub fn desk_sgd() -> SgdConfig {
    SgdConfig {
        learning_rate: 0.01,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 64,
        epochs: 10,
    }
}

impl ExperimentConfig {
    /// Desk-scale decoy experiment on the MNIST files in `dir`.
    pub fn desk(dir: &Path) -> Self {
        Self {
            data: DataConfig::mnist_dir(dir),
            contamination: ContaminationSpec::corner_patch(0),
            model: CnnWidths::DESK,
            xs: vec![XsConfig::tap(1e-3), XsConfig::rrr(1e-3)],
            include_base: true,
            sgd: desk_sgd(),
            seeds: vec![0, 1, 2],
            validation_fraction: 0.1,
            teacher: None,
            overlap: false,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid!("at least one seed is required"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(invalid!("validation fraction must lie in (0, 1)"));
        }
        self.sgd.validate()?;
        for xs in &self.xs {
            xs.validate()?;
        }
        if let Some(t) = &self.teacher {
            t.student.validate()?;
            if let Some(s) = &t.sgd {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: 0,
            detail: format!("config line {} column {}: {e}", e.line(), e.column()),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&canonical)
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

/// Mixes a run seed with a purpose tag so independent streams never collide.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(tag.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Every dataset one seed of an experiment needs.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train_clean: Dataset,
    pub train: Dataset,
    pub val_permuted: Dataset,
    pub test_clean: Dataset,
    pub test: Dataset,
    pub test_permuted: Dataset,
    pub permutation: Vec<usize>,
}

/// Seeded validation split plus contaminated, permuted and clean variants.
pub fn prepare_splits(
    cfg: &ExperimentConfig,
    train_all: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<Splits> {
    let n_val = (cfg.validation_fraction * train_all.len() as f64).round() as usize;
    if n_val == 0 || n_val >= train_all.len() {
        return Err(invalid!(
            "validation split of {} images is empty or total",
            train_all.len()
        ));
    }
    let (val_idx, train_idx) =
        split_indices(train_all.len(), n_val, derive_seed(seed, "validation"));
    let train_clean = train_all.subset(&train_idx);
    let val_clean = train_all.subset(&val_idx);
    let spec = |tag: &str| ContaminationSpec {
        seed: derive_seed(seed ^ cfg.contamination.seed, tag),
        ..cfg.contamination
    };
    let permutation = draw_permutation(train_all.num_classes(), derive_seed(seed, "permutation"));
    Ok(Splits {
        train: contaminate_dataset(&train_clean, &spec("train"))?,
        val_permuted: permute_contaminate_with(&val_clean, &spec("validation"), &permutation)?,
        test: contaminate_dataset(test, &spec("test"))?,
        test_permuted: permute_contaminate_with(test, &spec("test"), &permutation)?,
        test_clean: test.clone(),
        train_clean,
        permutation,
    })
}

/// A trained model with everything measured about it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelRun {
    pub seed: u64,
    pub name: String,
    pub metrics: Vec<MetricsRecord>,
    pub overlap: Vec<OverlapRecord>,
    pub epochs: Vec<EpochSummary>,
    pub train_seconds: f64,
    pub it_per_sec: f64,
    pub peak_graph_bytes: usize,
    #[serde(skip)]
    pub model: Option<Model>,
}

impl ModelRun {
    pub fn value(&self, split: Split, kind: MetricKind) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.split == split && m.metric == kind)
            .map(|m| m.value)
    }

    /// Accuracy on contaminated minus accuracy on permuted test images.
    pub fn delta_accuracy(&self) -> Option<f64> {
        Some(
            self.value(Split::Contaminated, MetricKind::Accuracy)?
                - self.value(Split::Permuted, MetricKind::Accuracy)?,
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub seed: u64,
    pub mask_density: f64,
    pub teacher_quality: AnnotationQuality,
    pub random_quality: AnnotationQuality,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub runs: Vec<ModelRun>,
    #[serde(default)]
    pub teacher: Vec<TeacherSummary>,
    /// Largest graph payload of any training step, in bytes.
    pub peak_graph_bytes: usize,
}

impl RunManifest {
    pub fn runs_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ModelRun> + 'a {
        self.runs.iter().filter(move |r| r.name == name)
    }

    /// Mean of `f` over the runs called `name`.
    pub fn mean(&self, name: &str, f: impl Fn(&ModelRun) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.runs_named(name).filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Display name of a penalised model, e.g. `tap` or `rrr`.
pub fn run_name(xs: &XsConfig) -> String {
    match xs.method {
        XsMethod::None => "no_xs".into(),
        m => m.name().into(),
    }
}

/// [`run_name`] for each config, suffixed with `λ` when a method appears
/// more than once, e.g. `tap_1e-3` and `tap_3e-2`.
pub fn run_names(xs: &[XsConfig]) -> Vec<String> {
    xs.iter()
        .map(|x| {
            if xs.iter().filter(|y| y.method == x.method).count() > 1 {
                format!("{}_{:e}", run_name(x), x.lambda)
            } else {
                run_name(x)
            }
        })
        .collect()
}

/// Trains `objective` from the seed's initialisation and evaluates it on the
/// test splits.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    name: &str,
    train_set: &Dataset,
    xs: &XsConfig,
    sgd: &SgdConfig,
    splits: &Splits,
    seed: u64,
) -> Result<ModelRun> {
    let mut model = build_cnn(cfg.model, derive_seed(seed, "init"));
    let start = Instant::now();
    let epochs = train(&mut model, train_set, xs, sgd, derive_seed(seed, "shuffle"))?;
    let train_seconds = start.elapsed().as_secs_f64();
    let steps: usize = epochs.iter().map(|e| e.steps).sum();
    let mut run = ModelRun {
        seed,
        name: name.to_string(),
        metrics: Vec::new(),
        overlap: Vec::new(),
        peak_graph_bytes: epochs.iter().map(|e| e.peak_graph_bytes).max().unwrap_or(0),
        it_per_sec: steps as f64 / train_seconds.max(1e-9),
        epochs,
        train_seconds,
        model: None,
    };
    evaluate_into(&mut run, &model, splits, sgd.epochs)?;
    if cfg.overlap {
        run.overlap = model_overlap(&model, &splits.test, 0.25, derive_seed(seed, "overlap"))?;
    }
    run.model = Some(model);
    Ok(run)
}

fn evaluate_into(run: &mut ModelRun, model: &Model, splits: &Splits, epoch: usize) -> Result<()> {
    for (split, ds) in [
        (Split::Contaminated, &splits.test),
        (Split::Permuted, &splits.test_permuted),
        (Split::Clean, &splits.test_clean),
    ] {
        run.metrics.push(MetricsRecord {
            seed: run.seed,
            epoch,
            split,
            metric: MetricKind::Accuracy,
            value: evaluate(model, ds, MetricKind::Accuracy)?,
        });
    }
    Ok(())
}

/// Runs `job` for every seed, at most `SPURTRAIN_THREADS` (default: all
/// cores) at a time, returning results in seed order.
pub fn for_each_seed<T: Send>(
    seeds: &[u64],
    job: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = std::env::var("SPURTRAIN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .min(seeds.len().max(1));
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(threads) {
        let results: Vec<Result<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let job = &job;
                    s.spawn(move || job(seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(invalid!("seed job panicked")))
                })
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Ground-truth annotations: per seed, the unpenalised model, each
/// configured penalty, and optionally a model trained on clean images.
pub fn run_groundtruth_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let (train_all, test) = cfg.data.load()?;
    run_groundtruth_on(cfg, &train_all, &test)
}

pub fn run_groundtruth_on(
    cfg: &ExperimentConfig,
    train_all: &Dataset,
    test: &Dataset,
) -> Result<RunManifest> {
    cfg.validate()?;
    let per_seed = for_each_seed(&cfg.seeds, |seed| {
        let splits = prepare_splits(cfg, train_all, test, seed)?;
        let mut runs = Vec::new();
        if cfg.include_base {
            runs.push(train_and_evaluate(
                cfg,
                "base",
                &splits.train_clean,
                &XsConfig::none(),
                &cfg.sgd,
                &splits,
                seed,
            )?);
        }
        runs.push(train_and_evaluate(
            cfg,
            "no_xs",
            &splits.train,
            &XsConfig::none(),
            &cfg.sgd,
            &splits,
            seed,
        )?);
        for (xs, name) in cfg.xs.iter().zip(run_names(&cfg.xs)) {
            runs.push(train_and_evaluate(
                cfg,
                &name,
                &splits.train,
                xs,
                &cfg.sgd,
                &splits,
                seed,
            )?);
        }
        Ok(runs)
    })?;
    let runs: Vec<ModelRun> = per_seed.into_iter().flatten().collect();
    Ok(RunManifest {
        config_hash: cfg.hash(),
        peak_graph_bytes: runs.iter().map(|r| r.peak_graph_bytes).max().unwrap_or(0),
        runs,
        teacher: Vec::new(),
    })
}

/// Teacher annotations: a teacher trained on a clean holdout annotates the
/// contaminated remainder; students are trained on those masks and on
/// random masks of the same density.
pub fn run_teacher_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let (train_all, test) = cfg.data.load()?;
    run_teacher_on(cfg, &train_all, &test)
}

pub fn run_teacher_on(
    cfg: &ExperimentConfig,
    train_all: &Dataset,
    test: &Dataset,
) -> Result<RunManifest> {
    cfg.validate()?;
    let tc = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| invalid!("teacher experiment needs a teacher block"))?;
    let per_seed = for_each_seed(&cfg.seeds, |seed| {
        let splits = prepare_splits(cfg, train_all, test, seed)?;
        let spec = ContaminationSpec {
            seed: derive_seed(seed ^ cfg.contamination.seed, "train"),
            ..cfg.contamination
        };
        let (holdout, remainder) = split_for_teacher(
            &splits.train_clean,
            tc.clean_fraction,
            &spec,
            derive_seed(seed, "teacher-split"),
        )?;

        let teacher_sgd = tc.sgd.unwrap_or(cfg.sgd);
        let mut teacher = build_cnn(
            tc.model.unwrap_or(cfg.model),
            derive_seed(seed, "teacher-init"),
        );
        let start = Instant::now();
        let epochs = train_teacher(
            &mut teacher,
            &holdout,
            &teacher_sgd,
            derive_seed(seed, "teacher-shuffle"),
        )?;
        let train_seconds = start.elapsed().as_secs_f64();
        let mut teacher_run = ModelRun {
            seed,
            name: "teacher".into(),
            metrics: Vec::new(),
            overlap: Vec::new(),
            peak_graph_bytes: epochs.iter().map(|e| e.peak_graph_bytes).max().unwrap_or(0),
            it_per_sec: epochs.iter().map(|e| e.steps).sum::<usize>() as f64
                / train_seconds.max(1e-9),
            epochs,
            train_seconds,
            model: None,
        };
        evaluate_into(&mut teacher_run, &teacher, &splits, teacher_sgd.epochs)?;

        let (annotated, quality) = annotate_dataset(
            &teacher,
            &remainder,
            tc.tau,
            tc.target,
            &format!("teacher-{seed}"),
        )?;
        let density = mask_density(&annotated);
        teacher_run.model = Some(teacher);

        let mut random = remainder.clone();
        let masks = random_masks(
            &remainder,
            density.max(f64::MIN_POSITIVE),
            derive_seed(seed, "random-masks"),
        )?;
        let mut random_q = Vec::with_capacity(masks.len());
        for (img, m) in random.images.iter_mut().zip(masks) {
            if let Some(truth) = &img.mask {
                random_q.push(crate::teacher::annotation_quality(&m, truth)?);
            }
            img.mask = Some(m);
        }

        let student = train_and_evaluate(
            cfg,
            "student",
            &annotated,
            &tc.student,
            &cfg.sgd,
            &splits,
            seed,
        )?;
        let random_student = train_and_evaluate(
            cfg,
            "random_student",
            &random,
            &tc.student,
            &cfg.sgd,
            &splits,
            seed,
        )?;
        let summary = TeacherSummary {
            seed,
            mask_density: density,
            teacher_quality: mean_quality(&quality),
            random_quality: mean_quality(&random_q),
        };
        Ok((vec![teacher_run, student, random_student], summary))
    })?;
    let mut runs = Vec::new();
    let mut teacher = Vec::new();
    for (r, s) in per_seed {
        runs.extend(r);
        teacher.push(s);
    }
    Ok(RunManifest {
        config_hash: cfg.hash(),
        peak_graph_bytes: runs.iter().map(|r| r.peak_graph_bytes).max().unwrap_or(0),
        runs,
        teacher,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub validation_loss: f64,
    pub permuted_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: XsMethod,
    pub best_lambda: f64,
    pub table: Vec<SweepRow>,
}

/// Mean cross-entropy over `ds`.
pub fn dataset_loss(model: &Model, ds: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let b = ds.batch(chunk)?;
        let logits = model.forward(&b.x)?.logits;
        total += cross_entropy(&logits, &b.y)?.item()? * chunk.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

/// Trains one model per λ and keeps the one with the lowest cross-entropy
/// on the permuted validation split; ties go to the smaller λ.
pub fn sweep_lambda(
    cfg: &ExperimentConfig,
    base: &XsConfig,
    grid: &[f64],
    seed: u64,
) -> Result<SweepResult> {
    cfg.validate()?;
    let (train_all, test) = cfg.data.load()?;
    sweep_lambda_on(cfg, base, grid, seed, &train_all, &test)
}

pub fn sweep_lambda_on(
    cfg: &ExperimentConfig,
    base: &XsConfig,
    grid: &[f64],
    seed: u64,
    train_all: &Dataset,
    test: &Dataset,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(invalid!("λ grid is empty"));
    }
    let splits = prepare_splits(cfg, train_all, test, seed)?;
    let mut table = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let xs = XsConfig {
            lambda,
            ..base.clone()
        };
        xs.validate()?;
        let mut model = build_cnn(cfg.model, derive_seed(seed, "init"));
        train(
            &mut model,
            &splits.train,
            &xs,
            &cfg.sgd,
            derive_seed(seed, "shuffle"),
        )?;
        table.push(SweepRow {
            lambda,
            validation_loss: dataset_loss(&model, &splits.val_permuted)?,
            permuted_accuracy: evaluate(&model, &splits.val_permuted, MetricKind::Accuracy)?,
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| {
            a.validation_loss
                .total_cmp(&b.validation_loss)
                .then(a.lambda.total_cmp(&b.lambda))
        })
        .expect("nonempty grid");
    Ok(SweepResult {
        method: base.method,
        best_lambda: best.lambda,
        table,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Throughput {
    pub method: XsMethod,
    /// Median over repeats.
    pub it_per_sec: f64,
    pub repeats: Vec<f64>,
    pub graph_bytes: usize,
}

/// Times `steps` minibatch updates per penalty on one fixed batch, after
/// `warmup` untimed steps, `repeats` times. Methods are interleaved per
/// repeat so drifting machine load affects them alike.
pub fn benchmark_throughput(
    model: &Model,
    batch: &crate::data::Batch,
    methods: &[XsConfig],
    sgd: &SgdConfig,
    warmup: usize,
    steps: usize,
    repeats: usize,
) -> Result<Vec<Throughput>> {
    let mut models: Vec<Model> = methods.iter().map(|_| model.clone()).collect();
    let mut velocity: Vec<Vec<Vec<f64>>> = methods.iter().map(|_| Vec::new()).collect();
    let mut bytes = vec![0usize; methods.len()];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    let step = |k: usize, models: &mut [Model], velocity: &mut [Vec<Vec<f64>>]| -> Result<usize> {
        let m = &mut models[k];
        let graph = Graph::new();
        let params = m.bind(&graph);
        let loss = crate::nn::Objective::loss(&methods[k], m, &params, batch)?;
        let refs: Vec<&Tensor> = params.iter().collect();
        let grads = grad_with(
            &loss,
            &refs,
            GradOptions {
                create_graph: false,
                allow_unused: true,
            },
        )?;
        let b = graph.payload_bytes();
        drop(params);
        crate::nn::sgd_step(&mut m.params, &grads, sgd, &mut velocity[k])?;
        Ok(b)
    };
    for (k, peak) in bytes.iter_mut().enumerate() {
        for _ in 0..warmup {
            *peak = (*peak).max(step(k, &mut models, &mut velocity)?);
        }
    }
    for _ in 0..repeats {
        for k in 0..methods.len() {
            let start = Instant::now();
            for _ in 0..steps {
                bytes[k] = bytes[k].max(step(k, &mut models, &mut velocity)?);
            }
            times[k].push(steps as f64 / start.elapsed().as_secs_f64().max(1e-9));
        }
    }
    Ok(methods
        .iter()
        .zip(times)
        .zip(bytes)
        .map(|((m, t), b)| {
            let mut sorted = t.clone();
            sorted.sort_by(f64::total_cmp);
            Throughput {
                method: m.method,
                it_per_sec: sorted[sorted.len() / 2],
                repeats: t,
                graph_bytes: b,
            }
        })
        .collect())
}

/// Rescales to `[0, 255]` by the maximum absolute value.
fn to_grey(v: &[f64]) -> Vec<f64> {
    crate::teacher::normalise_abs(v)
        .into_iter()
        .map(|x| x * 255.0)
        .collect()
}

/// Writes, per image: the input, its mask (if any), the normalised input
/// gradient, and every activation map upsampled to the input size.
pub fn export_saliency(
    model: &Model,
    ds: &Dataset,
    indices: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = ds.dims().ok_or_else(|| invalid!("empty dataset"))?;
    let mut written = Vec::new();
    let mut emit = |name: String, values: &[f64]| -> Result<()> {
        let path = out_dir.join(name);
        write_pgm(&path, w, h, values)?;
        written.push(path);
        Ok(())
    };
    for &i in indices {
        let img = ds
            .images
            .get(i)
            .ok_or_else(|| invalid!("image index {i} out of range"))?;
        let batch = ds.batch(&[i])?;
        emit(format!("{i:05}_input.pgm"), &img.pixels)?;
        if let Some(m) = &img.mask {
            emit(
                format!("{i:05}_mask.pgm"),
                &m.iter().map(|v| v * 255.0).collect::<Vec<_>>(),
            )?;
        }
        let g = input_gradient_maps(model, &batch.x)?;
        emit(format!("{i:05}_gradient.pgm"), &to_grey(g.data()))?;
        let f = model.forward(&batch.x)?;
        for (l, a) in f.activations.iter().enumerate() {
            let up = upsample_bins(a.data(), a.shape()[1], a.shape()[2], h, w);
            emit(format!("{i:05}_activation{l}.pgm"), &to_grey(&up))?;
        }
    }
    Ok(written)
}

/// CSV with header `seed,epoch,split,metric,value`.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("seed,epoch,split,metric,value\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.seed,
            r.epoch,
            r.split.name(),
            r.metric.name(),
            r.value
        );
    }
    out
}

/// Writes `manifest.json` and one `metrics_<model>.csv` per model name.
pub fn write_manifest(manifest: &RunManifest, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    let mut names: Vec<&str> = manifest.runs.iter().map(|r| r.name.as_str()).collect();
    names.dedup();
    names.sort_unstable();
    names.dedup();
    for name in names {
        let records: Vec<MetricsRecord> = manifest
            .runs_named(name)
            .flat_map(|r| r.metrics.iter().cloned())
            .collect();
        let path = dir.join(format!("metrics_{name}.csv"));
        fs::write(&path, metrics_csv(&records)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// The unpenalised training objective, for callers that want it as a value.
pub fn cross_entropy_objective() -> impl crate::nn::Objective {
    task_loss
}
