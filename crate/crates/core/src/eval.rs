//! Task metrics, contamination sensitivity, top-quartile overlap and
//! receptive-field checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{Extent, Layer, Model, ModelSpec};
use crate::tensor::{grad, grad_with, GradOptions, Graph, Tensor};
use crate::xsloss::{input_gradient, tap_penalty, GradTarget};
use crate::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Contaminated,
    Permuted,
    Clean,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Contaminated => "contaminated",
            Split::Permuted => "permuted",
            Split::Clean => "clean",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    FScore,
    Mae,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::FScore => "f_score",
            MetricKind::Mae => "mae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub epoch: usize,
    pub split: Split,
    pub metric: MetricKind,
    pub value: f64,
}

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(invalid!("metrics need at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(invalid!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        ));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 score of `positive`; 0 when there are no true positives.
pub fn f_score(preds: &[usize], labels: &[usize], positive: usize) -> Result<f64> {
    check(preds, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mean absolute difference between ordinal predictions and labels.
pub fn mae(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &l)| (p as f64 - l as f64).abs())
        .sum();
    Ok(total / preds.len() as f64)
}

/// `kind` of the model's predictions on `ds`; F-score uses class 1 as positive.
pub fn evaluate(model: &Model, ds: &Dataset, kind: MetricKind) -> Result<f64> {
    let preds = model.predict(ds)?;
    metric(&preds, &ds.labels(), kind)
}

pub fn metric(preds: &[usize], labels: &[usize], kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::Accuracy => accuracy(preds, labels),
        MetricKind::FScore => f_score(preds, labels, 1),
        MetricKind::Mae => mae(preds, labels),
    }
}

/// Contamination sensitivity, signed so that larger means more reliance on
/// the spurious signal.
pub fn delta_metric(
    model: &Model,
    contaminated: &Dataset,
    permuted: &Dataset,
    kind: MetricKind,
) -> Result<f64> {
    let c = evaluate(model, contaminated, kind)?;
    let p = evaluate(model, permuted, kind)?;
    Ok(delta(c, p, kind))
}

pub fn delta(contaminated: f64, permuted: f64, kind: MetricKind) -> f64 {
    match kind {
        MetricKind::Mae => permuted - contaminated,
        _ => contaminated - permuted,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "layer")]
pub enum OverlapTarget {
    InputGradient,
    Activation(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub target: OverlapTarget,
    pub recall: f64,
    pub precision: f64,
}

/// Nearest-bin upsampling of an `h × w` map to `out_h × out_w`: output cell
/// `(i, j)` copies bin `(i·h/out_h, j·w/out_w)`, the adaptive-pooling bin
/// that contains it.
pub fn upsample_bins(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            out.push(map[(i * h / out_h) * w + j * w / out_w]);
        }
    }
    out
}

/// Indices of the `quartile` fraction of entries with the largest `|value|`.
/// Equal magnitudes are ordered by a seeded random priority.
pub fn top_fraction(values: &[f64], quartile: f64, tie_seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
    let mut keyed: Vec<(f64, u64, usize)> = values
        .iter()
        .enumerate()
        .map(|(i, v)| (v.abs(), rng.gen::<u64>(), i))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let k = (quartile * values.len() as f64).round() as usize;
    keyed.into_iter().take(k).map(|(_, _, i)| i).collect()
}

/// Recall and precision of the top-`quartile` entries of `map` against the
/// spurious pixels of `truth`.
pub fn overlap(
    map: &[f64],
    truth: &[f64],
    quartile: f64,
    tie_seed: u64,
    target: OverlapTarget,
) -> Result<OverlapRecord> {
    if map.len() != truth.len() {
        return Err(invalid!(
            "map of {} cells against mask of {}",
            map.len(),
            truth.len()
        ));
    }
    if !(quartile > 0.0 && quartile <= 1.0) {
        return Err(invalid!("quartile must lie in (0, 1], got {quartile}"));
    }
    let top = top_fraction(map, quartile, tie_seed);
    let hit = top.iter().filter(|&&i| truth[i] != 0.0).count();
    let spurious = truth.iter().filter(|&&t| t != 0.0).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(OverlapRecord {
        target,
        recall: ratio(hit, spurious),
        precision: ratio(hit, top.len()),
    })
}

/// Mean overlap of the input gradient and of every activation map with the
/// ground-truth masks of `ds`.
pub fn model_overlap(
    model: &Model,
    ds: &Dataset,
    quartile: f64,
    seed: u64,
) -> Result<Vec<OverlapRecord>> {
    let (h, w) = ds.dims().ok_or_else(|| invalid!("empty dataset"))?;
    let n_maps = model.spec.tap_layers.len();
    let mut sums = vec![(0.0, 0.0); n_maps + 1];
    let mut count = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(128) {
        let batch = ds.batch(chunk)?;
        let masks = batch
            .masks
            .as_ref()
            .ok_or_else(|| invalid!("overlap needs ground-truth masks"))?;
        let graph = Graph::new();
        let x = graph.leaf(&batch.x);
        let f = model.forward(&x)?;
        let g = input_gradient(&f.logits, &x, GradTarget::LogProbSum, false)?;
        for (row, &i) in chunk.iter().enumerate() {
            let truth = &masks.data()[row * h * w..(row + 1) * h * w];
            let tie = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let grad_map = &g.data()[row * h * w..(row + 1) * h * w];
            let r = overlap(grad_map, truth, quartile, tie, OverlapTarget::InputGradient)?;
            sums[0].0 += r.recall;
            sums[0].1 += r.precision;
            for (l, a) in f.activations.iter().enumerate() {
                let (hl, wl) = (a.shape()[1], a.shape()[2]);
                let plane = &a.data()[row * hl * wl..(row + 1) * hl * wl];
                let up = upsample_bins(plane, hl, wl, h, w);
                let r = overlap(&up, truth, quartile, tie, OverlapTarget::Activation(l))?;
                sums[l + 1].0 += r.recall;
                sums[l + 1].1 += r.precision;
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(k, (r, p))| OverlapRecord {
            target: if k == 0 {
                OverlapTarget::InputGradient
            } else {
                OverlapTarget::Activation(k - 1)
            },
            recall: r / n,
            precision: p / n,
        })
        .collect())
}

/// Index range of layer-`layer` activation elements that can depend on
/// input pixel `(i, j)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveBounds {
    /// 1-based convolution index.
    pub layer: usize,
    pub kernel_sizes: Vec<usize>,
    /// Bounds before clamping to the layer grid (may be negative or past the edge).
    pub raw_rows: (isize, isize),
    pub raw_cols: (isize, isize),
    pub a_min: usize,
    pub a_max: usize,
    pub b_min: usize,
    pub b_max: usize,
}

impl ReceptiveBounds {
    pub fn contains(&self, a: usize, b: usize) -> bool {
        (self.a_min..=self.a_max).contains(&a) && (self.b_min..=self.b_max).contains(&b)
    }
}

fn div_floor(a: isize, b: isize) -> isize {
    a.div_euclid(b)
}

fn div_ceil(a: isize, b: isize) -> isize {
    -(-a).div_euclid(b)
}

/// Composes the per-layer index maps of every convolution and pooling layer
/// up to the `layer`-th convolution. For stride-1 unpadded convolutions
/// this is `i − Σκ + layer ≤ a ≤ i`.
pub fn receptive_bounds(
    spec: &ModelSpec,
    layer: usize,
    i: usize,
    j: usize,
) -> Result<ReceptiveBounds> {
    let ext = spec.extents()?;
    let [_, h, w] = spec.input;
    if i >= h || j >= w {
        return Err(invalid!("pixel ({i}, {j}) outside the {h}x{w} input"));
    }
    let (mut rows, mut cols) = ((i as isize, i as isize), (j as isize, j as isize));
    let (mut crow, mut ccol) = (rows, cols);
    let mut convs = 0;
    let mut kernels = Vec::new();
    for (idx, l) in spec.layers.iter().enumerate() {
        let (k, pad, stride) = match *l {
            Layer::Conv {
                kernel,
                padding,
                stride,
                ..
            } => (kernel, padding, stride),
            Layer::MaxPool { k, stride } => (k, 0, stride),
            Layer::Relu => continue,
            Layer::Flatten | Layer::Linear { .. } => break,
        };
        let (k, p, s) = (k as isize, pad as isize, stride as isize);
        let step = |(lo, hi): (isize, isize)| (div_ceil(lo + p - k + 1, s), div_floor(hi + p, s));
        rows = step(rows);
        cols = step(cols);
        let Extent::Map { h: lh, w: lw, .. } = ext[idx] else {
            unreachable!("spatial layers produce maps")
        };
        let clamp = |(lo, hi): (isize, isize), n: usize| (lo.max(0), hi.min(n as isize - 1));
        crow = clamp(step(crow), lh);
        ccol = clamp(step(ccol), lw);
        if matches!(l, Layer::Conv { .. }) {
            convs += 1;
            kernels.push(k as usize);
            if convs == layer {
                if crow.0 > crow.1 || ccol.0 > ccol.1 {
                    return Err(invalid!(
                        "pixel ({i}, {j}) reaches no element of conv layer {layer}"
                    ));
                }
                return Ok(ReceptiveBounds {
                    layer,
                    kernel_sizes: kernels,
                    raw_rows: rows,
                    raw_cols: cols,
                    a_min: crow.0 as usize,
                    a_max: crow.1 as usize,
                    b_min: ccol.0 as usize,
                    b_max: ccol.1 as usize,
                });
            }
        }
    }
    Err(invalid!(
        "model has {convs} convolution layers, asked for layer {layer}"
    ))
}

/// Per-layer outcome of [`verify_theorem1`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLocality {
    pub bounds: ReceptiveBounds,
    /// Elements outside the bounds with a nonzero derivative.
    pub out_of_bounds_nonzero: usize,
    pub max_out_of_bounds: f64,
    pub max_in_bounds: f64,
}

/// Conv layer number (1-based) of each tap layer.
fn tap_conv_numbers(spec: &ModelSpec) -> Vec<usize> {
    spec.tap_layers
        .iter()
        .map(|&t| {
            spec.layers[..t]
                .iter()
                .filter(|l| matches!(l, Layer::Conv { .. }))
                .count()
        })
        .collect()
}

/// Computes `∂A^l_{ab}/∂X_{ij}` for every tapped layer and element `(a, b)`
/// and compares its support with [`receptive_bounds`]. `x` is `[1, 1, H, W]`.
pub fn verify_theorem1(
    model: &Model,
    x: &Tensor,
    i: usize,
    j: usize,
) -> Result<Vec<LayerLocality>> {
    let [_, h, w] = model.spec.input;
    let graph = Graph::new();
    let xl = graph.leaf(x);
    let f = model.forward(&xl)?;
    let conv_no = tap_conv_numbers(&model.spec);
    let mut out = Vec::new();
    for (a_map, &l) in f.activations.iter().zip(&conv_no) {
        let bounds = receptive_bounds(&model.spec, l, i, j)?;
        let (hl, wl) = (a_map.shape()[1], a_map.shape()[2]);
        let mut rep = LayerLocality {
            bounds,
            out_of_bounds_nonzero: 0,
            max_out_of_bounds: 0.0,
            max_in_bounds: 0.0,
        };
        for a in 0..hl {
            for b in 0..wl {
                let mut pick = vec![0.0; hl * wl];
                pick[a * wl + b] = 1.0;
                let sel = a_map.mul(&Tensor::new(vec![1, hl, wl], pick)?)?.sum()?;
                let g = grad_with(
                    &sel,
                    &[&xl],
                    GradOptions {
                        create_graph: false,
                        allow_unused: true,
                    },
                )?;
                let d = g[0].data()[i * w + j].abs();
                debug_assert_eq!(g[0].numel(), h * w);
                if rep.bounds.contains(a, b) {
                    rep.max_in_bounds = rep.max_in_bounds.max(d);
                } else {
                    rep.max_out_of_bounds = rep.max_out_of_bounds.max(d);
                    rep.out_of_bounds_nonzero += usize::from(d != 0.0);
                }
            }
        }
        out.push(rep);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suppression {
    pub steps: usize,
    pub initial_penalty: f64,
    pub final_penalty: f64,
    /// `|∂ Σ_k log softmax_k / ∂X_ij|` before and after.
    pub initial_gradient: f64,
    pub final_gradient: f64,
}

fn pixel_gradient(model: &Model, x: &Tensor, i: usize, j: usize) -> Result<f64> {
    let graph = Graph::new();
    let xl = graph.leaf(x);
    let logits = model.forward(&xl)?.logits;
    let g = input_gradient(&logits, &xl, GradTarget::LogProbSum, false)?;
    Ok(g.data()[i * model.spec.input[2] + j].abs())
}

/// Minimises the activation penalty restricted to the receptive bounds of
/// `(i, j)` in every tapped layer by gradient descent on the parameters,
/// then re-measures the input gradient at `(i, j)`.
pub fn suppress_receptive_field(
    model: &mut Model,
    x: &Tensor,
    i: usize,
    j: usize,
    learning_rate: f64,
    max_steps: usize,
    target_penalty: f64,
) -> Result<Suppression> {
    let conv_no = tap_conv_numbers(&model.spec);
    let dims = model.spec.tap_dims()?;
    let masks = conv_no
        .iter()
        .zip(&dims)
        .map(|(&l, &(hl, wl))| {
            let b = receptive_bounds(&model.spec, l, i, j)?;
            let m = (0..hl * wl)
                .map(|p| if b.contains(p / wl, p % wl) { 1.0 } else { 0.0 })
                .collect();
            Ok(Tensor::new(vec![1, hl, wl], m)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let initial_gradient = pixel_gradient(model, x, i, j)?;
    let mut initial_penalty = None;
    let mut penalty = f64::INFINITY;
    let mut steps = 0;
    while steps < max_steps {
        let graph = Graph::new();
        let params = model.bind(&graph);
        let f = model.forward_with(&params, x)?;
        let loss = tap_penalty(&f.activations, &masks)?;
        penalty = loss.item()?;
        initial_penalty.get_or_insert(penalty);
        if penalty < target_penalty {
            break;
        }
        let refs: Vec<&Tensor> = params.iter().collect();
        let grads = grad_with(
            &loss,
            &refs,
            GradOptions {
                create_graph: false,
                allow_unused: true,
            },
        )?;
        drop(params);
        for (p, g) in model.params.iter_mut().zip(&grads) {
            for (t, d) in p.data_mut().iter_mut().zip(g.data()) {
                *t -= learning_rate * d;
            }
        }
        steps += 1;
    }
    Ok(Suppression {
        steps,
        initial_penalty: initial_penalty.unwrap_or(penalty),
        final_penalty: penalty,
        initial_gradient,
        final_gradient: pixel_gradient(model, x, i, j)?,
    })
}

/// All-convolution, stride-1, unpadded network for exact locality checks:
/// two tapped conv layers followed by a linear head.
pub fn locality_test_spec(
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
    channels: usize,
    classes: usize,
) -> ModelSpec {
    let conv = |kernel| Layer::Conv {
        out_channels: channels,
        kernel,
        padding: 0,
        stride: 1,
    };
    ModelSpec {
        input: [1, h, w],
        layers: vec![
            conv(k1),
            Layer::Relu,
            conv(k2),
            Layer::Relu,
            Layer::Flatten,
            Layer::Linear {
                out_features: classes,
            },
        ],
        num_classes: classes,
        tap_layers: vec![1, 3],
    }
}

/// `∂ Σ_k log softmax_k / ∂X` magnitude for each image, flattened.
pub fn input_gradient_maps(model: &Model, x: &Tensor) -> Result<Tensor> {
    let graph = Graph::new();
    let xl = graph.leaf(x);
    let logits = model.forward(&xl)?.logits;
    let s = logits.log_softmax()?.sum()?;
    Ok(grad(&s, &[&xl], false)?.remove(0))
}
