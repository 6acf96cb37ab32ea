//! Layer-list CNNs, forward passes with activation maps, and momentum SGD.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::tensor::{grad_with, Array, GradOptions, Graph, Tensor};
use crate::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
}

/// Output geometry of a layer: a `[C, H, W]` feature map or a flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extent {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    /// Indices of `Relu` layers, each directly after a `Conv`, whose outputs
    /// become activation maps.
    pub tap_layers: Vec<usize>,
}

/// Channel and hidden-unit widths of the two-layer CNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl CnnWidths {
    pub const FULL: CnnWidths = CnnWidths {
        conv1: 32,
        conv2: 64,
        hidden: 128,
    };
    /// Narrow variant that keeps the layer structure but trains quickly on one core.
    pub const DESK: CnnWidths = CnnWidths {
        conv1: 8,
        conv2: 16,
        hidden: 64,
    };
}

impl ModelSpec {
    /// conv → ReLU → pool → conv → ReLU → pool → linear → ReLU → linear,
    /// with both conv ReLUs tapped.
    pub fn two_layer_cnn(
        widths: CnnWidths,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Self {
        let conv = |out_channels| Layer::Conv {
            out_channels,
            kernel: 3,
            padding: 1,
            stride: 1,
        };
        let pool = Layer::MaxPool { k: 2, stride: 2 };
        ModelSpec {
            input: [1, height, width],
            layers: vec![
                conv(widths.conv1),
                Layer::Relu,
                pool,
                conv(widths.conv2),
                Layer::Relu,
                pool,
                Layer::Flatten,
                Layer::Linear {
                    out_features: widths.hidden,
                },
                Layer::Relu,
                Layer::Linear {
                    out_features: num_classes,
                },
            ],
            num_classes,
            tap_layers: vec![1, 4],
        }
    }

    /// Output extent after each layer; also validates the spec.
    pub fn extents(&self) -> Result<Vec<Extent>> {
        let [c, h, w] = self.input;
        let mut cur = Extent::Map { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (
                    Layer::Conv {
                        out_channels,
                        kernel,
                        padding,
                        stride,
                    },
                    Extent::Map { h, w, .. },
                ) => {
                    let side = |n: usize| {
                        (stride > 0 && kernel > 0 && kernel <= n + 2 * padding)
                            .then(|| (n + 2 * padding - kernel) / stride + 1)
                    };
                    match (side(h), side(w)) {
                        (Some(h), Some(w)) => Extent::Map {
                            c: out_channels,
                            h,
                            w,
                        },
                        _ => {
                            return Err(invalid!("layer {i}: kernel {kernel} does not fit {h}x{w}"))
                        }
                    }
                }
                (Layer::MaxPool { k, stride }, Extent::Map { c, h, w }) => {
                    if k == 0 || stride == 0 || k > h || k > w {
                        return Err(invalid!(
                            "layer {i}: pool {k}/{stride} does not fit {h}x{w}"
                        ));
                    }
                    Extent::Map {
                        c,
                        h: (h - k) / stride + 1,
                        w: (w - k) / stride + 1,
                    }
                }
                (Layer::Relu, e) => e,
                (Layer::Flatten, Extent::Map { c, h, w }) => Extent::Flat(c * h * w),
                (Layer::Flatten, e) => e,
                (Layer::Linear { out_features }, Extent::Flat(_)) => Extent::Flat(out_features),
                (l, e) => return Err(invalid!("layer {i}: {l:?} cannot follow output {e:?}")),
            };
            out.push(cur);
        }
        if out.last() != Some(&Extent::Flat(self.num_classes)) {
            return Err(invalid!(
                "final layer must output {} logits",
                self.num_classes
            ));
        }
        for &t in &self.tap_layers {
            let ok = t > 0
                && t < self.layers.len()
                && self.layers[t] == Layer::Relu
                && matches!(self.layers[t - 1], Layer::Conv { .. });
            if !ok {
                return Err(invalid!(
                    "tap layer {t} is not a ReLU following a convolution"
                ));
            }
        }
        Ok(out)
    }

    /// `(H, W)` of each tapped activation map.
    pub fn tap_dims(&self) -> Result<Vec<(usize, usize)>> {
        let ext = self.extents()?;
        Ok(self
            .tap_layers
            .iter()
            .map(|&t| match ext[t] {
                Extent::Map { h, w, .. } => (h, w),
                Extent::Flat(_) => unreachable!("validated as a conv output"),
            })
            .collect())
    }

    /// Shapes of the parameter arrays in storage order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let ext = self.extents()?;
        let mut prev = Extent::Map {
            c: self.input[0],
            h: self.input[1],
            w: self.input[2],
        };
        let mut shapes = Vec::new();
        for (layer, e) in self.layers.iter().zip(&ext) {
            match (*layer, prev) {
                (
                    Layer::Conv {
                        out_channels,
                        kernel,
                        ..
                    },
                    Extent::Map { c, .. },
                ) => {
                    shapes.push(vec![out_channels, c, kernel, kernel]);
                    shapes.push(vec![out_channels]);
                }
                (Layer::Linear { out_features }, Extent::Flat(n)) => {
                    shapes.push(vec![n, out_features]);
                    shapes.push(vec![out_features]);
                }
                _ => {}
            }
            prev = *e;
        }
        Ok(shapes)
    }
}

/// A model: its spec and trained parameters.
///
/// Parameters are plain arrays so models can move between threads; each
/// forward pass binds them into a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Array>,
    pub seed: u64,
}

/// Logits plus one channel-summed activation map per tap layer.
pub struct Forward {
    /// `[B, K]`
    pub logits: Tensor,
    /// `[B, H_l, W_l]` per tap layer.
    pub activations: Vec<Tensor>,
}

impl Model {
    /// Uniform fan-in initialisation: weights in `±sqrt(6 / fan_in)`, biases in
    /// `±1 / sqrt(fan_in)`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.param_shapes()?;
        let mut params = Vec::with_capacity(shapes.len());
        for pair in shapes.chunks(2) {
            let (ws, bs) = (&pair[0], &pair[1]);
            let fan_in: usize = if ws.len() == 4 {
                ws[1..].iter().product()
            } else {
                ws[0]
            };
            let wb = (6.0 / fan_in as f64).sqrt();
            let bb = 1.0 / (fan_in as f64).sqrt();
            let n: usize = ws.iter().product();
            let w = (0..n).map(|_| rng.gen_range(-wb..wb)).collect();
            let b = (0..bs[0]).map(|_| rng.gen_range(-bb..bb)).collect();
            params.push(Array::new(ws.clone(), w)?);
            params.push(Array::new(bs.clone(), b)?);
        }
        Ok(Model { spec, params, seed })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Array::len).sum()
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &Graph) -> Vec<Tensor> {
        self.params.iter().map(|p| graph.param(p)).collect()
    }

    /// Forward pass with untracked parameters.
    pub fn forward(&self, x: &Tensor) -> Result<Forward> {
        let params: Vec<Tensor> = self.params.iter().map(Tensor::from_array).collect();
        self.forward_with(&params, x)
    }

    /// Forward pass of a `[B, C, H, W]` batch with the given parameter tensors.
    pub fn forward_with(&self, params: &[Tensor], x: &Tensor) -> Result<Forward> {
        if x.shape().len() != 4 || x.shape()[1..] != self.spec.input {
            return Err(invalid!(
                "input shape {:?} does not match [B, {}, {}, {}]",
                x.shape(),
                self.spec.input[0],
                self.spec.input[1],
                self.spec.input[2]
            ));
        }
        let batch = x.shape()[0];
        let mut h = x.clone();
        let mut p = 0;
        let mut activations = Vec::with_capacity(self.spec.tap_layers.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            h = match *layer {
                Layer::Conv {
                    padding, stride, ..
                } => {
                    let y = h.conv2d(&params[p], Some(&params[p + 1]), padding, stride)?;
                    p += 2;
                    y
                }
                Layer::Relu => h.relu()?,
                Layer::MaxPool { k, stride } => h.maxpool2d(k, stride, 0)?,
                Layer::Flatten => h.flatten()?,
                Layer::Linear { out_features } => {
                    let bias = params[p + 1]
                        .reshape(&[1, out_features])?
                        .expand_to(&[batch, out_features])?;
                    let y = h.matmul(&params[p])?.add(&bias)?;
                    p += 2;
                    y
                }
            };
            if self.spec.tap_layers.contains(&i) {
                activations.push(h.sum_channels()?);
            }
        }
        Ok(Forward {
            logits: h,
            activations,
        })
    }

    /// Predicted class per image, evaluated in chunks.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(ds.len());
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(256) {
            let b = ds.batch(chunk)?;
            let logits = self.forward(&b.x)?.logits;
            let k = logits.shape()[1];
            preds.extend(logits.data().chunks(k).map(argmax));
        }
        Ok(preds)
    }

    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"SPTR")?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.shape().len() as u32).to_le_bytes())?;
            for &d in p.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads parameters written by [`Model::save`] into a model of `spec`.
    pub fn load<R: Read>(spec: ModelSpec, seed: u64, mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(4)? != b"SPTR" {
            return Err(Error::Parse {
                offset: 0,
                detail: "checkpoint magic is not SPTR".into(),
            });
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = cur.u32()? as usize;
        let expected = spec.param_shapes()?;
        if count != expected.len() {
            return Err(invalid!(
                "checkpoint holds {count} parameters, spec needs {}",
                expected.len()
            ));
        }
        let mut params = Vec::with_capacity(count);
        for want in &expected {
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &shape != want {
                return Err(invalid!(
                    "checkpoint parameter shape {shape:?}, spec needs {want:?}"
                ));
            }
            let n: usize = shape.iter().product();
            let data = cur
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(Array::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Parse {
                offset: cur.pos,
                detail: "trailing bytes after the last parameter".into(),
            });
        }
        Ok(Model { spec, params, seed })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(Error::Parse {
            offset: self.bytes.len(),
            detail: format!("checkpoint truncated, needed {n} bytes at {}", self.pos),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The two-layer CNN for 28×28 ten-class images.
pub fn build_two_layer_cnn(seed: u64) -> Model {
    build_cnn(CnnWidths::FULL, seed)
}

pub fn build_cnn(widths: CnnWidths, seed: u64) -> Model {
    Model::init(ModelSpec::two_layer_cnn(widths, 28, 28, 10), seed).expect("static spec is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [Array],
    grads: &[Tensor],
    cfg: &SgdConfig,
    velocity: &mut Vec<Vec<f64>>,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(invalid!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        ));
    }
    if let Some(param) = grads
        .iter()
        .position(|g| g.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteGradient { param });
    }
    if velocity.is_empty() {
        *velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if g.shape() != p.shape() {
            return Err(invalid!(
                "gradient shape {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
        let theta = p.data_mut();
        for ((t, &gi), vi) in theta.iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *t);
            *t -= cfg.learning_rate * *vi;
        }
    }
    Ok(())
}

/// A scalar training objective over a bound model.
pub trait Objective {
    fn loss(&self, model: &Model, params: &[Tensor], batch: &Batch) -> Result<Tensor>;
}

impl<F> Objective for F
where
    F: Fn(&Model, &[Tensor], &Batch) -> Result<Tensor>,
{
    fn loss(&self, model: &Model, params: &[Tensor], batch: &Batch) -> Result<Tensor> {
        self(model, params, batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    /// Largest graph payload of any step, in bytes.
    pub peak_graph_bytes: usize,
}

/// Epoch order: a fresh shuffle per epoch from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Minibatch SGD over `ds`, one fresh graph per step.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    objective: &dyn Objective,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<Vec<EpochSummary>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(invalid!("cannot train on an empty dataset"));
    }
    let mut velocity = Vec::new();
    let mut summaries = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(ds.len(), seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        let mut peak_graph_bytes = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = ds.batch(chunk)?;
            let graph = Graph::new();
            let params = model.bind(&graph);
            let loss = objective.loss(model, &params, &batch)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
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
            peak_graph_bytes = peak_graph_bytes.max(graph.payload_bytes());
            drop(params);
            sgd_step(&mut model.params, &grads, cfg, &mut velocity)?;
            total += value;
            steps += 1;
        }
        summaries.push(EpochSummary {
            epoch,
            mean_loss: total / steps as f64,
            steps,
            peak_graph_bytes,
        });
    }
    Ok(summaries)
}

/// Plain cross-entropy objective.
pub fn task_loss(model: &Model, params: &[Tensor], batch: &Batch) -> Result<Tensor> {
    let f = model.forward_with(params, &batch.x)?;
    Ok(crate::tensor::cross_entropy(&f.logits, &batch.y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledImage;
    use crate::gradcheck::{numeric_grad, relative_error};
    use crate::tensor::grad;

    #[test]
    fn models_cross_threads() {
        fn is_send<T: Send + Sync>() {}
        is_send::<Model>();
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input: [1, 6, 6],
            layers: vec![
                Layer::Conv {
                    out_channels: 2,
                    kernel: 3,
                    padding: 1,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Conv {
                    out_channels: 2,
                    kernel: 3,
                    padding: 0,
                    stride: 1,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear { out_features: 3 },
            ],
            num_classes: 3,
            tap_layers: vec![1, 4],
        }
    }

    #[test]
    fn two_layer_cnn_shapes() {
        let m = build_two_layer_cnn(1);
        assert_eq!(m.spec.tap_dims().unwrap(), vec![(28, 28), (14, 14)]);
        let f = m.forward(&Tensor::zeros(&[2, 1, 28, 28])).unwrap();
        assert_eq!(f.logits.shape(), &[2, 10]);
        assert!(f.logits.data().iter().all(|v| v.is_finite()));
        assert_eq!(f.activations[0].shape(), &[2, 28, 28]);
        assert_eq!(f.activations[1].shape(), &[2, 14, 14]);
    }

    #[test]
    fn zero_image_activation_is_bias_path() {
        let m = build_cnn(CnnWidths::DESK, 4);
        let f = m.forward(&Tensor::zeros(&[1, 1, 28, 28])).unwrap();
        let expect: f64 = m.params[1].data().iter().map(|b| b.max(0.0)).sum();
        assert!(f.activations[0]
            .data()
            .iter()
            .all(|&a| (a - expect).abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_cnn(CnnWidths::DESK, 9);
        let b = build_cnn(CnnWidths::DESK, 9);
        assert_eq!(a, b);
        assert_ne!(a, build_cnn(CnnWidths::DESK, 10));
    }

    #[test]
    fn activation_is_channel_sum_of_relu() {
        let m = Model::init(tiny_spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(
            vec![2, 1, 6, 6],
            (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let f = m.forward(&x).unwrap();
        let z = x
            .conv2d(
                &Tensor::from_array(&m.params[0]),
                Some(&Tensor::from_array(&m.params[1])),
                1,
                1,
            )
            .unwrap();
        let zd = z.data();
        for b in 0..2 {
            for p in 0..36 {
                let oracle: f64 = (0..2).map(|c| zd[(b * 2 + c) * 36 + p].max(0.0)).sum();
                let got = f.activations[0].data()[b * 36 + p];
                assert!((got - oracle).abs() < 1e-12);
                assert!(got >= 0.0);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec();
        s.tap_layers = vec![2];
        assert!(s.extents().is_err());
        let mut s = tiny_spec();
        s.num_classes = 4;
        assert!(s.extents().is_err());
        let m = Model::init(tiny_spec(), 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 1, 5, 6])).is_err());
    }

    #[test]
    fn sgd_examples() {
        let cfg = |lr, momentum| SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 1,
        };
        let mut p = vec![Array::new(vec![1], vec![1.0]).unwrap()];
        let mut v = Vec::new();
        sgd_step(
            &mut p,
            &[Tensor::new(vec![1], vec![2.0]).unwrap()],
            &cfg(0.1, 0.0),
            &mut v,
        )
        .unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);

        let mut p = vec![Array::new(vec![1], vec![0.0]).unwrap()];
        let mut v = Vec::new();
        for _ in 0..2 {
            sgd_step(&mut p, &[Tensor::ones(&[1])], &cfg(1.0, 0.9), &mut v).unwrap();
        }
        assert!((p[0].data()[0] + 2.9).abs() < 1e-15);

        let before = p.clone();
        sgd_step(
            &mut p,
            &[Tensor::zeros(&[1])],
            &cfg(1.0, 0.0),
            &mut Vec::new(),
        )
        .unwrap();
        assert_eq!(p, before);

        let err = sgd_step(
            &mut p,
            &[Tensor::full(&[1], f64::NAN)],
            &cfg(1.0, 0.0),
            &mut v,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { param: 0 }));
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|i| {
                let label = i % 2;
                let px = (0..36)
                    .map(|p| {
                        let bright = (p % 6 < 3) == (label == 0);
                        let base = if bright { 200.0 } else { 40.0 };
                        base + rng.gen_range(-30.0..30.0)
                    })
                    .collect();
                LabeledImage::new(6, 6, px, label, 2).unwrap()
            })
            .collect();
        Dataset::new(images)
    }

    fn toy_spec2() -> ModelSpec {
        let mut s = tiny_spec();
        s.layers[6] = Layer::Linear { out_features: 2 };
        s.num_classes = 2;
        s
    }

    #[test]
    fn loss_decreases_on_separable_blobs() {
        let ds = blobs(16, 1);
        let mut m = Model::init(toy_spec2(), 5).unwrap();
        let batch = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 1,
        };
        let mut last = f64::INFINITY;
        let mut v = Vec::new();
        for _ in 0..5 {
            let g = Graph::new();
            let p = m.bind(&g);
            let loss = task_loss(&m, &p, &batch).unwrap();
            assert!(loss.item().unwrap() < last);
            last = loss.item().unwrap();
            let refs: Vec<&Tensor> = p.iter().collect();
            let grads = grad(&loss, &refs, false).unwrap();
            sgd_step(&mut m.params, &grads, &cfg, &mut v).unwrap();
        }
    }

    #[test]
    fn training_is_reproducible() {
        let ds = blobs(10, 2);
        let cfg = SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 2,
        };
        let run = || {
            let mut m = Model::init(toy_spec2(), 5).unwrap();
            let s = train(&mut m, &ds, &task_loss, &cfg, 77).unwrap();
            (m, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa[0].steps, 3);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let m = Model::init(tiny_spec(), 11).unwrap();
        let ds = blobs(3, 3);
        let mut ds3 = ds.clone();
        for (i, img) in ds3.images.iter_mut().enumerate() {
            img.num_classes = 3;
            img.label = i % 3;
        }
        let batch = ds3.batch(&[0, 1, 2]).unwrap();
        let g = Graph::new();
        let p = m.bind(&g);
        let loss = task_loss(&m, &p, &batch).unwrap();
        let refs: Vec<&Tensor> = p.iter().collect();
        let analytic = grad(&loss, &refs, false).unwrap();
        for (i, param) in m.params.iter().enumerate() {
            let numeric = numeric_grad(
                |v| {
                    let mut mm = m.clone();
                    mm.params[i] = Array::new(param.shape().to_vec(), v.to_vec()).unwrap();
                    let pt: Vec<Tensor> = mm.params.iter().map(Tensor::from_array).collect();
                    task_loss(&mm, &pt, &batch).unwrap().item().unwrap()
                },
                param.data(),
                1e-4,
            );
            let err = relative_error(analytic[i].data(), &numeric);
            assert!(err < 1e-3, "param {i}: {err:e}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(tiny_spec(), 8).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SPTR");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 6);
        let back = Model::load(tiny_spec(), 8, &buf[..]).unwrap();
        assert_eq!(back, m);
        assert!(Model::load(tiny_spec(), 8, &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            Model::load(tiny_spec(), 8, &bad[..]),
            Err(Error::Parse { offset: 0, .. })
        ));
    }
}
