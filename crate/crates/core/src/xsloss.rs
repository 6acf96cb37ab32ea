//! Explanatory-supervision penalties: the targeted activation penalty (TAP),
//! the input-gradient penalty (RRR), and their combination with the task loss.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::nn::{Model, Objective};
use crate::tensor::{cross_entropy, grad, Tensor};
use crate::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XsMethod {
    None,
    Tap,
    Rrr,
}

impl XsMethod {
    pub fn name(self) -> &'static str {
        match self {
            XsMethod::None => "none",
            XsMethod::Tap => "tap",
            XsMethod::Rrr => "rrr",
        }
    }
}

/// Scalar whose input gradient the RRR penalty constrains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// `Σ_k log softmax(f(X))_k`
    #[default]
    LogProbSum,
    /// `Σ_k f(X)_k`
    LogitSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XsConfig {
    pub method: XsMethod,
    pub lambda: f64,
    /// Dilation kernel of the mask downscaler; odd.
    pub kappa: usize,
    /// Indices into the model's activation maps; empty means all of them.
    pub tap_layers: Vec<usize>,
    pub rrr_target: GradTarget,
}

impl Default for XsConfig {
    fn default() -> Self {
        Self {
            method: XsMethod::None,
            lambda: 0.0,
            kappa: 3,
            tap_layers: Vec::new(),
            rrr_target: GradTarget::LogProbSum,
        }
    }
}

impl XsConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn tap(lambda: f64) -> Self {
        Self {
            method: XsMethod::Tap,
            lambda,
            ..Self::default()
        }
    }

    pub fn rrr(lambda: f64) -> Self {
        Self {
            method: XsMethod::Rrr,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 || self.kappa % 2 == 0 {
            return Err(invalid!(
                "kappa must be odd and positive, got {}",
                self.kappa
            ));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(invalid!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            ));
        }
        Ok(())
    }

    fn active(&self) -> bool {
        self.method != XsMethod::None && self.lambda != 0.0
    }
}

/// Dilates `[B, H, W]` masks with a stride-1 `kappa`-window max pool (zero
/// padding `kappa/2`), then adaptive-average-pools them to `h_l × w_l`.
pub fn downscale(masks: &Tensor, h_l: usize, w_l: usize, kappa: usize) -> Result<Tensor> {
    let s = masks.shape();
    if s.len() != 3 {
        return Err(invalid!("masks must be [B, H, W], got {s:?}"));
    }
    if kappa == 0 || kappa % 2 == 0 {
        return Err(invalid!("kappa must be odd and positive, got {kappa}"));
    }
    if h_l == 0 || w_l == 0 || h_l > s[1] || w_l > s[2] {
        return Err(invalid!(
            "cannot downscale {}x{} masks to {h_l}x{w_l}",
            s[1],
            s[2]
        ));
    }
    shrink(&dilate(masks, kappa)?, h_l, w_l)
}

/// Same values as `maxpool2d(kappa, 1, kappa / 2)`, computed as a row pass
/// then a column pass since no gradient is needed.
fn dilate(masks: &Tensor, kappa: usize) -> Result<Tensor> {
    let s = masks.shape();
    let (h, w, r) = (s[1], s[2], kappa / 2);
    let window = |line: &[f64], i: usize| {
        let mut best = if i < r || i + r >= line.len() {
            0.0
        } else {
            f64::NEG_INFINITY
        };
        for &v in &line[i.saturating_sub(r)..(i + r + 1).min(line.len())] {
            best = best.max(v);
        }
        best
    };
    let mut rows = vec![0.0; masks.data().len()];
    for (src, dst) in masks.data().chunks(w).zip(rows.chunks_mut(w)) {
        for (j, d) in dst.iter_mut().enumerate() {
            *d = window(src, j);
        }
    }
    let mut out = vec![0.0; rows.len()];
    let mut column = vec![0.0; h];
    for plane in 0..s[0] {
        let base = plane * h * w;
        for j in 0..w {
            for (i, c) in column.iter_mut().enumerate() {
                *c = rows[base + i * w + j];
            }
            for i in 0..h {
                let m = window(&column, i);
                out[base + i * w + j] = if m == f64::NEG_INFINITY { 0.0 } else { m };
            }
        }
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

fn shrink(dilated: &Tensor, h_l: usize, w_l: usize) -> Result<Tensor> {
    let s = dilated.shape();
    if (s[1], s[2]) == (h_l, w_l) {
        return Ok(dilated.clone());
    }
    Ok(dilated.adaptive_avgpool2d(h_l, w_l)?)
}

/// `(1/L) Σ_l ‖D_l ⊙ A_l‖₁`, averaged over the batch, for already
/// downscaled masks `D_l`.
pub fn tap_penalty(activations: &[Tensor], downscaled: &[Tensor]) -> Result<Tensor> {
    if activations.is_empty() || activations.len() != downscaled.len() {
        return Err(invalid!(
            "{} activation maps for {} masks",
            activations.len(),
            downscaled.len()
        ));
    }
    let batch = activations[0].shape()[0].max(1) as f64;
    let mut total: Option<Tensor> = None;
    for (a, d) in activations.iter().zip(downscaled) {
        let term = d.mul(a)?.abs_sum()?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total
        .expect("nonempty")
        .scale(1.0 / (batch * activations.len() as f64))?)
}

/// TAP over the given activation maps `[B, H_l, W_l]` and input masks `[B, H, W]`.
pub fn tap_loss(activations: &[Tensor], masks: &Tensor, kappa: usize) -> Result<Tensor> {
    // Every layer shares the same dilation; only the pooling differs.
    let full = downscale(
        masks,
        masks.shape().get(1).copied().unwrap_or(0),
        masks.shape().get(2).copied().unwrap_or(0),
        kappa,
    )?;
    let downscaled = activations
        .iter()
        .map(|a| shrink(&full, a.shape()[1], a.shape()[2]))
        .collect::<Result<Vec<_>>>()?;
    tap_penalty(activations, &downscaled)
}

/// Differentiable `∂target/∂x` for logits computed from the tracked input `x`.
pub fn input_gradient(
    logits: &Tensor,
    x: &Tensor,
    target: GradTarget,
    create_graph: bool,
) -> Result<Tensor> {
    let s = match target {
        GradTarget::LogProbSum => logits.log_softmax()?.sum()?,
        GradTarget::LogitSum => logits.sum()?,
    };
    Ok(grad(&s, &[x], create_graph)?.remove(0))
}

/// `Σ (M ⊙ ∂s/∂X)²` averaged over the batch, from logits computed on the tracked `x`.
pub fn rrr_penalty(
    logits: &Tensor,
    x: &Tensor,
    masks: &Tensor,
    target: GradTarget,
) -> Result<Tensor> {
    let g = input_gradient(logits, x, target, true)?;
    let m = masks.reshape(g.shape())?;
    let batch = g.shape()[0].max(1) as f64;
    Ok(m.mul(&g)?.square()?.sum()?.scale(1.0 / batch)?)
}

/// RRR for `model` on input `x`, which must be tracked in the parameters' graph.
pub fn rrr_loss(
    model: &Model,
    params: &[Tensor],
    x: &Tensor,
    masks: &Tensor,
    target: GradTarget,
) -> Result<Tensor> {
    let logits = model.forward_with(params, x)?.logits;
    rrr_penalty(&logits, x, masks, target)
}

/// The pieces of `L_task + λ·L_xs`.
pub struct LossParts {
    pub total: Tensor,
    pub task: f64,
    /// Unweighted penalty; 0 when the penalty was skipped.
    pub xs: f64,
    /// `λ·xs` as added to the total.
    pub weighted_xs: f64,
}

/// Cross-entropy plus `λ` times the configured penalty. With `λ = 0` or
/// no method the penalty is not computed and the result is the
/// cross-entropy itself.
pub fn combined_loss(
    model: &Model,
    params: &[Tensor],
    batch: &Batch,
    cfg: &XsConfig,
) -> Result<LossParts> {
    cfg.validate()?;
    let plain = |f: crate::nn::Forward| -> Result<LossParts> {
        let task = cross_entropy(&f.logits, &batch.y)?;
        Ok(LossParts {
            task: task.item()?,
            total: task,
            xs: 0.0,
            weighted_xs: 0.0,
        })
    };
    if !cfg.active() {
        return plain(model.forward_with(params, &batch.x)?);
    }
    let masks = batch
        .masks
        .as_ref()
        .ok_or_else(|| invalid!("{} needs masks on every training image", cfg.method.name()))?;
    let (task, xs) = match cfg.method {
        XsMethod::None => unreachable!("inactive configs return early"),
        XsMethod::Tap => {
            let f = model.forward_with(params, &batch.x)?;
            let acts = select(&f.activations, &cfg.tap_layers)?;
            (
                cross_entropy(&f.logits, &batch.y)?,
                tap_loss(&acts, masks, cfg.kappa)?,
            )
        }
        XsMethod::Rrr => {
            let graph = params
                .first()
                .and_then(Tensor::graph)
                .ok_or_else(|| invalid!("RRR needs parameters bound to a graph"))?;
            let x = graph.leaf(&batch.x);
            let f = model.forward_with(params, &x)?;
            let pen = rrr_penalty(&f.logits, &x, masks, cfg.rrr_target)?;
            (cross_entropy(&f.logits, &batch.y)?, pen)
        }
    };
    let weighted = xs.scale(cfg.lambda)?;
    Ok(LossParts {
        task: task.item()?,
        xs: xs.item()?,
        weighted_xs: weighted.item()?,
        total: task.add(&weighted)?,
    })
}

fn select(acts: &[Tensor], layers: &[usize]) -> Result<Vec<Tensor>> {
    if layers.is_empty() {
        return Ok(acts.to_vec());
    }
    layers
        .iter()
        .map(|&l| {
            acts.get(l).cloned().ok_or_else(|| {
                invalid!(
                    "tap layer {l} out of range for {} activation maps",
                    acts.len()
                )
            })
        })
        .collect()
}

impl Objective for XsConfig {
    fn loss(&self, model: &Model, params: &[Tensor], batch: &Batch) -> Result<Tensor> {
        Ok(combined_loss(model, params, batch, self)?.total)
    }
}
