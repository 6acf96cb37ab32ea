//! Teacher saliency, thresholded annotations and annotation quality.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Origin};
use crate::nn::{task_loss, train, EpochSummary, Model, SgdConfig};
use crate::tensor::{grad, Graph, Tensor};
use crate::xsloss::{input_gradient, GradTarget};
use crate::{invalid, Result};

/// Which scalar the saliency map differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyTarget {
    /// Sum of log-probabilities over all classes.
    #[default]
    ClassSum,
    /// Log-probability of the true label.
    TrueLabel,
}

/// Absolute input gradient normalised per image to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Normalised absolute input gradients for a batch `x: [B, 1, H, W]`.
pub fn saliency(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    target: SaliencyTarget,
) -> Result<Vec<SaliencyMap>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(invalid!("saliency expects [B, 1, H, W], got {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    let graph = Graph::new();
    let xl = graph.leaf(x);
    let logits = model.forward(&xl)?.logits;
    let g = match target {
        SaliencyTarget::ClassSum => input_gradient(&logits, &xl, GradTarget::LogProbSum, false)?,
        SaliencyTarget::TrueLabel => {
            let picked = logits.log_softmax()?.mul(y)?.sum()?;
            grad(&picked, &[&xl], false)?.remove(0)
        }
    };
    Ok(g.data()
        .chunks(h * w)
        .map(|plane| SaliencyMap {
            height: h,
            width: w,
            values: normalise_abs(plane),
        })
        .collect())
}

/// `|v| / max|v|`, or all zeros when `v` vanishes.
pub fn normalise_abs(v: &[f64]) -> Vec<f64> {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x.abs() / max).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherAnnotation {
    /// 1 where the teacher's saliency is below `tau`.
    pub mask: Vec<f64>,
    pub tau: f64,
    pub teacher_id: String,
}

/// Flags every pixel whose saliency falls below `tau`.
pub fn annotate(e: &SaliencyMap, tau: f64, teacher_id: &str) -> Result<TeacherAnnotation> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid!("tau must lie in (0, 1], got {tau}"));
    }
    Ok(TeacherAnnotation {
        mask: e
            .values
            .iter()
            .map(|&v| if v < tau { 1.0 } else { 0.0 })
            .collect(),
        tau,
        teacher_id: teacher_id.to_string(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationQuality {
    /// `|spurious ∩ flagged| / |spurious|`
    pub recall: f64,
    /// `|spurious ∩ flagged| / |flagged|`
    pub precision: f64,
}

pub fn annotation_quality(flagged: &[f64], truth: &[f64]) -> Result<AnnotationQuality> {
    if flagged.len() != truth.len() {
        return Err(invalid!(
            "annotation of {} pixels against truth of {}",
            flagged.len(),
            truth.len()
        ));
    }
    let (mut hit, mut spurious, mut marked) = (0usize, 0usize, 0usize);
    for (&f, &t) in flagged.iter().zip(truth) {
        let (f, t) = (f != 0.0, t != 0.0);
        hit += usize::from(f && t);
        spurious += usize::from(t);
        marked += usize::from(f);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(AnnotationQuality {
        recall: ratio(hit, spurious),
        precision: ratio(hit, marked),
    })
}

/// Mean recall and precision over images.
pub fn mean_quality(q: &[AnnotationQuality]) -> AnnotationQuality {
    let n = q.len().max(1) as f64;
    AnnotationQuality {
        recall: q.iter().map(|x| x.recall).sum::<f64>() / n,
        precision: q.iter().map(|x| x.precision).sum::<f64>() / n,
    }
}

/// Replaces every image's mask with the teacher's annotation. Returns the
/// annotated dataset and, for images that carried a ground-truth mask, the
/// annotation quality against it.
pub fn annotate_dataset(
    teacher: &Model,
    ds: &Dataset,
    tau: f64,
    target: SaliencyTarget,
    teacher_id: &str,
) -> Result<(Dataset, Vec<AnnotationQuality>)> {
    let mut out = ds.clone();
    let mut quality = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(128) {
        let batch = ds.batch(chunk)?;
        let maps = saliency(teacher, &batch.x, &batch.y, target)?;
        for (&i, e) in chunk.iter().zip(&maps) {
            let a = annotate(e, tau, teacher_id)?;
            if let Some(truth) = &ds.images[i].mask {
                quality.push(annotation_quality(&a.mask, truth)?);
            }
            out.images[i].mask = Some(a.mask);
        }
    }
    Ok((out, quality))
}

/// Cross-entropy training of a teacher on clean images only.
pub fn train_teacher(
    model: &mut Model,
    holdout: &Dataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<Vec<EpochSummary>> {
    if holdout.is_empty() {
        return Err(invalid!("teacher holdout is empty"));
    }
    if let Some(i) = holdout
        .images
        .iter()
        .position(|im| im.origin != Origin::Clean)
    {
        return Err(invalid!("teacher holdout image {i} is not clean"));
    }
    train(model, holdout, &task_loss, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, ModelSpec};
    use crate::tensor::Array;
    use proptest::prelude::*;

    fn linear_model(w: Vec<f64>, n: usize, k: usize) -> Model {
        let mut m = Model::init(
            ModelSpec {
                input: [1, 1, n],
                layers: vec![Layer::Flatten, Layer::Linear { out_features: k }],
                num_classes: k,
                tap_layers: vec![],
            },
            0,
        )
        .unwrap();
        m.params[0] = Array::new(vec![n, k], w).unwrap();
        m
    }

    #[test]
    fn zero_model_has_zero_saliency() {
        let m = linear_model(vec![0.0; 8], 4, 2);
        let x = Tensor::ones(&[1, 1, 1, 4]);
        let e = saliency(
            &m,
            &x,
            &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            SaliencyTarget::ClassSum,
        )
        .unwrap();
        assert!(e[0].values.iter().all(|&v| v == 0.0));
        let a = annotate(&e[0], 0.01, "t").unwrap();
        assert!(a.mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_saliency_matches_hand_derivation() {
        let (n, k) = (4, 3);
        let w = vec![
            0.5, -1.0, 0.2, 1.5, 0.3, -0.7, -0.4, 0.9, 0.1, 0.0, 0.0, 0.0,
        ];
        let m = linear_model(w.clone(), n, k);
        let xv = vec![0.2, 0.8, 0.5, 0.1];
        let b = m.params[1].data().to_vec();
        let z: Vec<f64> = (0..k)
            .map(|l| b[l] + (0..n).map(|j| xv[j] * w[j * k + l]).sum::<f64>())
            .collect();
        let zs: f64 = z.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| v.exp() / zs).collect();
        // ∂/∂x_i Σ_k log p_k = Σ_k W_ik (1 − K p_k)
        let g: Vec<f64> = (0..n)
            .map(|i| (0..k).map(|l| w[i * k + l] * (1.0 - k as f64 * p[l])).sum())
            .collect();
        let expect = normalise_abs(&g);
        let x = Tensor::new(vec![1, 1, 1, n], xv).unwrap();
        let y = Tensor::new(vec![1, k], vec![0.0, 1.0, 0.0]).unwrap();
        let e = saliency(&m, &x, &y, SaliencyTarget::ClassSum).unwrap();
        for (a, b) in e[0].values.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(e[0].values[3], 0.0);
        assert_eq!(e[0].values.iter().cloned().fold(0.0, f64::max), 1.0);

        // True-label target: ∂ log p_y / ∂x_i = W_iy − Σ_k W_ik p_k
        let g: Vec<f64> = (0..n)
            .map(|i| w[i * k + 1] - (0..k).map(|l| w[i * k + l] * p[l]).sum::<f64>())
            .collect();
        let e = saliency(&m, &x, &y, SaliencyTarget::TrueLabel).unwrap();
        for (a, b) in e[0].values.iter().zip(normalise_abs(&g)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_one_flags_all_but_the_maximum() {
        let e = SaliencyMap {
            height: 1,
            width: 4,
            values: vec![0.2, 1.0, 0.0, 0.99],
        };
        assert_eq!(
            annotate(&e, 1.0, "t").unwrap().mask,
            vec![1.0, 0.0, 1.0, 1.0]
        );
        assert!(annotate(&e, 0.0, "t").is_err());
    }

    #[test]
    fn quality_examples() {
        let truth = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let q = annotation_quality(&truth, &truth).unwrap();
        assert_eq!((q.recall, q.precision), (1.0, 1.0));
        let q = annotation_quality(&[1.0; 8], &truth).unwrap();
        assert_eq!((q.recall, q.precision), (1.0, 0.25));
        let q = annotation_quality(&[0.0; 8], &truth).unwrap();
        assert_eq!((q.recall, q.precision), (0.0, 0.0));
        assert!(annotation_quality(&[0.0; 3], &truth).is_err());
    }

    #[test]
    fn random_flagging_statistics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, d, s) = (200_000, 0.3, 0.1);
        let truth: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(s) { 1.0 } else { 0.0 })
            .collect();
        let flagged: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(d) { 1.0 } else { 0.0 })
            .collect();
        let q = annotation_quality(&flagged, &truth).unwrap();
        assert!((q.recall - d).abs() < 0.01, "{q:?}");
        assert!((q.precision - s).abs() < 0.01, "{q:?}");
    }

    proptest! {
        #[test]
        fn annotation_is_monotone_in_tau(
            values in proptest::collection::vec(0.0f64..=1.0, 1..50), t1 in 0.001f64..1.0, t2 in 0.001f64..1.0,
        ) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let e = SaliencyMap { height: 1, width: values.len(), values };
            let a = annotate(&e, lo, "t").unwrap();
            let b = annotate(&e, hi, "t").unwrap();
            prop_assert!(a.mask.iter().zip(&b.mask).all(|(x, y)| x <= y));
        }

        #[test]
        fn normalised_saliency_peaks_at_one(values in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let e = normalise_abs(&values);
            prop_assert!(e.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if values.iter().any(|&v| v != 0.0) {
                prop_assert_eq!(e.iter().cloned().fold(0.0, f64::max), 1.0);
            }
        }
    }
}
