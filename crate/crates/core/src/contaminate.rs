//! Spurious-signal contamination: decoy patches and stripes with exact masks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledImage, Origin};
use crate::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    CornerPatch,
    Stripe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContaminationSpec {
    pub kind: Kind,
    pub patch_size: usize,
    /// Patch value is `255 − label·patch_step`.
    pub patch_step: f64,
    pub stripe_width: usize,
    pub stripe_max_offset: usize,
    /// Stripe value is `255 − label·stripe_step`; 127 for two classes, 51 for five.
    pub stripe_step: f64,
    pub seed: u64,
}

impl Default for ContaminationSpec {
    fn default() -> Self {
        Self {
            kind: Kind::CornerPatch,
            patch_size: 4,
            patch_step: 25.0,
            stripe_width: 6,
            stripe_max_offset: 15,
            stripe_step: 127.0,
            seed: 0,
        }
    }
}

impl ContaminationSpec {
    pub fn corner_patch(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn stripe(step: f64, seed: u64) -> Self {
        Self {
            kind: Kind::Stripe,
            stripe_step: step,
            seed,
            ..Self::default()
        }
    }

    /// Pixel value that encodes `label`.
    pub fn signal_value(&self, label: usize) -> f64 {
        let step = match self.kind {
            Kind::CornerPatch => self.patch_step,
            Kind::Stripe => self.stripe_step,
        };
        (255.0 - label as f64 * step).clamp(0.0, 255.0)
    }

    /// Per-image generator for the placement of image `index`.
    pub fn image_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Stamps the signal for `signal_label` onto a clean image.
///
/// The returned image keeps its true label; its mask is 1 exactly on the
/// stamped pixels.
pub fn contaminate(
    image: &LabeledImage,
    spec: &ContaminationSpec,
    signal_label: usize,
    rng: &mut impl Rng,
) -> Result<LabeledImage> {
    if image.origin != Origin::Clean {
        return Err(invalid!(
            "contaminate expects a clean image, got {:?}",
            image.origin
        ));
    }
    let (h, w) = (image.height, image.width);
    let (rows, cols) = match spec.kind {
        Kind::CornerPatch => {
            let p = spec.patch_size;
            if p == 0 || p > h || p > w {
                return Err(invalid!("{p}x{p} patch does not fit a {h}x{w} image"));
            }
            let corner = rng.gen_range(0..4);
            let r0 = if corner / 2 == 0 { 0 } else { h - p };
            let c0 = if corner % 2 == 0 { 0 } else { w - p };
            (r0..r0 + p, c0..c0 + p)
        }
        Kind::Stripe => {
            let sw = spec.stripe_width;
            if sw == 0 || sw > w {
                return Err(invalid!("stripe of width {sw} does not fit width {w}"));
            }
            let offset = rng.gen_range(0..=spec.stripe_max_offset.min(w - sw));
            let c0 = if rng.gen_bool(0.5) {
                offset
            } else {
                w - sw - offset
            };
            (0..h, c0..c0 + sw)
        }
    };
    let value = spec.signal_value(signal_label);
    let mut out = image.clone();
    let mut mask = vec![0.0; h * w];
    for r in rows {
        for c in cols.clone() {
            out.pixels[r * w + c] = value;
            mask[r * w + c] = 1.0;
        }
    }
    out.mask = Some(mask);
    out.origin = Origin::Contaminated;
    Ok(out)
}

/// `SC(X*, y)` for every image, with per-image placement from the spec seed.
pub fn contaminate_dataset(ds: &Dataset, spec: &ContaminationSpec) -> Result<Dataset> {
    let identity: Vec<usize> = (0..ds.num_classes()).collect();
    apply_permutation(ds, spec, &identity, Origin::Contaminated)
}

/// `SC(X*, π(y))` for a given permutation `π` of the classes.
pub fn permute_contaminate_with(
    ds: &Dataset,
    spec: &ContaminationSpec,
    perm: &[usize],
) -> Result<Dataset> {
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..ds.num_classes()).collect::<Vec<_>>() {
        return Err(invalid!(
            "{perm:?} is not a permutation of {} classes",
            ds.num_classes()
        ));
    }
    apply_permutation(ds, spec, perm, Origin::Permuted)
}

/// `SC(X*, π(y))` with one non-identity `π` drawn from `seed` for the whole dataset.
pub fn permute_contaminate(
    ds: &Dataset,
    spec: &ContaminationSpec,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    let perm = draw_permutation(ds.num_classes(), seed);
    Ok((permute_contaminate_with(ds, spec, &perm)?, perm))
}

/// A uniformly random permutation of `0..k`, redrawn until it is not the identity.
pub fn draw_permutation(k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..k).collect();
    if k < 2 {
        return perm;
    }
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

fn apply_permutation(
    ds: &Dataset,
    spec: &ContaminationSpec,
    perm: &[usize],
    origin: Origin,
) -> Result<Dataset> {
    let images = ds
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut out = contaminate(img, spec, perm[img.label], &mut spec.image_rng(i))?;
            out.origin = origin;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(images))
}

/// Seeded disjoint split into a clean holdout of `clean_fraction` of the
/// images and a contaminated remainder.
pub fn split_for_teacher(
    ds: &Dataset,
    clean_fraction: f64,
    spec: &ContaminationSpec,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(clean_fraction > 0.0 && clean_fraction < 1.0) {
        return Err(invalid!(
            "clean fraction must lie in (0, 1), got {clean_fraction}"
        ));
    }
    let n_clean = (clean_fraction * ds.len() as f64).round() as usize;
    if n_clean == 0 || n_clean == ds.len() {
        return Err(invalid!(
            "fraction {clean_fraction} of {} images leaves an empty split",
            ds.len()
        ));
    }
    let (clean_idx, rest_idx) = split_indices(ds.len(), n_clean, seed);
    let holdout = ds.subset(&clean_idx);
    let remainder = contaminate_dataset(&ds.subset(&rest_idx), spec)?;
    Ok((holdout, remainder))
}

/// Shuffles `0..n` with `seed` and splits off the first `k` (each part sorted).
pub fn split_indices(n: usize, k: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut head = idx[..k].to_vec();
    let mut tail = idx[k..].to_vec();
    head.sort_unstable();
    tail.sort_unstable();
    (head, tail)
}

/// Independent Bernoulli(`density`) binary masks, one per image.
pub fn random_masks(ds: &Dataset, density: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(invalid!("mask density must lie in (0, 1], got {density}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ds
        .images
        .iter()
        .map(|img| {
            (0..img.height * img.width)
                .map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect())
}

/// Mean fraction of ones over the masks of a dataset.
pub fn mask_density(ds: &Dataset) -> f64 {
    let (mut ones, mut total) = (0.0, 0usize);
    for img in &ds.images {
        if let Some(m) = &img.mask {
            ones += m.iter().sum::<f64>();
            total += m.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        ones / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn image(label: usize, seed: u64) -> LabeledImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..28 * 28)
            .map(|_| rng.gen_range(0..=255) as f64)
            .collect();
        LabeledImage::new(28, 28, px, label, 10).unwrap()
    }

    fn dataset(n: usize, k: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| {
                    let mut img = image(i % k, i as u64);
                    img.num_classes = k;
                    img
                })
                .collect(),
        )
    }

    #[test]
    fn label_zero_patch() {
        let spec = ContaminationSpec::corner_patch(1);
        let out = contaminate(&image(0, 1), &spec, 0, &mut spec.image_rng(0)).unwrap();
        let mask = out.mask.as_ref().unwrap();
        assert_eq!(mask.iter().filter(|&&m| m == 1.0).count(), 16);
        for (p, m) in out.pixels.iter().zip(mask) {
            if *m == 1.0 {
                assert_eq!(*p, 255.0);
            }
        }
        let corners = [(0, 0), (0, 24), (24, 0), (24, 24)];
        assert!(corners
            .iter()
            .any(|&(r, c)| mask[r * 28 + c] == 1.0 && mask[(r + 3) * 28 + c + 3] == 1.0));
        assert_eq!(out.label, 0);
        assert!((16.0f64 / 784.0 - 0.0204).abs() < 1e-4);
    }

    #[test]
    fn label_nine_patch_value() {
        let spec = ContaminationSpec::corner_patch(2);
        let out = contaminate(&image(9, 2), &spec, 9, &mut spec.image_rng(0)).unwrap();
        let i = out
            .mask
            .as_ref()
            .unwrap()
            .iter()
            .position(|&m| m == 1.0)
            .unwrap();
        assert_eq!(out.pixels[i], 30.0);
    }

    #[test]
    fn rejects_already_contaminated() {
        let spec = ContaminationSpec::corner_patch(0);
        let once = contaminate(&image(1, 0), &spec, 1, &mut spec.image_rng(0)).unwrap();
        assert!(contaminate(&once, &spec, 1, &mut spec.image_rng(0)).is_err());
    }

    #[test]
    fn corners_are_all_used() {
        let spec = ContaminationSpec::corner_patch(5);
        let ds = contaminate_dataset(&dataset(200, 10), &spec).unwrap();
        let mut seen = [0; 4];
        for img in &ds.images {
            let m = img.mask.as_ref().unwrap();
            let corner = [(0, 0), (0, 24), (24, 0), (24, 24)]
                .iter()
                .position(|&(r, c)| m[r * 28 + c] == 1.0)
                .unwrap();
            seen[corner] += 1;
        }
        assert!(seen.iter().all(|&s| s > 20), "{seen:?}");
    }

    #[test]
    fn stripes_stay_within_offset() {
        for step in [127.0, 51.0] {
            let spec = ContaminationSpec::stripe(step, 3);
            let ds = contaminate_dataset(&dataset(100, 2), &spec).unwrap();
            for img in &ds.images {
                let m = img.mask.as_ref().unwrap();
                let cols: Vec<usize> = (0..28).filter(|&c| m[c] == 1.0).collect();
                assert_eq!(cols.len(), 6);
                assert!(cols.windows(2).all(|p| p[1] == p[0] + 1));
                assert!(cols[0] <= 15 || 27 - cols[5] <= 15);
                assert!((0..28).all(|r| (0..28).all(|c| m[r * 28 + c] == m[c])));
                let v = img.pixels[cols[0]];
                assert_eq!(v, 255.0 - step * img.label as f64);
            }
        }
    }

    #[test]
    fn identity_permutation_matches_contaminate() {
        let ds = dataset(30, 10);
        let spec = ContaminationSpec::corner_patch(4);
        let a = contaminate_dataset(&ds, &spec).unwrap();
        let b = permute_contaminate_with(&ds, &spec, &(0..10).collect::<Vec<_>>()).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.mask, y.mask);
            assert_eq!(y.origin, Origin::Permuted);
        }
    }

    #[test]
    fn binary_permutation_swaps() {
        for seed in 0..20 {
            assert_eq!(draw_permutation(2, seed), vec![1, 0]);
        }
        let ds = dataset(10, 2);
        let spec = ContaminationSpec::stripe(127.0, 1);
        let (p, _) = permute_contaminate(&ds, &spec, 0).unwrap();
        let c = contaminate_dataset(&ds, &spec).unwrap();
        for ((pi, ci), orig) in p.images.iter().zip(&c.images).zip(&ds.images) {
            assert_eq!(pi.mask, ci.mask);
            assert_eq!(pi.label, orig.label);
            let i = pi
                .mask
                .as_ref()
                .unwrap()
                .iter()
                .position(|&m| m == 1.0)
                .unwrap();
            assert_eq!(pi.pixels[i], 255.0 - 127.0 * (1 - orig.label) as f64);
        }
    }

    #[test]
    fn teacher_split() {
        let ds = dataset(1000, 10);
        let spec = ContaminationSpec::corner_patch(0);
        let (clean, rest) = split_for_teacher(&ds, 0.1, &spec, 7).unwrap();
        assert_eq!((clean.len(), rest.len()), (100, 900));
        assert!(clean
            .images
            .iter()
            .all(|i| i.origin == Origin::Clean && i.mask.is_none()));
        assert!(rest.images.iter().all(|i| i.origin == Origin::Contaminated));
        let (a, b) = split_indices(1000, 100, 7);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, 100, 7), (a, b));
        assert!(split_for_teacher(&dataset(10, 10), 0.01, &spec, 0).is_err());
        assert!(split_for_teacher(&ds, 1.0, &spec, 0).is_err());
    }

    #[test]
    fn random_mask_statistics() {
        let ds = dataset(1000, 10);
        let ones = random_masks(&ds, 1.0, 0).unwrap();
        assert!(ones.iter().all(|m| m.iter().all(|&v| v == 1.0)));
        let masks = random_masks(&ds, 0.02, 11).unwrap();
        let mean = masks.iter().map(|m| m.iter().sum::<f64>()).sum::<f64>() / 1000.0;
        // Standard error of the mean count over 1000 masks of 784 Bernoulli(0.02) pixels.
        let se = (784.0f64 * 0.02 * 0.98 / 1000.0).sqrt();
        assert!((mean - 15.68).abs() < 3.0 * se, "mean {mean}");
        assert_eq!(masks, random_masks(&ds, 0.02, 11).unwrap());
        assert!(random_masks(&ds, 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn contamination_touches_only_masked_pixels(
            seed in any::<u64>(), label in 0usize..10, signal in 0usize..10, stripe in any::<bool>(),
        ) {
            let spec = if stripe {
                ContaminationSpec::stripe(25.0, seed)
            } else {
                ContaminationSpec::corner_patch(seed)
            };
            let clean = image(label, seed);
            let out = contaminate(&clean, &spec, signal, &mut spec.image_rng(0)).unwrap();
            let mask = out.mask.as_ref().unwrap();
            prop_assert!(mask.iter().all(|&m| m == 0.0 || m == 1.0));
            for ((x, xs), m) in out.pixels.iter().zip(&clean.pixels).zip(mask) {
                if *m == 0.0 {
                    prop_assert_eq!(x.to_bits(), xs.to_bits());
                } else {
                    prop_assert_eq!(*x, spec.signal_value(signal));
                }
            }
            let zeroed: Vec<f64> = out.pixels.iter().zip(mask).map(|(x, m)| x * (1.0 - m)).collect();
            let expect: Vec<f64> = clean.pixels.iter().zip(mask).map(|(x, m)| x * (1.0 - m)).collect();
            prop_assert_eq!(zeroed, expect);
        }
    }
}
