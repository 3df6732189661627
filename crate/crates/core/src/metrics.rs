//! Saliency, attention-vs-segmentation overlap and randomization tests.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Mode, Model};
use crate::error::{Error, Result};
use crate::imageops::{resize, Image, ResizeMode};
use crate::tensor::{Graph, Tensor};

/// Anything that can report `d(sum_n logit[n, label_n]) / d input` for a batch.
pub trait InputGradient {
    fn input_gradient(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

impl InputGradient for Model {
    fn input_gradient(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut graph = Graph::new();
        let x = graph.input(batch.clone(), true)?;
        let out = self.forward_with_attention(&mut graph, x, Mode::Eval)?;
        let k = self.config().classes;
        let mut onehot = vec![0.0; labels.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Label { label: l, classes: k });
            }
            onehot[i * k + l] = 1.0;
        }
        let sel = graph.constant(Tensor::new(&[labels.len(), k], onehot)?)?;
        let picked = graph.mul(out.logits, sel)?;
        let total = graph.sum(picked)?;
        graph.backward(total)?.wrt(x)
    }
}

/// Mean over noisy copies of `|d logit_label / d pixel|`, then max over color channels.
///
/// Noise is Gaussian with standard deviation `noise_sigma` (in pixel units).
pub fn smoothgrad(
    model: &impl InputGradient,
    image: &Image,
    label: usize,
    n_samples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Image> {
    if n_samples == 0 {
        return Err(Error::Config("smoothgrad needs at least one sample".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be nonnegative, got {noise_sigma}")));
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut batch = Vec::with_capacity(n_samples * image.data.len());
    for _ in 0..n_samples {
        batch.extend(image.data.iter().map(|&v| {
            if noise_sigma > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            }
        }));
    }
    let grad = model.input_gradient(&Tensor::new(&[n_samples, h, w, c], batch)?, &vec![label; n_samples])?;
    grad.check_finite("smoothgrad gradient")?;
    let mut mean = vec![0.0; h * w * c];
    for chunk in grad.data().chunks_exact(h * w * c) {
        mean.iter_mut().zip(chunk).for_each(|(m, g)| *m += g.abs());
    }
    let inv = 1.0 / n_samples as f64;
    let out = mean
        .chunks_exact(c)
        .map(|px| px.iter().fold(0.0f64, |a, &b| a.max(b)) * inv)
        .collect();
    Image::new(h, w, 1, out)
}

/// `g1 / max(g1) - g2 / max(g2)`; positive where model 1 relies more.
pub fn gradient_delta(g1: &Image, g2: &Image) -> Result<Image> {
    if (g1.height, g1.width, g1.channels) != (g2.height, g2.width, g2.channels) {
        return Err(Error::Shape(format!(
            "gradient maps differ: {}x{}x{} vs {}x{}x{}",
            g1.height, g1.width, g1.channels, g2.height, g2.width, g2.channels
        )));
    }
    let (m1, m2) = (g1.max(), g2.max());
    if !(m1 > 0.0) || !(m2 > 0.0) {
        return Err(Error::Data("gradient map is all zero; cannot normalize".into()));
    }
    let data = g1.data.iter().zip(&g2.data).map(|(a, b)| a / m1 - b / m2).collect();
    Image::new(g1.height, g1.width, g1.channels, data)
}

/// Binary foreground mask of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub image_id: String,
    pub mask: Image,
}

impl SegmentationMask {
    /// Any pixel above 0.5 is foreground.
    pub fn from_image(image_id: impl Into<String>, img: &Image) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::Shape(format!("mask must have one channel, got {}", img.channels)));
        }
        let data = img.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            image_id: image_id.into(),
            mask: Image::new(img.height, img.width, 1, data)?,
        })
    }

    pub fn area(&self) -> usize {
        self.mask.data.iter().filter(|&&v| v > 0.5).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskIndexRecord {
    pub image_id: String,
    pub mask_path: String,
}

pub const MASK_INDEX_FILE: &str = "masks.ndjson";

/// Read `masks.ndjson` and the binary PNG masks it lists.
pub fn load_masks(dir: &Path) -> Result<Vec<SegmentationMask>> {
    let file = fs::File::open(dir.join(MASK_INDEX_FILE))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MaskIndexRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{MASK_INDEX_FILE} line {}: {e}", n + 1)))?;
        let img = Image::load_png(&dir.join(&rec.mask_path))?;
        out.push(SegmentationMask::from_image(rec.image_id, &img)?);
    }
    Ok(out)
}

fn min_max(map: &Image) -> Vec<f64> {
    let (lo, hi) = (map.min(), map.max());
    if hi > lo {
        map.data.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; map.data.len()]
    }
}

/// Indices scoring above `threshold` after per-map min-max normalization.
fn above(map: &Image, threshold: f64) -> (Vec<f64>, Vec<usize>) {
    let norm = min_max(map);
    let idx = (0..norm.len()).filter(|&i| norm[i] > threshold).collect();
    (norm, idx)
}

/// Keep the `k` highest-scoring indices; ties go to the lower index.
fn truncate(scores: &[f64], mut idx: Vec<usize>, k: usize) -> Vec<usize> {
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn iou_with(idx: &[usize], mask: &SegmentationMask) -> f64 {
    let area = mask.area();
    let inter = idx.iter().filter(|&&i| mask.mask.data[i] > 0.5).count();
    let union = idx.len() + area - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_mask(map: &Image, mask: &SegmentationMask) -> Result<()> {
    if (map.height, map.width, map.channels) != (mask.mask.height, mask.mask.width, 1) {
        return Err(Error::Shape(format!(
            "attention {}x{}x{} vs mask {}x{}",
            map.height, map.width, map.channels, mask.mask.height, mask.mask.width
        )));
    }
    if mask.area() == 0 {
        return Err(Error::Data(format!("mask for {} is empty", mask.image_id)));
    }
    Ok(())
}

/// IOU of one thresholded attention map (already at mask size) with the mask.
pub fn thresholded_iou(attn: &Image, mask: &SegmentationMask, threshold: f64) -> Result<f64> {
    check_mask(attn, mask)?;
    let (_, idx) = above(attn, threshold);
    Ok(iou_with(&idx, mask))
}

/// IOU of two models' attention maps with one mask after equalizing their
/// above-threshold counts: the larger set keeps only its highest-scoring
/// pixels. Returns `(iou(attn), iou(other_attn))`.
pub fn attention_iou(
    attn: &Image,
    mask: &SegmentationMask,
    other_attn: &Image,
    threshold: f64,
) -> Result<(f64, f64)> {
    check_mask(attn, mask)?;
    check_mask(other_attn, mask)?;
    let (sa, ia) = above(attn, threshold);
    let (sb, ib) = above(other_attn, threshold);
    let k = ia.len().min(ib.len());
    let ia = truncate(&sa, ia, k);
    let ib = truncate(&sb, ib, k);
    Ok((iou_with(&ia, mask), iou_with(&ib, mask)))
}

/// Upsample a flat `hw` attention map (bicubic) to the mask's size.
pub fn attention_at_mask_size(map: &[f64], hw: (usize, usize), mask: &SegmentationMask) -> Result<Image> {
    let img = Image::new(hw.0, hw.1, 1, map.to_vec())?;
    resize(&img, mask.mask.height, mask.mask.width, ResizeMode::Bicubic)
}

/// Per-image equalized IOU for two models' attention over the same masks.
/// Images whose mask is empty are skipped.
pub fn paired_iou(
    maps: &[Vec<f64>],
    other_maps: &[Vec<f64>],
    hw: (usize, usize),
    masks: &[SegmentationMask],
    threshold: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if maps.len() != masks.len() || other_maps.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} and {} attention maps for {} masks",
            maps.len(),
            other_maps.len(),
            masks.len()
        )));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for ((m, o), mask) in maps.iter().zip(other_maps).zip(masks) {
        if mask.area() == 0 {
            continue;
        }
        let (x, y) = attention_iou(
            &attention_at_mask_size(m, hw, mask)?,
            mask,
            &attention_at_mask_size(o, hw, mask)?,
            threshold,
        )?;
        a.push(x);
        b.push(y);
    }
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Randomization {
    /// Two independent groups; statistic `mean(a) - mean(b)`, labels shuffled.
    GroupSwap { a: Vec<f64>, b: Vec<f64> },
    /// Paired differences; statistic `mean(d)`, signs flipped.
    SignFlip(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizationResult {
    pub observed: f64,
    pub p_value: f64,
    /// Number of resampled statistics behind `p_value`.
    pub draws: usize,
    /// True when every relabeling was enumerated instead of sampled.
    pub exact: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// One-sided randomization test: `p` is the share of relabeled statistics at
/// least as large as the observed one. Relabelings are enumerated exactly
/// when there are no more of them than `iterations`, and sampled otherwise.
pub fn randomization_test(test: &Randomization, iterations: usize, seed: u64) -> Result<RandomizationResult> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = |obs: f64| 1e-12 * (1.0 + obs.abs());
    match test {
        Randomization::SignFlip(d) => {
            if d.is_empty() {
                return Err(Error::Data("sign-flip test on no differences".into()));
            }
            let n = d.len();
            let observed = mean(d);
            let eps = tol(observed);
            let stat = |signs: u64, rng: Option<&mut ChaCha8Rng>| -> f64 {
                let mut s = 0.0;
                match rng {
                    None => {
                        for (i, v) in d.iter().enumerate() {
                            s += if signs >> i & 1 == 1 { -v } else { *v };
                        }
                    }
                    Some(r) => {
                        for v in d {
                            s += if r.random_bool(0.5) { -v } else { *v };
                        }
                    }
                }
                s / n as f64
            };
            if n < 64 && (1u64 << n) as u128 <= iterations as u128 {
                let total = 1u64 << n;
                let hits = (0..total).filter(|&m| stat(m, None) >= observed - eps).count();
                return Ok(RandomizationResult {
                    observed,
                    p_value: hits as f64 / total as f64,
                    draws: total as usize,
                    exact: true,
                });
            }
            let hits = (0..iterations)
                .filter(|_| stat(0, Some(&mut rng)) >= observed - eps)
                .count();
            Ok(RandomizationResult {
                observed,
                p_value: hits as f64 / iterations as f64,
                draws: iterations,
                exact: false,
            })
        }
        Randomization::GroupSwap { a, b } => {
            if a.is_empty() || b.is_empty() {
                return Err(Error::Data("group-swap test needs two nonempty groups".into()));
            }
            let observed = mean(a) - mean(b);
            let eps = tol(observed);
            let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
            let (na, n) = (a.len(), pooled.len());
            let total: f64 = pooled.iter().sum();
            let stat_of = |sum_a: f64| sum_a / na as f64 - (total - sum_a) / (n - na) as f64;
            if binomial(n, na).is_some_and(|c| c <= iterations) {
                let mut hits = 0usize;
                let mut count = 0usize;
                let mut chosen = Vec::with_capacity(na);
                enumerate_subsets(n, na, 0, &mut chosen, &mut |idx| {
                    let s: f64 = idx.iter().map(|&i| pooled[i]).sum();
                    count += 1;
                    if stat_of(s) >= observed - eps {
                        hits += 1;
                    }
                });
                return Ok(RandomizationResult {
                    observed,
                    p_value: hits as f64 / count as f64,
                    draws: count,
                    exact: true,
                });
            }
            let mut perm = pooled.clone();
            let mut hits = 0usize;
            for _ in 0..iterations {
                // partial Fisher-Yates: the first na slots become group a
                for i in 0..na {
                    let j = rng.random_range(i..n);
                    perm.swap(i, j);
                }
                if stat_of(perm[..na].iter().sum()) >= observed - eps {
                    hits += 1;
                }
            }
            Ok(RandomizationResult {
                observed,
                p_value: hits as f64 / iterations as f64,
                draws: iterations,
                exact: false,
            })
        }
    }
}

fn enumerate_subsets(n: usize, k: usize, start: usize, chosen: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if chosen.len() == k {
        f(chosen);
        return;
    }
    for i in start..=n - (k - chosen.len()) {
        chosen.push(i);
        enumerate_subsets(n, k, i + 1, chosen, f);
        chosen.pop();
    }
}

/// Kolmogorov-Smirnov distance between the sample and Uniform(0, 1).
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct OnePixel {
        w: f64,
    }

    impl InputGradient for OnePixel {
        fn input_gradient(&self, batch: &Tensor, _labels: &[usize]) -> Result<Tensor> {
            let mut g = Tensor::zeros(batch.shape());
            let per = batch.len() / batch.shape()[0];
            for chunk in g.data_mut().chunks_exact_mut(per) {
                chunk[0] = self.w;
            }
            Ok(g)
        }
    }

    #[test]
    fn smoothgrad_of_linear_pixel_model() {
        let img = Image::filled(3, 3, 3, 0.5);
        let g = smoothgrad(&OnePixel { w: -2.5 }, &img, 0, 4, 0.1, 1).unwrap();
        assert_eq!(g.data[0], 2.5);
        assert!(g.data[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_delta_cases() {
        let a = Image::new(1, 3, 1, vec![2.0, 0.0, 1.0]).unwrap();
        assert!(gradient_delta(&a, &a).unwrap().data.iter().all(|&v| v == 0.0));
        let b = Image::new(1, 3, 1, vec![0.0, 4.0, 0.0]).unwrap();
        assert_eq!(gradient_delta(&a, &b).unwrap().data, vec![1.0, -1.0, 0.5]);
        assert!(gradient_delta(&a, &Image::zeros(1, 3, 1)).is_err());
    }

    fn mask_from(h: usize, w: usize, on: &[usize]) -> SegmentationMask {
        let mut img = Image::zeros(h, w, 1);
        for &i in on {
            img.data[i] = 1.0;
        }
        SegmentationMask::from_image("m", &img).unwrap()
    }

    #[test]
    fn iou_set_counts() {
        let mask = mask_from(4, 4, &[0, 1, 2, 3, 4, 5, 6, 7]);
        // attention on 6 pixels, 4 of them inside the mask
        let mut attn = Image::zeros(4, 4, 1);
        for i in [4, 5, 6, 7, 8, 9] {
            attn.data[i] = 1.0;
        }
        assert!((thresholded_iou(&attn, &mask, 0.5).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(thresholded_iou(&mask.mask, &mask, 0.5).unwrap(), 1.0);
        let mut disjoint = Image::zeros(4, 4, 1);
        disjoint.data[15] = 1.0;
        assert_eq!(thresholded_iou(&disjoint, &mask, 0.5).unwrap(), 0.0);
        assert!(thresholded_iou(&attn, &mask_from(4, 4, &[]), 0.5).is_err());
    }

    #[test]
    fn equalization_truncates_the_larger_set_by_score() {
        let mask = mask_from(1, 6, &[0, 1]);
        // five pixels above 0.5; the top two are outside the mask
        let a = Image::new(1, 6, 1, vec![0.7, 0.7, 0.8, 1.0, 0.9, 0.0]).unwrap();
        // two pixels above 0.5, both inside the mask
        let b = Image::new(1, 6, 1, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (ia, ib) = attention_iou(&a, &mask, &b, 0.5).unwrap();
        assert_eq!(ib, 1.0);
        assert_eq!(ia, 0.0);
        let (jb, ja) = attention_iou(&b, &mask, &a, 0.5).unwrap();
        assert_eq!((ia, ib), (ja, jb));
        // ties at the cut keep the lower index
        let t = Image::new(1, 6, 1, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let one = Image::new(1, 6, 1, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (it, _) = attention_iou(&t, &mask, &one, 0.5).unwrap();
        assert_eq!(it, 0.5);
    }

    #[test]
    fn sign_flip_edge_cases() {
        let r = randomization_test(&Randomization::SignFlip(vec![0.0; 8]), 10_000, 1).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = randomization_test(&Randomization::SignFlip(vec![10.0; 20]), 10_000, 1).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 1.0 / 10_000.0);
        assert!(randomization_test(&Randomization::SignFlip(vec![]), 10, 1).is_err());
    }

    #[test]
    fn group_swap_exact_small_case() {
        // pooled {1,2,3,4}, group a = {3,4}: only 1 of 6 splits reaches the observed 2.0
        let r = randomization_test(
            &Randomization::GroupSwap {
                a: vec![3.0, 4.0],
                b: vec![1.0, 2.0],
            },
            100,
            0,
        )
        .unwrap();
        assert!(r.exact);
        assert_eq!(r.draws, 6);
        assert!((r.p_value - 1.0 / 6.0).abs() < 1e-15);
        let mc = randomization_test(
            &Randomization::GroupSwap {
                a: vec![3.0, 4.0],
                b: vec![1.0, 2.0],
            },
            5,
            0,
        )
        .unwrap();
        assert!(!mc.exact && mc.draws == 5);
    }

    #[test]
    fn ks_distance_of_grid_is_small() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&s) - 0.005).abs() < 1e-12);
        assert_eq!(ks_uniform(&[1.0]), 1.0);
    }
}
