//! Reveal stimuli: a contiguous most-to-least-important pixel ordering, a
//! phase-scrambled background and a log-spaced ladder of reveal fractions.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Image;

pub const DEFAULT_BETA: f64 = 0.05;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct RevealStimulus {
    pub image_id: String,
    /// Row-major pixel indices, most important first.
    pub pixel_order: Vec<usize>,
    /// Strictly increasing percentages in `(0, 100]`.
    pub fractions: Vec<f64>,
    pub scrambled_background: Image,
}

/// Seeded flood fill from the importance peak.
///
/// Importance is scaled by its maximum. Each step draws the next pixel from
/// the 4-connected frontier of the revealed set with probability
/// `softmax(priority / temperature)`, where
/// `priority = importance - beta * manhattan_distance(pixel, seed)`.
/// A temperature of 0 picks the highest priority, ties to the lowest index.
pub fn importance_ordering(map: &Image, beta: f64, temperature: f64, seed: u64) -> Result<Vec<usize>> {
    if map.channels != 1 {
        return Err(Error::Shape(format!("importance map must have one channel, got {}", map.channels)));
    }
    if map.data.iter().any(|&v| v < 0.0) {
        return Err(Error::Data("importance map has negative values".into()));
    }
    if !(beta >= 0.0) || !(temperature >= 0.0) {
        return Err(Error::Config(format!("beta ({beta}) and temperature ({temperature}) must be nonnegative")));
    }
    let max = map.max();
    if !(max > 0.0) {
        return Err(Error::Data("importance map is all zero; no seed pixel".into()));
    }
    let (h, w) = (map.height, map.width);
    let start = (0..h * w)
        .max_by(|&a, &b| map.data[a].total_cmp(&map.data[b]).then(b.cmp(&a)))
        .expect("nonempty map");
    let (sy, sx) = (start / w, start % w);
    let priority: Vec<f64> = (0..h * w)
        .map(|i| {
            let d = (i / w).abs_diff(sy) + (i % w).abs_diff(sx);
            map.data[i] / max - beta * d as f64
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = vec![0u8; h * w]; // 0 unseen, 1 frontier, 2 revealed
    let mut frontier: Vec<usize> = Vec::new();
    let mut order = Vec::with_capacity(h * w);
    let mut reveal = |p: usize, state: &mut [u8], frontier: &mut Vec<usize>| {
        state[p] = 2;
        order.push(p);
        let (y, x) = (p / w, p % w);
        let mut push = |q: usize| {
            if state[q] == 0 {
                state[q] = 1;
                frontier.push(q);
            }
        };
        if y > 0 {
            push(p - w);
        }
        if y + 1 < h {
            push(p + w);
        }
        if x > 0 {
            push(p - 1);
        }
        if x + 1 < w {
            push(p + 1);
        }
    };
    reveal(start, &mut state, &mut frontier);
    let mut weights = Vec::new();
    while !frontier.is_empty() {
        let best = (0..frontier.len())
            .max_by(|&a, &b| {
                priority[frontier[a]]
                    .total_cmp(&priority[frontier[b]])
                    .then(frontier[b].cmp(&frontier[a]))
            })
            .expect("frontier nonempty");
        let pick = if temperature == 0.0 {
            best
        } else {
            let top = priority[frontier[best]];
            weights.clear();
            weights.extend(frontier.iter().map(|&q| ((priority[q] - top) / temperature).exp()));
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut chosen = frontier.len() - 1;
            for (k, &wt) in weights.iter().enumerate() {
                if u < wt {
                    chosen = k;
                    break;
                }
                u -= wt;
            }
            chosen
        };
        let p = frontier.swap_remove(pick);
        reveal(p, &mut state, &mut frontier);
    }
    Ok(order)
}

/// `n` log-spaced percentages from 1 to 100, rounded to 0.1.
pub fn reveal_ladder(n_steps: usize) -> Result<Vec<f64>> {
    if n_steps < 2 {
        return Err(Error::Config(format!("reveal ladder needs at least 2 steps, got {n_steps}")));
    }
    let out: Vec<f64> = (0..n_steps)
        .map(|k| (100f64.powf(k as f64 / (n_steps - 1) as f64) * 10.0).round() / 10.0)
        .collect();
    if out.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Config(format!(
            "{n_steps} steps collide at 0.1 percent resolution"
        )));
    }
    Ok(out)
}

/// Number of pixels revealed at `fraction` percent of `total`.
pub fn reveal_count(fraction: f64, total: usize) -> usize {
    // the small slack keeps exact products (e.g. 10% of 100) from rounding up
    ((fraction * total as f64 / 100.0) - 1e-9).ceil().max(0.0) as usize
}

/// Random phases with `theta(-k) = -theta(k)`; self-conjugate frequencies get `None`.
pub fn random_phases(h: usize, w: usize, seed: u64) -> Vec<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Option<f64>> = vec![None; h * w];
    let mut done = vec![false; h * w];
    for ky in 0..h {
        for kx in 0..w {
            let k = ky * w + kx;
            if done[k] {
                continue;
            }
            let m = ((h - ky) % h) * w + (w - kx) % w;
            done[k] = true;
            done[m] = true;
            if m == k {
                continue;
            }
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            out[k] = Some(theta);
            out[m] = Some(-theta);
        }
    }
    out
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Per-channel 2-D DFT magnitudes, channel-major (`C` blocks of `H*W`).
pub fn amplitude_spectrum(img: &Image) -> Vec<f64> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        let mut buf: Vec<Complex<f64>> = (0..h * w).map(|i| Complex::new(img.data[i * c + ch], 0.0)).collect();
        fft2(&mut buf, h, w, false);
        out.extend(buf.iter().map(|z| z.norm()));
    }
    out
}

/// Phase scramble without the final clip to `[0, 1]`. One random phase field
/// is shared by all channels; self-conjugate frequencies keep their phase.
pub fn phase_scramble_raw(img: &Image, seed: u64) -> Result<Image> {
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("phase scramble input".into()));
    }
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::Shape(format!("phase scramble needs 1 or 3 channels, got {}", img.channels)));
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let phases = random_phases(h, w, seed);
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        let mut buf: Vec<Complex<f64>> = (0..h * w).map(|i| Complex::new(img.data[i * c + ch], 0.0)).collect();
        fft2(&mut buf, h, w, false);
        for (z, theta) in buf.iter_mut().zip(&phases) {
            if let Some(t) = theta {
                *z = Complex::from_polar(z.norm(), *t);
            }
        }
        fft2(&mut buf, h, w, true);
        for (i, z) in buf.iter().enumerate() {
            out[i * c + ch] = z.re;
        }
    }
    Image::new(h, w, c, out)
}

pub fn phase_scramble(img: &Image, seed: u64) -> Result<Image> {
    let mut out = phase_scramble_raw(img, seed)?;
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Order the map's pixels and scramble the image into a full stimulus.
pub fn build_stimulus(
    image_id: impl Into<String>,
    image: &Image,
    map: &Image,
    n_steps: usize,
    beta: f64,
    temperature: f64,
    seed: u64,
) -> Result<RevealStimulus> {
    if (map.height, map.width) != (image.height, image.width) {
        return Err(Error::Shape(format!(
            "map {}x{} vs image {}x{}",
            map.height, map.width, image.height, image.width
        )));
    }
    Ok(RevealStimulus {
        image_id: image_id.into(),
        pixel_order: importance_ordering(map, beta, temperature, seed)?,
        fractions: reveal_ladder(n_steps)?,
        scrambled_background: phase_scramble(image, seed)?,
    })
}

/// The first `reveal_count(fraction)` pixels of the ordering, shifted so their
/// centroid lands on the image center, over the scrambled background.
pub fn compose_reveal(image: &Image, stimulus: &RevealStimulus, fraction: f64) -> Result<Image> {
    if !stimulus.fractions.iter().any(|&f| (f - fraction).abs() < 1e-9) {
        return Err(Error::Config(format!("fraction {fraction} is not on the ladder {:?}", stimulus.fractions)));
    }
    let bg = &stimulus.scrambled_background;
    let (h, w, c) = (image.height, image.width, image.channels);
    if (bg.height, bg.width, bg.channels) != (h, w, c) || stimulus.pixel_order.len() != h * w {
        return Err(Error::Shape("stimulus does not match the image".into()));
    }
    let n = reveal_count(fraction, h * w);
    let shown = &stimulus.pixel_order[..n];
    let (mut cy, mut cx) = (0.0, 0.0);
    for &p in shown {
        cy += (p / w) as f64;
        cx += (p % w) as f64;
    }
    let dy = ((h as f64 - 1.0) / 2.0 - cy / n.max(1) as f64).round() as isize;
    let dx = ((w as f64 - 1.0) / 2.0 - cx / n.max(1) as f64).round() as isize;
    let mut out = bg.clone();
    for &p in shown {
        let (ty, tx) = ((p / w) as isize + dy, (p % w) as isize + dx);
        if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
            continue;
        }
        let dst = (ty as usize * w + tx as usize) * c;
        out.data[dst..dst + c].copy_from_slice(&image.data[p * c..p * c + c]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusRecord {
    pub image_id: String,
    pub fraction: f64,
    pub revealed_pixels: usize,
    pub path: String,
}

pub const STIMULUS_MANIFEST: &str = "manifest.ndjson";

/// Write `{image_id}_{fraction}.png` for every ladder step under `dir`.
pub fn write_stimulus(dir: &Path, image: &Image, stimulus: &RevealStimulus) -> Result<Vec<StimulusRecord>> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(stimulus.fractions.len());
    for &f in &stimulus.fractions {
        let name = format!("{}_{}.png", stimulus.image_id, f);
        compose_reveal(image, stimulus, f)?.save_png(&dir.join(&name))?;
        records.push(StimulusRecord {
            image_id: stimulus.image_id.clone(),
            fraction: f,
            revealed_pixels: reveal_count(f, image.pixels()),
            path: name,
        });
    }
    let mut out = BufWriter::new(fs::File::create(dir.join(STIMULUS_MANIFEST))?);
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_endpoints_and_midpoint() {
        assert_eq!(reveal_ladder(2).unwrap(), vec![1.0, 100.0]);
        assert_eq!(reveal_ladder(3).unwrap(), vec![1.0, 10.0, 100.0]);
        assert_eq!(reveal_ladder(5).unwrap(), vec![1.0, 3.2, 10.0, 31.6, 100.0]);
        assert!(reveal_ladder(1).is_err());
        assert!(reveal_ladder(500).is_err());
    }

    #[test]
    fn seed_is_the_peak() {
        let mut m = Image::zeros(3, 3, 1);
        *m.at_mut(1, 1, 0) = 1.0;
        assert_eq!(importance_ordering(&m, 0.05, 0.1, 3).unwrap()[0], 4);
        assert!(importance_ordering(&Image::zeros(3, 3, 1), 0.05, 0.1, 3).is_err());
    }

    #[test]
    fn greedy_ramp() {
        let m = Image::new(1, 4, 1, vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(importance_ordering(&m, 0.0, 0.0, 0).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_image_scrambles_to_zero() {
        let z = Image::zeros(6, 5, 3);
        assert!(phase_scramble(&z, 1).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_reveal_is_the_image() {
        let mut img = Image::zeros(4, 4, 1);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 / 16.0);
        let mut map = Image::zeros(4, 4, 1);
        *map.at_mut(0, 0, 0) = 1.0;
        let s = build_stimulus("x", &img, &map, 3, 0.05, 0.0, 1).unwrap();
        assert_eq!(compose_reveal(&img, &s, 100.0).unwrap(), img);
        assert!(compose_reveal(&img, &s, 50.0).is_err());
        // 1% of 16 pixels is the single seed pixel, moved to the center
        let one = compose_reveal(&img, &s, 1.0).unwrap();
        let diff: Vec<usize> = (0..16).filter(|&i| one.data[i] != s.scrambled_background.data[i]).collect();
        assert!(diff.len() <= 1);
        assert_eq!(one.at(2, 2, 0), img.at(0, 0, 0));
    }

    #[test]
    fn reveal_count_is_a_ceiling() {
        assert_eq!(reveal_count(1.0, 1024), 11);
        assert_eq!(reveal_count(10.0, 100), 10);
        assert_eq!(reveal_count(100.0, 7), 7);
    }

    #[test]
    fn manifest_lists_each_step() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(8, 8, 3, 0.5);
        let mut map = Image::zeros(8, 8, 1);
        *map.at_mut(3, 3, 0) = 1.0;
        let s = build_stimulus("im", &img, &map, 3, 0.05, 0.1, 2).unwrap();
        let recs = write_stimulus(dir.path(), &img, &s).unwrap();
        let names: Vec<&str> = recs.iter().map(|r| r.path.as_str()).collect();
        assert_eq!(names, ["im_1.png", "im_10.png", "im_100.png"]);
        assert!(dir.path().join("im_10.png").exists());
    }
}
