//! Bubble maps from game play and the statistics computed over them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{gaussian_blur, Image};

/// Side of the square canvas maps are collected on.
pub const CANVAS_SIZE: usize = 256;
pub const PLAYER_BUBBLE: usize = 14;
pub const PARTNER_BUBBLE: usize = 21;
/// Reliability reported for the full crowd-sourced dataset; reference only.
pub const REFERENCE_RHO_OBSERVED: f64 = 0.58;
pub const REFERENCE_RHO_NULL: f64 = 0.18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BubbleEvent {
    pub round_id: u64,
    pub t_ms: u64,
    pub x: u32,
    pub y: u32,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub image_id: String,
    pub grid: Image,
    pub participant_count: u32,
}

impl ImportanceMap {
    pub fn new(image_id: impl Into<String>, grid: Image, participant_count: u32) -> Result<Self> {
        if grid.channels != 1 {
            return Err(Error::Shape(format!("importance map needs 1 channel, got {}", grid.channels)));
        }
        if grid.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Data("importance maps must be nonnegative".into()));
        }
        Ok(Self {
            image_id: image_id.into(),
            grid,
            participant_count,
        })
    }
}

/// Inclusive-exclusive span of a `size`-wide square centered on `c`, clipped to `[0, extent)`.
pub fn stamp_span(c: u32, size: u32, extent: usize) -> std::ops::Range<usize> {
    let lo = c as i64 - (size / 2) as i64;
    let hi = lo + size as i64;
    (lo.max(0) as usize)..(hi.min(extent as i64).max(0) as usize)
}

/// Stamp a `size x size` square per event; overlaps accumulate.
pub fn rasterize_bubbles(
    image_id: &str,
    events: &[BubbleEvent],
    height: usize,
    width: usize,
) -> Result<ImportanceMap> {
    let mut grid = Image::zeros(height, width, 1);
    for e in events {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::Data(format!(
                "bubble at ({}, {}) outside {width}x{height} canvas",
                e.x, e.y
            )));
        }
        for y in stamp_span(e.y, e.size, height) {
            for x in stamp_span(e.x, e.size, width) {
                *grid.at_mut(y, x, 0) += 1.0;
            }
        }
    }
    ImportanceMap::new(image_id, grid, 1)
}

/// Per-pixel proportion of players whose (binarized) map covers the pixel.
pub fn aggregate_maps(maps: &[ImportanceMap]) -> Result<ImportanceMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("nothing to aggregate".into()))?;
    let (h, w) = (first.grid.height, first.grid.width);
    let mut acc = Image::zeros(h, w, 1);
    for m in maps {
        if (m.grid.height, m.grid.width, m.grid.channels) != (h, w, 1) {
            return Err(Error::Shape(format!(
                "map for {} is {}x{}, expected {h}x{w}",
                m.image_id, m.grid.height, m.grid.width
            )));
        }
        for (a, &v) in acc.data.iter_mut().zip(&m.grid.data) {
            if v > 0.0 {
                *a += 1.0;
            }
        }
    }
    let n = maps.len() as f64;
    acc.data.iter_mut().for_each(|v| *v /= n);
    ImportanceMap::new(first.image_id.clone(), acc, maps.len() as u32)
}

/// 1-based fractional ranks; ties share the average rank.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("correlation of {} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two values".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("correlation of {} vs {} values", a.len(), b.len())));
    }
    pearson(&fractional_ranks(a), &fractional_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub rho_observed: f64,
    pub rho_null: f64,
    pub pair_count: usize,
    /// Draws discarded because one of the two maps was constant.
    pub skipped: usize,
    pub seed: u64,
}

/// Mean same-image cross-player correlation against mean cross-image correlation.
///
/// `per_image` holds each image's per-player maps. Observed pairs sample an
/// image with at least two players and two distinct players on it; null pairs
/// sample two distinct images and one player on each. Maps are blurred with a
/// `blur_kernel`-sized Gaussian first (1 disables blurring).
pub fn inter_rater_reliability(
    per_image: &[Vec<Image>],
    n_pairs: usize,
    blur_kernel: usize,
    seed: u64,
) -> Result<ReliabilityReport> {
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }
    let eligible: Vec<usize> = (0..per_image.len())
        .filter(|&i| per_image[i].len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data("no image has two or more players".into()));
    }
    let populated: Vec<usize> = (0..per_image.len())
        .filter(|&i| !per_image[i].is_empty())
        .collect();
    if populated.len() < 2 {
        return Err(Error::Data("null pairs need maps on two distinct images".into()));
    }
    let blurred: Vec<Vec<Image>> = per_image
        .iter()
        .map(|maps| maps.iter().map(|m| gaussian_blur(m, blur_kernel)).collect())
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut skipped = 0;
    let draw_pair = |rng: &mut ChaCha8Rng, same: bool| -> Result<Option<f64>> {
        let (a, b) = if same {
            let img = eligible[rng.random_range(0..eligible.len())];
            let k = blurred[img].len();
            let p = rng.random_range(0..k);
            let mut q = rng.random_range(0..k - 1);
            if q >= p {
                q += 1;
            }
            (&blurred[img][p], &blurred[img][q])
        } else {
            let i = rng.random_range(0..populated.len());
            let mut j = rng.random_range(0..populated.len() - 1);
            if j >= i {
                j += 1;
            }
            let (ia, ib) = (populated[i], populated[j]);
            let pa = rng.random_range(0..blurred[ia].len());
            let pb = rng.random_range(0..blurred[ib].len());
            (&blurred[ia][pa], &blurred[ib][pb])
        };
        match spearman(&a.data, &b.data) {
            Ok(r) => Ok(Some(r)),
            Err(Error::UndefinedCorrelation(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut observed = Vec::with_capacity(n_pairs);
    let mut null = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        match draw_pair(&mut rng, true)? {
            Some(r) => observed.push(r),
            None => skipped += 1,
        }
        match draw_pair(&mut rng, false)? {
            Some(r) => null.push(r),
            None => skipped += 1,
        }
    }
    if observed.is_empty() || null.is_empty() {
        return Err(Error::UndefinedCorrelation("every sampled pair had a constant map".into()));
    }
    Ok(ReliabilityReport {
        rho_observed: mean(&observed),
        rho_null: mean(&null),
        pair_count: observed.len(),
        skipped,
        seed,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCorrelation {
    pub image_id: String,
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedVariability {
    /// `100 * mean(rho) / rho_human` over images with a defined correlation.
    pub percentage: f64,
    pub mean_rho: f64,
    pub per_image: Vec<ImageCorrelation>,
}

impl ExplainedVariability {
    /// Share of defined per-image correlations strictly above `rho_null`.
    pub fn fraction_above(&self, rho_null: f64) -> f64 {
        let defined: Vec<f64> = self.per_image.iter().filter_map(|c| c.rho).collect();
        if defined.is_empty() {
            return 0.0;
        }
        defined.iter().filter(|&&r| r > rho_null).count() as f64 / defined.len() as f64
    }
}

/// Fraction of human map variability explained by model maps.
///
/// Images are matched by id; maps of one pair must have equal size. Images
/// whose correlation is undefined are reported individually and left out of
/// the mean.
pub fn explained_variability(
    model_maps: &[(String, Image)],
    human_maps: &BTreeMap<String, Image>,
    rho_human: f64,
) -> Result<ExplainedVariability> {
    if !(rho_human > 0.0) {
        return Err(Error::Config(format!("rho_human must be positive, got {rho_human}")));
    }
    let mut per_image = Vec::new();
    for (id, model) in model_maps {
        let Some(human) = human_maps.get(id) else { continue };
        if (model.height, model.width) != (human.height, human.width) {
            return Err(Error::Shape(format!(
                "{id}: model map {}x{} vs human map {}x{}",
                model.height, model.width, human.height, human.width
            )));
        }
        per_image.push(match spearman(&model.data, &human.data) {
            Ok(r) => ImageCorrelation {
                image_id: id.clone(),
                rho: Some(r),
                error: None,
            },
            Err(e @ Error::UndefinedCorrelation(_)) => ImageCorrelation {
                image_id: id.clone(),
                rho: None,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        });
    }
    if per_image.is_empty() {
        return Err(Error::Data("model and human maps share no image ids".into()));
    }
    let defined: Vec<f64> = per_image.iter().filter_map(|c| c.rho).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedCorrelation(format!(
            "all {} images: {}",
            per_image.len(),
            per_image[0].error.clone().unwrap_or_default()
        )));
    }
    let mean_rho = mean(&defined);
    Ok(ExplainedVariability {
        percentage: 100.0 * mean_rho / rho_human,
        mean_rho,
        per_image,
    })
}

/// Raters whose pairwise same-image Spearman correlation is `rho` in expectation.
///
/// Each image has a shared Gaussian field; each rater sees
/// `exp(r * shared + sqrt(1 - r^2) * own_noise)` with `r^2 = 2 sin(pi rho / 6)`,
/// the Pearson correlation whose bivariate-normal Spearman value is `rho`.
pub fn planted_raters(
    images: usize,
    players: usize,
    size: usize,
    rho: f64,
    seed: u64,
) -> Result<Vec<Vec<Image>>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("planted rho must be in [0, 1], got {rho}")));
    }
    let pearson = 2.0 * (std::f64::consts::PI * rho / 6.0).sin();
    let r = pearson.sqrt();
    let e = (1.0 - pearson).max(0.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images);
    for _ in 0..images {
        let shared: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
        let maps = (0..players)
            .map(|_| {
                let data = shared
                    .iter()
                    .map(|&s| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        (r * s + e * n).exp()
                    })
                    .collect();
                Image::new(size, size, 1, data)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(maps);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapIndexRecord {
    pub image_id: String,
    pub label: usize,
    pub participant_count: u32,
    pub map_path: String,
}

pub const MAP_INDEX_FILE: &str = "maps.ndjson";

/// Write aggregated maps as grayscale PNGs (max-normalized) plus an NDJSON index.
pub fn export_maps(dir: &Path, maps: &[(ImportanceMap, usize)]) -> Result<Vec<MapIndexRecord>> {
    fs::create_dir_all(dir.join("maps"))?;
    let mut index = BufWriter::new(fs::File::create(dir.join(MAP_INDEX_FILE))?);
    let mut records = Vec::with_capacity(maps.len());
    for (map, label) in maps {
        let file: String = map
            .image_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let map_path = format!("maps/{file}.png");
        map.grid.max_normalized().save_png(&dir.join(&map_path))?;
        let rec = MapIndexRecord {
            image_id: map.image_id.clone(),
            label: *label,
            participant_count: map.participant_count,
            map_path,
        };
        writeln!(index, "{}", serde_json::to_string(&rec)?)?;
        records.push(rec);
    }
    index.flush()?;
    Ok(records)
}

pub fn import_maps(dir: &Path) -> Result<Vec<(ImportanceMap, usize)>> {
    let file = fs::File::open(dir.join(MAP_INDEX_FILE))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MapIndexRecord = serde_json::from_str(&line)?;
        let grid = Image::load_png(&dir.join(&rec.map_path))?;
        out.push((
            ImportanceMap::new(rec.image_id, grid, rec.participant_count)?,
            rec.label,
        ));
    }
    Ok(out)
}

pub fn write_events(path: &Path, events: &[BubbleEvent]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for e in events {
        writeln!(out, "{}", serde_json::to_string(e)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<BubbleEvent>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Group maps by image id, preserving first-seen order of ids.
pub fn group_by_image(maps: Vec<ImportanceMap>) -> Vec<(String, Vec<Image>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Image>> = BTreeMap::new();
    for m in maps {
        if !groups.contains_key(&m.image_id) {
            order.push(m.image_id.clone());
        }
        groups.entry(m.image_id).or_default().push(m.grid);
    }
    order
        .into_iter()
        .map(|id| {
            let maps = groups.remove(&id).unwrap_or_default();
            (id, maps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};

    fn ev(x: u32, y: u32, size: u32) -> BubbleEvent {
        BubbleEvent {
            round_id: 1,
            t_ms: 0,
            x,
            y,
            size,
        }
    }

    #[test]
    fn no_events_gives_empty_map() {
        let m = rasterize_bubbles("a", &[], 8, 8).unwrap();
        assert!(m.grid.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_bubble_covers_its_area() {
        let m = rasterize_bubbles("a", &[ev(128, 128, 14)], 256, 256).unwrap();
        assert_eq!(m.grid.data.iter().filter(|&&v| v > 0.0).count(), 196);
        let corner = rasterize_bubbles("a", &[ev(0, 0, 14)], 256, 256).unwrap();
        assert_eq!(corner.grid.data.iter().filter(|&&v| v > 0.0).count(), 49);
    }

    #[test]
    fn out_of_canvas_event_is_rejected() {
        assert!(rasterize_bubbles("a", &[ev(8, 0, 3)], 8, 8).is_err());
    }

    #[test]
    fn overlap_accumulates_and_union_matches_sets() {
        let events = [ev(10, 10, 6), ev(13, 12, 6)];
        let m = rasterize_bubbles("a", &events, 32, 32).unwrap();
        let mut sets = Vec::new();
        for e in &events {
            let mut s = std::collections::HashSet::new();
            for y in (e.y as i64 - 3)..(e.y as i64 + 3) {
                for x in (e.x as i64 - 3)..(e.x as i64 + 3) {
                    s.insert((y, x));
                }
            }
            sets.push(s);
        }
        let union: std::collections::HashSet<_> = sets[0].union(&sets[1]).collect();
        let inter: std::collections::HashSet<_> = sets[0].intersection(&sets[1]).collect();
        assert_eq!(m.grid.data.iter().filter(|&&v| v > 0.0).count(), union.len());
        assert_eq!(m.grid.data.iter().filter(|&&v| v == 2.0).count(), inter.len());
        for &&(y, x) in &inter {
            assert_eq!(m.grid.at(y as usize, x as usize, 0), 2.0);
        }
    }

    #[test]
    fn aggregate_proportions() {
        let a = rasterize_bubbles("i", &[ev(1, 1, 1), ev(1, 1, 1)], 4, 4).unwrap();
        let single = aggregate_maps(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.grid.at(1, 1, 0), 1.0);
        assert_eq!(single.participant_count, 1);
        let b = rasterize_bubbles("i", &[ev(3, 3, 1)], 4, 4).unwrap();
        let both = aggregate_maps(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(both.grid.at(1, 1, 0), 0.5);
        assert_eq!(both.grid.at(3, 3, 0), 0.5);
        assert_eq!(both.grid.data.iter().filter(|&&v| v > 0.0).count(), 2);
        let c = rasterize_bubbles("i", &[ev(1, 1, 1), ev(3, 3, 1), ev(0, 0, 1)], 4, 4).unwrap();
        let three = aggregate_maps(&[a, b, c]).unwrap();
        // counting oracle: pixel covered by k of 3 players -> k/3
        assert_eq!(three.grid.at(1, 1, 0), 2.0 / 3.0);
        assert_eq!(three.grid.at(3, 3, 0), 2.0 / 3.0);
        assert_eq!(three.grid.at(0, 0, 0), 1.0 / 3.0);
        assert_eq!(three.grid.at(2, 2, 0), 0.0);
        let other = rasterize_bubbles("i", &[], 5, 4).unwrap();
        assert!(aggregate_maps(&[three, other]).is_err());
    }

    #[test]
    fn spearman_basics() {
        let a = [0.3, 1.7, -2.0, 5.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-15);
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert_eq!(fractional_ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn identical_raters_are_perfectly_reliable() {
        let maps = planted_raters(5, 1, 6, 0.5, 1).unwrap();
        let dup: Vec<Vec<Image>> = maps.into_iter().map(|m| vec![m[0].clone(), m[0].clone()]).collect();
        let r = inter_rater_reliability(&dup, 50, 1, 3).unwrap();
        assert!((r.rho_observed - 1.0).abs() < 1e-12);
        assert_eq!(r.pair_count, 50);
    }

    #[test]
    fn reliability_requires_two_players() {
        let maps = planted_raters(3, 1, 4, 0.5, 1).unwrap();
        assert!(inter_rater_reliability(&maps, 10, 1, 0).is_err());
    }

    #[test]
    fn explained_variability_of_identical_maps() {
        let human = planted_raters(3, 1, 5, 0.5, 2).unwrap();
        let humans: BTreeMap<String, Image> = human
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("im{i}"), m[0].clone()))
            .collect();
        let model: Vec<(String, Image)> = humans.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let ev = explained_variability(&model, &humans, 0.58).unwrap();
        assert!((ev.percentage - 100.0 / 0.58).abs() < 1e-9);
        assert!(ev.per_image.iter().all(|c| c.rho == Some(1.0)));

        let flat: Vec<(String, Image)> = humans.keys().map(|k| (k.clone(), Image::filled(5, 5, 1, 0.2))).collect();
        let err = explained_variability(&flat, &humans, 0.58).unwrap_err();
        assert!(matches!(err, Error::UndefinedCorrelation(_)));

        let strangers = vec![("zzz".to_string(), Image::filled(5, 5, 1, 0.2))];
        assert!(matches!(
            explained_variability(&strangers, &humans, 0.58),
            Err(Error::Data(_))
        ));
        assert!(explained_variability(&model, &humans, 0.0).is_err());
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = rasterize_bubbles("img/1", &[ev(2, 2, 3)], 6, 6).unwrap();
        let agg = aggregate_maps(&[m]).unwrap();
        let recs = export_maps(dir.path(), &[(agg.clone(), 4)]).unwrap();
        assert_eq!(recs[0].map_path, "maps/img_1.png");
        let back = import_maps(dir.path()).unwrap();
        assert_eq!(back[0].0.grid.data, agg.grid.data);
        assert_eq!(back[0].1, 4);

        let path = dir.path().join("events.ndjson");
        let events = vec![ev(1, 2, 14), ev(3, 4, 14)];
        write_events(&path, &events).unwrap();
        assert_eq!(read_events(&path).unwrap(), events);
        let line = fs::read_to_string(&path).unwrap();
        assert_eq!(line.lines().next().unwrap(), r#"{"round_id":1,"t_ms":0,"x":1,"y":2,"size":14}"#);
    }

    proptest! {
        #[test]
        fn spearman_invariant_to_monotone_transforms(
            a in proptest::collection::vec(-100.0f64..100.0, 3..30),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            prop_assume!(spearman(&a, &b).is_ok());
            let base = spearman(&a, &b).unwrap();
            let ta: Vec<f64> = a.iter().map(|v| (v / 50.0).exp() * 3.0 + 1.0).collect();
            let tb: Vec<f64> = b.iter().map(|v| v.powi(3)).collect();
            prop_assert!((spearman(&ta, &tb).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn rasterize_ignores_event_order(points in proptest::collection::vec((0u32..20, 0u32..20), 0..12)) {
            let events: Vec<BubbleEvent> = points.iter().map(|&(x, y)| ev(x, y, 5)).collect();
            let mut rev = events.clone();
            rev.reverse();
            prop_assert_eq!(
                rasterize_bubbles("a", &events, 20, 20).unwrap(),
                rasterize_bubbles("a", &rev, 20, 20).unwrap()
            );
        }

        #[test]
        fn aggregate_stays_in_unit_interval(points in proptest::collection::vec((0u32..10, 0u32..10, 0usize..4), 1..20)) {
            let maps: Vec<ImportanceMap> = (0..4)
                .map(|p| {
                    let ev: Vec<BubbleEvent> = points.iter().filter(|t| t.2 == p).map(|&(x, y, _)| ev(x, y, 3)).collect();
                    rasterize_bubbles("i", &ev, 10, 10).unwrap()
                })
                .collect();
            let agg = aggregate_maps(&maps).unwrap();
            prop_assert!(agg.grid.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
