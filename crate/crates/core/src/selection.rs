//! Per-part channel selection.
//!
//! For part `c` and one feature source, the in-context pixels split into the
//! in-class set (argmax of the soft masks is `c`) and the out-class set. The
//! objective to minimize over `K`-subsets of channels is the sum of the mean
//! per-channel population variance of both sets. Because that objective is a
//! mean of per-channel terms, the minimizing subset is simply the `K`
//! channels with the lowest individual scores.
//!
//! `K` itself is picked by re-clustering the in-context example: for each
//! candidate `K`, pixels are assigned to the nearer of the in-class and
//! out-class centers (cosine similarity on the selected channels) and the
//! resulting mask is scored by IoU against the reference.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusedFeature, Span};
use crate::tensor_io::{PartMaskSet, PartSelection, SelectionRecord, SourceSelection};

const HIST_BINS: usize = 32;
const HIST_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Variance,
    Cosine,
    Kl,
    Js,
}

impl Metric {
    pub fn direction(self) -> Direction {
        match self {
            Metric::Variance | Metric::Cosine => Direction::Lowest,
            Metric::Kl | Metric::Js => Direction::Highest,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Variance => "variance",
            Metric::Cosine => "cosine",
            Metric::Kl => "kl",
            Metric::Js => "js",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Metric::Variance),
            "cosine" => Ok(Metric::Cosine),
            "kl" => Ok(Metric::Kl),
            "js" => Ok(Metric::Js),
            other => Err(Error::Validation(format!(
                "unknown metric '{other}' (expected variance, cosine, kl or js)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Lowest,
    Highest,
}

/// In-class and out-class pixel vectors of one part over one channel block.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPixelSet {
    pub part: usize,
    pub dims: usize,
    in_class: Vec<f32>,
    out_class: Vec<f32>,
}

impl ClassPixelSet {
    /// `in_class` and `out_class` are row-major `n x dims` blocks.
    pub fn new(part: usize, dims: usize, in_class: Vec<f32>, out_class: Vec<f32>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::Validation(
                "pixel set needs at least one channel".into(),
            ));
        }
        if !in_class.len().is_multiple_of(dims) || !out_class.len().is_multiple_of(dims) {
            return Err(Error::Shape(format!(
                "pixel blocks of {} and {} values are not multiples of {dims} channels",
                in_class.len(),
                out_class.len()
            )));
        }
        Ok(Self {
            part,
            dims,
            in_class,
            out_class,
        })
    }

    /// Splits the pixels of `span` in `fused` by whether their label is `part`.
    pub fn from_span(fused: &FusedFeature, span: Span, labels: &[u8], part: usize) -> Self {
        let mut in_class = Vec::new();
        let mut out_class = Vec::new();
        for (i, &label) in labels.iter().enumerate() {
            let row = &fused.map.pixel(i)[span.range()];
            if label as usize == part {
                in_class.extend_from_slice(row);
            } else {
                out_class.extend_from_slice(row);
            }
        }
        Self {
            part,
            dims: span.len,
            in_class,
            out_class,
        }
    }

    pub fn n_in(&self) -> usize {
        self.in_class.len() / self.dims
    }

    pub fn n_out(&self) -> usize {
        self.out_class.len() / self.dims
    }

    pub fn in_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.in_class.chunks_exact(self.dims)
    }

    pub fn out_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.out_class.chunks_exact(self.dims)
    }
}

fn channel_means(block: &[f32], dims: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; dims];
    let n = block.len() / dims;
    for row in block.chunks_exact(dims) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    if n > 0 {
        sums.iter_mut().for_each(|s| *s /= n as f64);
    }
    sums
}

/// Population variance per channel; an empty block contributes zero.
fn channel_pop_vars(block: &[f32], dims: usize) -> Vec<f64> {
    let n = block.len() / dims;
    if n == 0 {
        return vec![0.0; dims];
    }
    let means = channel_means(block, dims);
    let mut acc = vec![0.0f64; dims];
    for row in block.chunks_exact(dims) {
        for ((a, &v), m) in acc.iter_mut().zip(row).zip(&means) {
            let d = v as f64 - m;
            *a += d * d;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

fn histogram(values: impl Iterator<Item = f32>, lo: f64, hi: f64) -> [f64; HIST_BINS] {
    let mut bins = [0.0f64; HIST_BINS];
    let width = hi - lo;
    let mut n = 0usize;
    for v in values {
        let b = if width > 0.0 {
            (((v as f64 - lo) / width * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
        } else {
            0
        };
        bins[b] += 1.0;
        n += 1;
    }
    let total = n.max(1) as f64 + HIST_EPS * HIST_BINS as f64;
    bins.iter_mut().for_each(|b| *b = (*b + HIST_EPS) / total);
    bins
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a / b).ln()).sum()
}

fn js(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Per-channel score under `metric`. Variance and cosine scores are lower
/// for better channels, KL and JS separability scores higher.
pub fn channel_scores(px: &ClassPixelSet, metric: Metric) -> Result<Vec<f64>> {
    if px.n_in() == 0 {
        return Err(Error::Validation(format!(
            "part {} has no in-class pixels",
            px.part
        )));
    }
    let d = px.dims;
    let scores = match metric {
        Metric::Variance => {
            let a = channel_pop_vars(&px.in_class, d);
            let b = channel_pop_vars(&px.out_class, d);
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
        Metric::Cosine => {
            // 1-D cosine distance of each in-class value to the channel mean
            let means = channel_means(&px.in_class, d);
            let mut acc = vec![0.0f64; d];
            for row in px.in_rows() {
                for ((a, &v), &m) in acc.iter_mut().zip(row).zip(&means) {
                    let denom = (v as f64).abs() * m.abs();
                    let cos = if denom > 0.0 {
                        v as f64 * m / denom
                    } else {
                        0.0
                    };
                    *a += 1.0 - cos;
                }
            }
            acc.iter().map(|a| a / px.n_in() as f64).collect()
        }
        Metric::Kl | Metric::Js => (0..d)
            .map(|j| {
                if px.n_out() == 0 {
                    return 0.0;
                }
                let column = |block: &[f32]| -> Vec<f32> {
                    block.chunks_exact(d).map(|row| row[j]).collect()
                };
                let a = column(&px.in_class);
                let b = column(&px.out_class);
                let (lo, hi) = a
                    .iter()
                    .chain(&b)
                    .fold((f64::MAX, f64::MIN), |(lo, hi), &v| {
                        (lo.min(v as f64), hi.max(v as f64))
                    });
                let p = histogram(a.into_iter(), lo, hi);
                let q = histogram(b.into_iter(), lo, hi);
                if metric == Metric::Kl {
                    kl(&p, &q)
                } else {
                    js(&p, &q)
                }
            })
            .collect(),
    };
    Ok(scores)
}

/// Indices of the `k` best channels, returned in ascending index order.
/// Equal scores resolve toward the lower channel index.
pub fn select_top_k(scores: &[f64], k: usize, direction: Direction) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Validation(format!(
            "k={k} outside [1, {}]",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match direction {
            Direction::Lowest => scores[a].total_cmp(&scores[b]),
            Direction::Highest => scores[b].total_cmp(&scores[a]),
        };
        by_score.then(a.cmp(&b))
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Candidate subset sizes: powers of two below `d`, then `d` itself.
pub fn default_k_grid(d: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = std::iter::successors(Some(1usize), |k| k.checked_mul(2))
        .take_while(|&k| k < d)
        .collect();
    if d > 0 {
        grid.push(d);
    }
    grid
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub candidates: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub k: usize,
    pub channels: Vec<usize>,
    /// Candidate sizes where a class center vanished and assignment fell back
    /// to Euclidean distance.
    pub euclidean_fallback: Vec<usize>,
}

impl SweepResult {
    pub fn accuracy(&self) -> f64 {
        let i = self.candidates.iter().position(|&k| k == self.k).unwrap();
        self.accuracies[i]
    }
}

fn gather(row: &[f32], channels: &[usize]) -> Vec<f64> {
    channels.iter().map(|&j| row[j] as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Self-clustering IoU of the in-context example on `channels`.
///
/// Returns the IoU and whether Euclidean fallback was needed.
pub fn clustering_iou(px: &ClassPixelSet, channels: &[usize]) -> (f64, bool) {
    let mean_of = |rows: &mut dyn Iterator<Item = &[f32]>, n: usize| -> Vec<f64> {
        let mut acc = vec![0.0f64; channels.len()];
        for row in rows {
            for (a, &j) in acc.iter_mut().zip(channels) {
                *a += row[j] as f64;
            }
        }
        acc.iter().map(|a| a / n.max(1) as f64).collect()
    };
    let center_in = mean_of(&mut px.in_rows(), px.n_in());
    if px.n_out() == 0 {
        return (1.0, false);
    }
    let center_out = mean_of(&mut px.out_rows(), px.n_out());
    let norm_in = dot(&center_in, &center_in).sqrt();
    let norm_out = dot(&center_out, &center_out).sqrt();
    let euclidean = norm_in == 0.0 || norm_out == 0.0;

    let assign_in = |row: &[f32]| -> bool {
        let v = gather(row, channels);
        if euclidean {
            sq_dist(&v, &center_in) <= sq_dist(&v, &center_out)
        } else {
            let nv = dot(&v, &v).sqrt();
            if nv == 0.0 {
                return true;
            }
            let cos_in = dot(&v, &center_in) / (nv * norm_in);
            let cos_out = dot(&v, &center_out) / (nv * norm_out);
            cos_in >= cos_out
        }
    };

    let tp = px.in_rows().filter(|r| assign_in(r)).count();
    let fp = px.out_rows().filter(|r| assign_in(r)).count();
    let fn_ = px.n_in() - tp;
    (tp as f64 / (tp + fp + fn_) as f64, euclidean)
}

/// Chooses the subset size with the best self-clustering IoU; ties go to the
/// smaller size.
pub fn sweep_k(px: &ClassPixelSet, k_grid: &[usize], metric: Metric) -> Result<SweepResult> {
    let mut candidates = k_grid.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(Error::Validation("k grid is empty".into()));
    }
    if let Some(&bad) = candidates.iter().find(|&&k| k == 0 || k > px.dims) {
        return Err(Error::Validation(format!(
            "k={bad} outside [1, {}]",
            px.dims
        )));
    }
    let scores = channel_scores(px, metric)?;

    let mut accuracies = Vec::with_capacity(candidates.len());
    let mut euclidean_fallback = Vec::new();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for &k in &candidates {
        let channels = select_top_k(&scores, k, metric.direction())?;
        let (iou, fallback) = clustering_iou(px, &channels);
        if fallback {
            log::debug!(
                "part {}: zero class center at k={k}, assigned by Euclidean distance",
                px.part
            );
            euclidean_fallback.push(k);
        }
        accuracies.push(iou);
        if best.as_ref().is_none_or(|(_, acc, _)| iou > *acc) {
            best = Some((k, iou, channels));
        }
    }
    let (k, _, channels) = best.expect("non-empty grid");
    Ok(SweepResult {
        candidates,
        accuracies,
        k,
        channels,
        euclidean_fallback,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub metric: Metric,
    /// Candidate subset sizes. Entries beyond a source's channel count are
    /// skipped for that source; `None` uses [`default_k_grid`].
    pub k_grid: Option<Vec<usize>>,
}

impl SelectionConfig {
    fn grid_for(&self, d: usize) -> Result<Vec<usize>> {
        match &self.k_grid {
            None => Ok(default_k_grid(d)),
            Some(grid) => {
                let usable: Vec<usize> = grid.iter().copied().filter(|&k| k <= d).collect();
                if usable.is_empty() {
                    Err(Error::Validation(format!(
                        "no k in {grid:?} fits a {d}-channel source"
                    )))
                } else {
                    Ok(usable)
                }
            }
        }
    }
}

/// Runs the K-sweep for every part and every source span of the in-context
/// example. `masks` must already be at feature resolution.
pub fn select_for_example(
    fused: &FusedFeature,
    masks: &PartMaskSet,
    config: &SelectionConfig,
) -> Result<SelectionRecord> {
    if (masks.height, masks.width) != (fused.map.height, fused.map.width) {
        return Err(Error::Shape(format!(
            "masks are {}x{} but features are {}x{}",
            masks.height, masks.width, fused.map.height, fused.map.width
        )));
    }
    let labels = masks.argmax();
    let mut counts = vec![0usize; masks.num_parts()];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!(
            "part '{}' has no pixels at feature resolution {}x{}",
            masks.names[c], masks.height, masks.width
        )));
    }

    let jobs: Vec<(usize, Span)> = (0..masks.num_parts())
        .flat_map(|c| fused.layout.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Result<SourceSelection>> = jobs
        .par_iter()
        .map(|&(c, span)| {
            let px = ClassPixelSet::from_span(fused, span, &labels, c);
            let sweep =
                sweep_k(&px, &config.grid_for(span.len)?, config.metric).map_err(|e| match e {
                    Error::Validation(m) => {
                        Error::Validation(format!("part '{}': {m}", masks.names[c]))
                    }
                    other => other,
                })?;
            Ok(SourceSelection {
                source: span.source,
                k: sweep.k,
                sweep_accuracy: sweep.accuracy(),
                channels: sweep.channels,
            })
        })
        .collect();

    let mut results = results.into_iter();
    let mut parts = Vec::with_capacity(masks.num_parts());
    for name in &masks.names {
        let per_source = (0..fused.layout.len())
            .map(|_| results.next().expect("one result per job"))
            .collect::<Result<Vec<_>>>()?;
        parts.push(PartSelection {
            name: name.clone(),
            per_source,
        });
    }
    Ok(SelectionRecord {
        metric: config.metric,
        parts,
    })
}
