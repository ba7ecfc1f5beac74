//! Seeded synthetic fixtures with known ground truth.
//!
//! Every part gets a unit prototype vector over the informative channels of
//! each source; pixel features are the prototype of their part plus Gaussian
//! noise, and distractor channels carry pure noise in both images. The query
//! layout is a circular shift of the reference layout, so its ground truth is
//! known exactly.
//!
//! A separation of exactly 90 degrees yields orthogonal prototypes on disjoint
//! channel groups. Any other separation draws dense random unit directions and
//! keeps each one only if it is at least that far from every earlier one.
//!
//! Randomness comes from `ChaCha8Rng` seeded with `seed`, one stream per
//! purpose (see [`Stream`]), so fixtures are reproducible bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{FeatureMap, ImageRgb, PartMaskSet, Source};

pub const GENERATOR: &str = "rand_chacha::ChaCha8Rng (seed_from_u64, set_stream per purpose)";

/// Guide colors, one per part index modulo the palette length.
pub const GUIDE_PALETTE: [[u8; 3]; 10] = [
    [16, 16, 16],
    [230, 40, 40],
    [40, 200, 60],
    [50, 70, 230],
    [240, 220, 40],
    [220, 60, 220],
    [40, 220, 230],
    [245, 140, 30],
    [130, 60, 20],
    [250, 250, 250],
];

/// RNG stream identifiers.
#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Layout = 0,
    QueryShift = 1,
    Prototypes = 2,
    Distractors = 4,
    RefFeatures = 6,
    QueryFeatures = 8,
}

impl Stream {
    /// Per-source streams occupy two consecutive ids.
    fn id(self, source: Source) -> u64 {
        let base = self as u64;
        match source {
            Source::Sd => base,
            _ => base + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Stripes,
    Rectangles,
    Voronoi,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Stripes => "stripes",
            Layout::Rectangles => "rectangles",
            Layout::Voronoi => "voronoi",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Layout::Stripes),
            "rectangles" => Ok(Layout::Rectangles),
            "voronoi" => Ok(Layout::Voronoi),
            other => Err(Error::Validation(format!("unknown layout '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Feature-grid height.
    pub height: usize,
    /// Feature-grid width.
    pub width: usize,
    pub dims_sd: usize,
    pub dims_dino: usize,
    /// Number of classes including background.
    pub num_parts: usize,
    pub layout: Layout,
    /// Minimum pairwise angle between prototypes, degrees.
    pub prototype_separation: f64,
    pub noise_sigma: f64,
    /// Distractor channels per source.
    pub distractor_channels: usize,
    /// Standard deviation of distractor channels.
    pub distractor_sigma: f64,
    /// Image pixels per feature cell along each axis.
    pub image_scale: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 60,
            width: 60,
            dims_sd: 64,
            dims_dino: 64,
            num_parts: 4,
            layout: Layout::Rectangles,
            prototype_separation: 90.0,
            noise_sigma: 0.0,
            distractor_channels: 0,
            distractor_sigma: 1.0,
            image_scale: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.num_parts < 2 {
            return fail(format!(
                "num_parts must be at least 2, got {}",
                self.num_parts
            ));
        }
        if self.num_parts > 256 {
            return fail(format!("num_parts {} exceeds 256", self.num_parts));
        }
        if self.height == 0 || self.width == 0 || self.image_scale == 0 {
            return fail("grid dimensions and image scale must be positive".into());
        }
        for (name, d) in [("sd", self.dims_sd), ("dino", self.dims_dino)] {
            if self.distractor_channels >= d {
                return fail(format!(
                    "distractor_channels {} must be below the {name} channel count {d}",
                    self.distractor_channels
                ));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.distractor_sigma >= 0.0) {
            return fail("noise levels must be non-negative".into());
        }
        if !(0.0..=180.0).contains(&self.prototype_separation) {
            return fail(format!(
                "prototype_separation {} is not an angle in [0, 180] degrees",
                self.prototype_separation
            ));
        }
        if self.num_parts > self.height * self.width {
            return fail(format!(
                "{} parts cannot all fit on a {}x{} grid",
                self.num_parts, self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn part_names(&self) -> Vec<String> {
        std::iter::once("BG".to_string())
            .chain((1..self.num_parts).map(|c| format!("part{c}")))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthFixture {
    pub spec: SynthSpec,
    pub names: Vec<String>,
    pub ref_sd: FeatureMap,
    pub ref_dino: FeatureMap,
    pub query_sd: FeatureMap,
    pub query_dino: FeatureMap,
    /// Reference labels at image resolution.
    pub ref_labels: Vec<u8>,
    /// Query ground truth at image resolution.
    pub query_labels: Vec<u8>,
    /// Query ground truth at feature resolution.
    pub query_labels_feat: Vec<u8>,
    pub ref_image: ImageRgb,
    pub query_image: ImageRgb,
    /// Informative channel indices per source (sd, dino).
    pub informative: [Vec<usize>; 2],
}

impl SynthFixture {
    pub fn image_height(&self) -> usize {
        self.spec.height * self.spec.image_scale
    }

    pub fn image_width(&self) -> usize {
        self.spec.width * self.spec.image_scale
    }

    pub fn ref_masks(&self) -> PartMaskSet {
        PartMaskSet::from_labels(
            self.image_height(),
            self.image_width(),
            &self.ref_labels,
            self.names.clone(),
        )
        .expect("generated labels are in range")
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn layout_labels(spec: &SynthSpec) -> Vec<u8> {
    let (h, w, c) = (spec.height, spec.width, spec.num_parts);
    match spec.layout {
        Layout::Stripes => {
            // vertical stripes if they fit, otherwise a row-major sweep
            (0..h * w)
                .map(|i| {
                    if c <= w {
                        (i % w * c / w) as u8
                    } else {
                        (i * c / (h * w)) as u8
                    }
                })
                .collect()
        }
        Layout::Rectangles => {
            let rows = ((c as f64).sqrt().ceil() as usize).min(h);
            let cols = c.div_ceil(rows).min(w);
            let rows = c.div_ceil(cols).min(h);
            if rows * cols < c {
                // grid too small for rectangles; fall back to a sweep
                return (0..h * w).map(|i| (i * c / (h * w)) as u8).collect();
            }
            (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    let cell = (y * rows / h) * cols + x * cols / w;
                    // surplus cells reuse part indices without dropping any part
                    (cell % c) as u8
                })
                .collect()
        }
        Layout::Voronoi => {
            let mut r = rng(spec.seed, Stream::Layout as u64);
            let seeds: Vec<(usize, usize)> = sample(&mut r, h * w, c)
                .into_iter()
                .map(|i| (i / w, i % w))
                .collect();
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as i64, (i % w) as i64);
                    let mut best = (i64::MAX, 0usize);
                    for (k, &(sy, sx)) in seeds.iter().enumerate() {
                        let d = (y - sy as i64).pow(2) + (x - sx as i64).pow(2);
                        if d < best.0 {
                            best = (d, k);
                        }
                    }
                    best.1 as u8
                })
                .collect()
        }
    }
}

fn shift_labels(labels: &[u8], h: usize, w: usize, dy: usize, dx: usize) -> Vec<u8> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            labels[((y + h - dy) % h) * w + (x + w - dx) % w]
        })
        .collect()
}

fn upscale(labels: &[u8], h: usize, w: usize, s: usize) -> Vec<u8> {
    let big_w = w * s;
    (0..h * s * big_w)
        .map(|i| labels[(i / big_w / s) * w + (i % big_w) / s])
        .collect()
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d.clamp(-1.0, 1.0).acos().to_degrees()
}

fn prototypes(spec: &SynthSpec, n_inf: usize, source: Source) -> Result<Vec<Vec<f64>>> {
    let c = spec.num_parts;
    let sep = spec.prototype_separation;
    if sep == 90.0 {
        if c > n_inf {
            return Err(Error::Validation(format!(
                "{c} orthogonal prototypes need at least {c} informative channels, have {n_inf}"
            )));
        }
        // disjoint supports: channel i belongs to part i mod c
        return Ok((0..c)
            .map(|p| {
                let members = (p..n_inf).step_by(c).count() as f64;
                (0..n_inf)
                    .map(|i| {
                        if i % c == p {
                            1.0 / members.sqrt()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect());
    }
    // simplex bound on the largest achievable minimum pairwise angle
    let bound = (-1.0 / (c as f64 - 1.0)).acos().to_degrees();
    if sep > bound + 1e-9 || (sep > 90.0 && c > n_inf + 1) {
        return Err(Error::Validation(format!(
            "{c} prototypes in {n_inf} informative dimensions cannot be {sep} degrees apart"
        )));
    }
    let mut r = rng(spec.seed, Stream::Prototypes.id(source));
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0;
    while out.len() < c {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Validation(format!(
                "could not place {c} prototypes {sep} degrees apart in {n_inf} dimensions"
            )));
        }
        let mut v: Vec<f64> = (0..n_inf).map(|_| r.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        if out.iter().all(|p| angle_deg(p, &v) >= sep) {
            out.push(v);
        }
    }
    Ok(out)
}

struct SourcePlan {
    source: Source,
    dims: usize,
    informative: Vec<usize>,
    protos: Vec<Vec<f64>>,
}

fn plan(spec: &SynthSpec, source: Source, dims: usize) -> Result<SourcePlan> {
    let mut r = rng(spec.seed, Stream::Distractors.id(source));
    let mut is_distractor = vec![false; dims];
    for i in sample(&mut r, dims, spec.distractor_channels) {
        is_distractor[i] = true;
    }
    let informative: Vec<usize> = (0..dims).filter(|&i| !is_distractor[i]).collect();
    let protos = prototypes(spec, informative.len(), source)?;
    Ok(SourcePlan {
        source,
        dims,
        informative,
        protos,
    })
}

fn features(spec: &SynthSpec, plan: &SourcePlan, labels: &[u8], stream: Stream) -> FeatureMap {
    let mut r = rng(spec.seed, stream.id(plan.source));
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let distractor = Normal::new(0.0, spec.distractor_sigma).expect("validated sigma");
    let mut slot = vec![usize::MAX; plan.dims];
    for (k, &ch) in plan.informative.iter().enumerate() {
        slot[ch] = k;
    }
    let mut data = Vec::with_capacity(labels.len() * plan.dims);
    for &label in labels {
        let proto = &plan.protos[label as usize];
        for &k in &slot {
            let v = if k == usize::MAX {
                distractor.sample(&mut r)
            } else {
                proto[k] + noise.sample(&mut r)
            };
            data.push(v as f32);
        }
    }
    FeatureMap::new(spec.height, spec.width, plan.dims, plan.source, data)
        .expect("generated features are finite")
}

fn paint(labels: &[u8], h: usize, w: usize) -> ImageRgb {
    let data = labels
        .iter()
        .flat_map(|&l| GUIDE_PALETTE[l as usize % GUIDE_PALETTE.len()])
        .collect();
    ImageRgb::new(h, w, data).expect("sized from labels")
}

/// Generates a complete fixture; a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthFixture> {
    spec.validate()?;
    let (h, w, s) = (spec.height, spec.width, spec.image_scale);

    let ref_feat = layout_labels(spec);
    let mut shift = rng(spec.seed, Stream::QueryShift as u64);
    let dy = shift.random_range(0..h);
    let dx = shift.random_range(0..w);
    let query_feat = shift_labels(&ref_feat, h, w, dy, dx);

    let sd = plan(spec, Source::Sd, spec.dims_sd)?;
    let dino = plan(spec, Source::Dino, spec.dims_dino)?;

    let ref_labels = upscale(&ref_feat, h, w, s);
    let query_labels = upscale(&query_feat, h, w, s);
    Ok(SynthFixture {
        spec: spec.clone(),
        names: spec.part_names(),
        ref_sd: features(spec, &sd, &ref_feat, Stream::RefFeatures),
        ref_dino: features(spec, &dino, &ref_feat, Stream::RefFeatures),
        query_sd: features(spec, &sd, &query_feat, Stream::QueryFeatures),
        query_dino: features(spec, &dino, &query_feat, Stream::QueryFeatures),
        ref_image: paint(&ref_labels, h * s, w * s),
        query_image: paint(&query_labels, h * s, w * s),
        ref_labels,
        query_labels,
        query_labels_feat: query_feat,
        informative: [sd.informative, dino.informative],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{channel_scores, ClassPixelSet, Metric};

    fn small(layout: Layout) -> SynthSpec {
        SynthSpec {
            seed: 7,
            height: 12,
            width: 10,
            dims_sd: 16,
            dims_dino: 12,
            num_parts: 5,
            layout,
            noise_sigma: 0.05,
            distractor_channels: 4,
            image_scale: 2,
            ..Default::default()
        }
    }

    #[test]
    fn every_layout_uses_every_part() {
        for layout in [Layout::Stripes, Layout::Rectangles, Layout::Voronoi] {
            let f = generate(&small(layout)).unwrap();
            for labels in [&f.ref_labels, &f.query_labels, &f.query_labels_feat] {
                for c in 0..5u8 {
                    assert!(labels.contains(&c), "{layout}: part {c} missing");
                }
            }
            assert_eq!(f.ref_image.height, 24);
        }
    }

    #[test]
    fn same_seed_same_fixture() {
        let a = generate(&small(Layout::Voronoi)).unwrap();
        let b = generate(&small(Layout::Voronoi)).unwrap();
        assert_eq!(a.ref_sd, b.ref_sd);
        assert_eq!(a.query_dino, b.query_dino);
        assert_eq!(a.query_labels, b.query_labels);
        assert_eq!(a.ref_image, b.ref_image);
        let c = generate(&SynthSpec {
            seed: 8,
            ..small(Layout::Voronoi)
        })
        .unwrap();
        assert_ne!(a.ref_sd, c.ref_sd);
    }

    #[test]
    fn infeasible_separation_is_rejected() {
        let spec = SynthSpec {
            num_parts: 4,
            prototype_separation: 130.0,
            ..small(Layout::Stripes)
        };
        assert!(matches!(generate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn obtuse_prototypes_when_feasible() {
        let spec = SynthSpec {
            num_parts: 3,
            prototype_separation: 100.0,
            ..small(Layout::Stripes)
        };
        generate(&spec).unwrap();
    }

    #[test]
    fn dense_prototypes_respect_the_minimum_angle() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            distractor_channels: 0,
            prototype_separation: 70.0,
            ..small(Layout::Rectangles)
        };
        let f = generate(&spec).unwrap();
        let first: Vec<usize> = (0..spec.num_parts as u8)
            .map(|c| f.ref_labels.iter().position(|&l| l == c).unwrap())
            .collect();
        let w = f.image_width();
        let feat = |i: usize| -> Vec<f64> {
            let cell = (i / w / spec.image_scale) * spec.width + (i % w) / spec.image_scale;
            f.ref_sd.pixel(cell).iter().map(|&v| v as f64).collect()
        };
        for a in 0..first.len() {
            for b in a + 1..first.len() {
                let (u, v) = (feat(first[a]), feat(first[b]));
                let norm = |x: &[f64]| x.iter().map(|t| t * t).sum::<f64>().sqrt();
                let dense = u.iter().filter(|&&t| t != 0.0).count();
                assert!(dense > spec.dims_sd / 2, "prototype should be dense");
                let cos = u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() / (norm(&u) * norm(&v));
                assert!(cos.acos().to_degrees() >= 70.0 - 1e-3);
            }
        }
    }

    #[test]
    fn too_many_distractors() {
        let spec = SynthSpec {
            distractor_channels: 12,
            ..small(Layout::Stripes)
        };
        assert!(matches!(generate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn distractors_score_above_informative_channels() {
        for noise in [0.0, 0.02, 0.05] {
            let spec = SynthSpec {
                noise_sigma: noise,
                image_scale: 1,
                ..small(Layout::Rectangles)
            };
            let f = generate(&spec).unwrap();
            for (map, informative) in [
                (&f.ref_sd, &f.informative[0]),
                (&f.ref_dino, &f.informative[1]),
            ] {
                for c in 0..spec.num_parts {
                    let mut ins = Vec::new();
                    let mut outs = Vec::new();
                    for (i, &l) in f.ref_labels.iter().enumerate() {
                        if l as usize == c {
                            ins.extend_from_slice(map.pixel(i));
                        } else {
                            outs.extend_from_slice(map.pixel(i));
                        }
                    }
                    let px = ClassPixelSet::new(c, map.channels, ins, outs).unwrap();
                    let s = channel_scores(&px, Metric::Variance).unwrap();
                    let worst_informative =
                        informative.iter().map(|&j| s[j]).fold(f64::MIN, f64::max);
                    let best_distractor = (0..map.channels)
                        .filter(|j| !informative.contains(j))
                        .map(|j| s[j])
                        .fold(f64::MAX, f64::min);
                    assert!(
                        best_distractor > worst_informative,
                        "noise {noise} part {c}: {best_distractor} <= {worst_informative}"
                    );
                }
            }
        }
    }
}
