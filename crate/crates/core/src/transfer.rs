//! Similarity-weighted label transfer from the in-context example to a query.
//!
//! For every part, both fused maps are restricted to that part's selected
//! channels; each query pixel then takes a softmax over the temperature-scaled
//! cosine similarities to *all* reference pixels, and its part score is the
//! weighted sum of the reference part mask.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{normalize_in_place, FusedFeature};
use crate::tensor_io::{
    check_finite, read_f32_array, read_u8_array, write_f32_array, write_u8_array, FeatureMap,
    PartMaskSet, SelectionRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Softmax temperature; smaller values approach nearest-neighbor transfer.
    pub beta: f64,
    pub use_selection: bool,
    /// Output `(height, width)` for [`finalize`].
    pub upsample_to: (usize, usize),
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            use_selection: true,
            upsample_to: (60, 60),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Per-part soft predictions, plane-major, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub height: usize,
    pub width: usize,
    pub names: Vec<String>,
    planes: Vec<f32>,
}

impl ScoreField {
    pub fn new(height: usize, width: usize, names: Vec<String>, planes: Vec<f32>) -> Result<Self> {
        if planes.len() != names.len() * height * width {
            return Err(Error::Shape(format!(
                "{} planes of {height}x{width} need {} values, got {}",
                names.len(),
                names.len() * height * width,
                planes.len()
            )));
        }
        check_finite(&planes)?;
        if let Some(i) = planes.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "score {} at flat index {i} is outside [0, 1]",
                planes[i]
            )));
        }
        Ok(Self {
            height,
            width,
            names,
            planes,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.names.len()
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.planes[c * n..(c + 1) * n]
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    /// Per-pixel argmax, ties toward the lower part index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.height * self.width;
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.num_parts() {
                    if self.planes[c * n + i] > self.planes[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            names: self.names.clone(),
            labels,
        }
    }

    /// Writes a `(C, H, W)` float array.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_f32_array(
            path,
            &[self.num_parts(), self.height, self.width],
            &self.planes,
        )
    }

    pub fn read(path: &Path, names: Vec<String>) -> Result<Self> {
        let (shape, data) = read_f32_array(path)?;
        let [c, h, w] = shape[..] else {
            return Err(Error::Shape(format!(
                "{}: score field must be rank 3 (C, H, W), found {shape:?}",
                path.display()
            )));
        };
        if c != names.len() {
            return Err(Error::Shape(format!(
                "{}: {c} planes but {} part names",
                path.display(),
                names.len()
            )));
        }
        Self::new(h, w, names, data).map_err(|e| e.at_path(path))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub names: Vec<String>,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, names: Vec<String>, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} label map needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= names.len()) {
            return Err(Error::Validation(format!(
                "label {} at flat index {i} is out of range for {} parts",
                labels[i],
                names.len()
            )));
        }
        Ok(Self {
            height,
            width,
            names,
            labels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_u8_array(path, &[self.height, self.width], &self.labels)
    }

    pub fn read(path: &Path, names: Vec<String>) -> Result<Self> {
        let (shape, labels) = read_u8_array(path)?;
        let [h, w] = shape[..] else {
            return Err(Error::Shape(format!(
                "{}: label map must be rank 2, found {shape:?}",
                path.display()
            )));
        };
        Self::new(h, w, names, labels).map_err(|e| e.at_path(path))
    }
}

/// Row-normalized copies of pixel vectors; zero rows stay zero so their
/// cosine with anything is 0.
struct UnitRows {
    dims: usize,
    data: Vec<f32>,
}

impl UnitRows {
    fn gather(map: &FeatureMap, channels: &[usize]) -> Self {
        let dims = channels.len();
        let mut data = Vec::with_capacity(map.num_pixels() * dims);
        for i in 0..map.num_pixels() {
            let px = map.pixel(i);
            data.extend(channels.iter().map(|&j| px[j]));
        }
        if dims > 0 {
            data.par_chunks_mut(dims).for_each(normalize_in_place);
        }
        Self { dims, data }
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }
}

/// Fixed-order dot product with eight interleaved accumulators.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Softmax over scaled cosines of one query row against every reference row.
fn weight_row(query: &[f32], refs: &UnitRows, inv_beta: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, o) in out.iter_mut().enumerate() {
        let s = dot(query, refs.row(j)) as f64 * inv_beta;
        *o = s;
        max = max.max(s);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Dense softmax weights, one row per query pixel over all reference pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRows {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl WeightRows {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Materializes every weight row. Meant for inspection and small inputs;
/// [`segment`] streams rows instead.
pub fn similarity_weights(
    query: &FeatureMap,
    reference: &FeatureMap,
    beta: f64,
) -> Result<WeightRows> {
    if query.channels != reference.channels {
        return Err(Error::Shape(format!(
            "query has {} channels, reference {}",
            query.channels, reference.channels
        )));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Validation(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let all: Vec<usize> = (0..query.channels).collect();
    let q = UnitRows::gather(query, &all);
    let r = UnitRows::gather(reference, &all);
    let cols = reference.num_pixels();
    let mut data = vec![0.0f64; query.num_pixels() * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
            weight_row(q.row(i), &r, 1.0 / beta, out);
        });
    }
    Ok(WeightRows {
        rows: query.num_pixels(),
        cols,
        data,
    })
}

fn combine(weights: &[f64], mask: &[f32]) -> f32 {
    let v: f64 = weights.iter().zip(mask).map(|(&a, &m)| a * m as f64).sum();
    v.clamp(0.0, 1.0) as f32
}

/// Weighted combination of one reference part plane per query row.
pub fn transfer_class(weights: &WeightRows, mask: &[f32]) -> Result<Vec<f32>> {
    if mask.len() != weights.cols {
        return Err(Error::Shape(format!(
            "mask has {} pixels, weights span {}",
            mask.len(),
            weights.cols
        )));
    }
    Ok((0..weights.rows)
        .map(|i| combine(weights.row(i), mask))
        .collect())
}

/// Fused-channel indices each part uses, in layout order.
fn part_channels(
    fused: &FusedFeature,
    masks: &PartMaskSet,
    selection: &SelectionRecord,
    use_selection: bool,
) -> Result<Vec<Vec<usize>>> {
    if !use_selection {
        let all: Vec<usize> = (0..fused.map.channels).collect();
        return Ok(vec![all; masks.num_parts()]);
    }
    selection.validate_against(&masks.names, &fused.layout)?;
    Ok(selection
        .parts
        .iter()
        .map(|part| {
            fused
                .layout
                .iter()
                .flat_map(|span| {
                    let sel = part
                        .per_source
                        .iter()
                        .find(|s| s.source == span.source)
                        .expect("validated");
                    sel.channels.iter().map(move |&c| span.offset + c)
                })
                .collect()
        })
        .collect())
}

/// Scores every query pixel for every part at feature resolution.
///
/// `selection` is ignored when `config.use_selection` is false.
pub fn segment(
    query: &FusedFeature,
    reference: &FusedFeature,
    masks: &PartMaskSet,
    selection: &SelectionRecord,
    config: &TransferConfig,
) -> Result<ScoreField> {
    config.validate()?;
    if query.layout != reference.layout {
        return Err(Error::Shape(
            "query and reference channel layouts differ".into(),
        ));
    }
    if (masks.height, masks.width) != (reference.map.height, reference.map.width) {
        return Err(Error::Shape(format!(
            "masks are {}x{} but reference features are {}x{}",
            masks.height, masks.width, reference.map.height, reference.map.width
        )));
    }
    let channels = part_channels(reference, masks, selection, config.use_selection)?;

    // parts sharing a channel set share their weight rows
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (c, ch) in channels.iter().enumerate() {
        groups.entry(ch.as_slice()).or_default().push(c);
    }

    let n_q = query.map.num_pixels();
    let n_r = reference.map.num_pixels();
    let inv_beta = 1.0 / config.beta;
    let mut planes = vec![0.0f32; masks.num_parts() * n_q];
    for (ch, parts) in groups {
        let q = UnitRows::gather(&query.map, ch);
        let r = UnitRows::gather(&reference.map, ch);
        let mut values = vec![0.0f32; n_q * parts.len()];
        values
            .par_chunks_mut(parts.len())
            .enumerate()
            .for_each_init(
                || vec![0.0f64; n_r],
                |buf, (i, out)| {
                    weight_row(q.row(i), &r, inv_beta, buf);
                    for (o, &c) in out.iter_mut().zip(&parts) {
                        *o = combine(buf, masks.plane(c));
                    }
                },
            );
        for (slot, &c) in parts.iter().enumerate() {
            let plane = &mut planes[c * n_q..(c + 1) * n_q];
            for (i, p) in plane.iter_mut().enumerate() {
                *p = values[i * parts.len() + slot];
            }
        }
    }
    ScoreField::new(
        query.map.height,
        query.map.width,
        masks.names.clone(),
        planes,
    )
}

/// Per-axis source taps with half-pixel centers and edge clamping.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(
    plane: &[f32],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let ty = bilinear_taps(height, out_h);
    let tx = bilinear_taps(width, out_w);
    let at = |y: usize, x: usize| plane[y * width + x] as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
            let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
            out.push(((1.0 - fy) * top + fy * bottom) as f32);
        }
    }
    out
}

/// Upsamples every plane to `upsample_to` and takes the per-pixel argmax.
pub fn finalize(scores: &ScoreField, config: &TransferConfig) -> Result<(LabelMap, ScoreField)> {
    let (out_h, out_w) = config.upsample_to;
    if out_h < scores.height || out_w < scores.width {
        return Err(Error::Validation(format!(
            "upsample target {out_h}x{out_w} is smaller than scores {}x{}",
            scores.height, scores.width
        )));
    }
    let planes: Vec<Vec<f32>> = (0..scores.num_parts())
        .into_par_iter()
        .map(|c| upsample_bilinear(scores.plane(c), scores.height, scores.width, out_h, out_w))
        .collect();
    let up = ScoreField::new(out_h, out_w, scores.names.clone(), planes.concat())?;
    Ok((up.argmax(), up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::Source;
    use proptest::prelude::*;

    fn fmap(n: usize, d: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(1, n, d, Source::Fused, data).unwrap()
    }

    #[test]
    fn equal_cosines_split_evenly() {
        let q = fmap(1, 2, vec![1.0, 1.0]);
        let r = fmap(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        for beta in [0.01, 1.0, 7.0] {
            let w = similarity_weights(&q, &r, beta).unwrap();
            assert!((w.row(0)[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_temperature_softmax() {
        let q = fmap(1, 2, vec![1.0, 0.0]);
        let r = fmap(2, 2, vec![2.0, 0.0, 0.0, 3.0]);
        let w = similarity_weights(&q, &r, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((w.row(0)[0] - e / (e + 1.0)).abs() < 1e-7);
        assert!((w.row(0)[1] - 1.0 / (e + 1.0)).abs() < 1e-7);
    }

    #[test]
    fn cold_limit_is_nearest_neighbor() {
        let q = fmap(1, 2, vec![1.0, 0.0]);
        let r = fmap(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let w = similarity_weights(&q, &r, 1e-3).unwrap();
        assert!(w.row(0)[0] > 1.0 - 1e-12);
    }

    #[test]
    fn zero_vectors_have_zero_cosine() {
        let q = fmap(1, 2, vec![0.0, 0.0]);
        let r = fmap(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let w = similarity_weights(&q, &r, 0.1).unwrap();
        assert_eq!(w.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn channel_mismatch() {
        let q = fmap(1, 2, vec![1.0, 0.0]);
        let r = fmap(1, 3, vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            similarity_weights(&q, &r, 0.1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn transfer_is_a_convex_combination() {
        let w = WeightRows {
            rows: 1,
            cols: 2,
            data: vec![0.25, 0.75],
        };
        assert_eq!(transfer_class(&w, &[1.0, 0.0]).unwrap(), vec![0.25]);
        assert_eq!(transfer_class(&w, &[1.0, 1.0]).unwrap(), vec![1.0]);
        assert_eq!(transfer_class(&w, &[0.0, 0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn upsample_one_by_two() {
        let out = upsample_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_constant() {
        let out = upsample_bilinear(&[0.3; 6], 2, 3, 7, 11);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn equal_planes_resolve_to_part_zero() {
        let s = ScoreField::new(2, 2, vec!["a".into(), "b".into()], vec![0.5; 8]).unwrap();
        let cfg = TransferConfig {
            upsample_to: (4, 4),
            ..Default::default()
        };
        let (labels, _) = finalize(&s, &cfg).unwrap();
        assert!(labels.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn rejects_non_positive_beta() {
        let cfg = TransferConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn rows_are_distributions(
            q in prop::collection::vec(-1.0f32..1.0, 5 * 3),
            r in prop::collection::vec(-1.0f32..1.0, 7 * 3),
            beta in 0.001f64..10.0,
        ) {
            let w = similarity_weights(&fmap(5, 3, q), &fmap(7, 3, r), beta).unwrap();
            for i in 0..w.rows {
                let row = w.row(i);
                prop_assert!(row.iter().all(|&a| a >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
