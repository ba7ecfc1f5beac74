//! Per-part mask sets: one-hot expansion of label maps and area-averaged
//! downsampling to feature resolution.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

use super::{read_json, read_u8_array};

/// `C` per-part planes over an `height x width` grid, plane-major.
///
/// At full resolution the planes are one-hot; after [`PartMaskSet::downsample`]
/// they are soft but still sum to one per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMaskSet {
    pub height: usize,
    pub width: usize,
    pub names: Vec<String>,
    planes: Vec<f32>,
}

pub(crate) fn validate_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Validation("part name list is empty".into()));
    }
    if names.len() > 256 {
        return Err(Error::Validation(format!(
            "{} parts exceed the 256 representable by 8-bit label maps",
            names.len()
        )));
    }
    let mut seen = HashSet::new();
    for name in names {
        if name.is_empty() {
            return Err(Error::Validation("part names must be non-empty".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Validation(format!("duplicate part name '{name}'")));
        }
    }
    Ok(())
}

impl PartMaskSet {
    /// One-hot expansion of a label map. Class 0 is background by convention.
    pub fn from_labels(
        height: usize,
        width: usize,
        labels: &[u8],
        names: Vec<String>,
    ) -> Result<Self> {
        validate_names(&names)?;
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map of {} entries does not match {height}x{width}",
                labels.len()
            )));
        }
        let n = height * width;
        let mut planes = vec![0.0f32; names.len() * n];
        for (i, &label) in labels.iter().enumerate() {
            let c = label as usize;
            if c >= names.len() {
                return Err(Error::Validation(format!(
                    "label {c} at flat index {i} is out of range for {} parts",
                    names.len()
                )));
            }
            planes[c * n + i] = 1.0;
        }
        Ok(Self {
            height,
            width,
            names,
            planes,
        })
    }

    /// Builds a mask set from explicit planes (plane-major, `C * height * width`).
    pub fn from_planes(
        height: usize,
        width: usize,
        names: Vec<String>,
        planes: Vec<f32>,
    ) -> Result<Self> {
        validate_names(&names)?;
        if planes.len() != names.len() * height * width {
            return Err(Error::Shape(format!(
                "{} planes of {height}x{width} need {} values, got {}",
                names.len(),
                names.len() * height * width,
                planes.len()
            )));
        }
        if let Some(i) = planes.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "mask value {} at flat index {i} is outside [0, 1]",
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

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.num_pixels();
        &self.planes[c * n..(c + 1) * n]
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    /// Per-pixel argmax over parts; ties go to the lower part index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.num_pixels();
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.num_parts() {
                    if self.planes[c * n + i] > self.planes[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Parts whose largest soft value never reaches 0.5.
    pub fn thin_parts(&self) -> Vec<usize> {
        (0..self.num_parts())
            .filter(|&c| self.plane(c).iter().all(|&v| v < 0.5))
            .collect()
    }

    /// Area-averages every plane into a `height x width` grid. Output cells
    /// weight each covered input cell by its fractional overlap.
    pub fn downsample(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "downsample target {height}x{width} has a zero dimension"
            )));
        }
        if height > self.height || width > self.width {
            return Err(Error::Validation(format!(
                "downsample target {height}x{width} exceeds source {}x{}",
                self.height, self.width
            )));
        }
        let rows = coverage(self.height, height);
        let cols = coverage(self.width, width);
        let area = (self.height as f64 / height as f64) * (self.width as f64 / width as f64);
        let n_in = self.num_pixels();

        let mut planes = Vec::with_capacity(self.num_parts() * height * width);
        let mut tmp = vec![0.0f64; height * self.width];
        for c in 0..self.num_parts() {
            let src = &self.planes[c * n_in..(c + 1) * n_in];
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for (oy, taps) in rows.iter().enumerate() {
                let acc = &mut tmp[oy * self.width..(oy + 1) * self.width];
                for &(iy, w) in taps {
                    let row = &src[iy * self.width..(iy + 1) * self.width];
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += w * v as f64;
                    }
                }
            }
            for oy in 0..height {
                let acc = &tmp[oy * self.width..(oy + 1) * self.width];
                for taps in &cols {
                    let sum: f64 = taps.iter().map(|&(ix, w)| w * acc[ix]).sum();
                    planes.push((sum / area) as f32);
                }
            }
        }

        let out = Self {
            height,
            width,
            names: self.names.clone(),
            planes,
        };
        for c in out.thin_parts() {
            log::warn!(
                "part '{}' never exceeds 0.5 coverage at {height}x{width}; it is eroded at feature resolution",
                out.names[c]
            );
        }
        Ok(out)
    }
}

/// For each output cell along one axis, the input cells it covers and the
/// overlap length of each.
fn coverage(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let step = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let lo = o as f64 * step;
            let hi = if o + 1 == output {
                input as f64
            } else {
                (o + 1) as f64 * step
            };
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(input);
            (first..last)
                .filter_map(|i| {
                    let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// Reads a rank-2 `u8` label map plus a JSON array of part names.
pub fn load_mask_set(label_path: &Path, names_path: &Path) -> Result<PartMaskSet> {
    let (shape, labels) = read_u8_array(label_path)?;
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "{}: label map must be rank 2, found shape {shape:?}",
            label_path.display()
        )));
    }
    let names: Vec<String> = read_json(names_path)?;
    PartMaskSet::from_labels(shape[0], shape[1], &labels, names).map_err(|e| e.at_path(label_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn one_hot_expansion() {
        let m = PartMaskSet::from_labels(2, 2, &[0, 1, 1, 0], vec!["BG".into(), "head".into()])
            .unwrap();
        assert_eq!(m.plane(1), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(m.plane(0), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn out_of_range_label() {
        let err = PartMaskSet::from_labels(1, 2, &[0, 5], names(2)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn duplicate_and_empty_names() {
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(
            PartMaskSet::from_labels(1, 1, &[0], dup),
            Err(Error::Validation(_))
        ));
        let empty = vec!["a".to_string(), String::new()];
        assert!(matches!(
            PartMaskSet::from_labels(1, 1, &[0], empty),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn ten_face_parts() {
        let face: Vec<String> = [
            "BG", "cloth", "ear", "eye", "eyebrow", "skin", "hair", "mouth", "neck", "nose",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let m = PartMaskSet::from_labels(1, 10, &(0..10).collect::<Vec<u8>>(), face).unwrap();
        assert_eq!(m.num_parts(), 10);
    }

    #[test]
    fn half_covered_cell() {
        let m = PartMaskSet::from_labels(2, 2, &[1, 1, 0, 0], names(2)).unwrap();
        let d = m.downsample(1, 1).unwrap();
        assert_eq!(d.plane(1), &[0.5]);
        assert_eq!(d.plane(0), &[0.5]);
    }

    #[test]
    fn fractional_coverage() {
        // 3 columns into 2: cell 0 covers [0, 1.5), cell 1 covers [1.5, 3)
        let m = PartMaskSet::from_labels(1, 3, &[1, 0, 0], names(2)).unwrap();
        let d = m.downsample(1, 2).unwrap();
        let expect = [1.0 / 1.5, 0.0];
        for (a, b) in d.plane(1).iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_plane_is_preserved() {
        let m = PartMaskSet::from_labels(7, 5, &[0; 35], names(1)).unwrap();
        for (h, w) in [(1, 1), (3, 2), (7, 5), (4, 4)] {
            let d = m.downsample(h, w).unwrap();
            assert!(
                d.plane(0).iter().all(|&v| (v - 1.0).abs() < 1e-6),
                "{h}x{w}"
            );
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        let m = PartMaskSet::from_labels(2, 2, &[0; 4], names(1)).unwrap();
        assert!(matches!(m.downsample(0, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn thin_part_is_flagged() {
        // a single-column part in a 6x6 image covers a third of each 2x2 cell
        let mut labels = [0u8; 36];
        for y in 0..6 {
            labels[y * 6 + 1] = 1;
        }
        let m = PartMaskSet::from_labels(6, 6, &labels, names(2)).unwrap();
        let d = m.downsample(2, 2).unwrap();
        assert_eq!(d.thin_parts(), vec![1]);
    }

    proptest! {
        #[test]
        fn downsample_keeps_partition_of_unity(
            (h, w, labels) in (1usize..12, 1usize..12)
                .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0u8..4, h * w))),
            th in 1usize..12,
            tw in 1usize..12,
        ) {
            let m = PartMaskSet::from_labels(h, w, &labels, names(4)).unwrap();
            let (th, tw) = (th.min(h), tw.min(w));
            let d = m.downsample(th, tw).unwrap();
            for i in 0..th * tw {
                let s: f64 = (0..4).map(|c| d.plane(c)[i] as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn exact_divisor_preserves_mean(
            (fh, fw, h, w) in (1usize..5, 1usize..5, 1usize..6, 1usize..6),
            seed in any::<u64>(),
        ) {
            let (big_h, big_w) = (fh * h, fw * w);
            let labels: Vec<u8> = (0..big_h * big_w)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) >> 7) as u8 % 3)
                .collect();
            let m = PartMaskSet::from_labels(big_h, big_w, &labels, names(3)).unwrap();
            let d = m.downsample(h, w).unwrap();
            for c in 0..3 {
                let before: f64 = m.plane(c).iter().map(|&v| v as f64).sum::<f64>() / (big_h * big_w) as f64;
                let after: f64 = d.plane(c).iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
                prop_assert!((before - after).abs() < 1e-6);
            }
        }
    }
}
