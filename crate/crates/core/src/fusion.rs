//! Per-pixel L2 normalization and channel concatenation of the two feature
//! sources.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{FeatureMap, Source};

/// A contiguous block of fused channels contributed by one source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub source: Source,
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Fused feature map: the sd span first, then the dino span, each unit-norm
/// per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub map: FeatureMap,
    pub layout: Vec<Span>,
}

impl FusedFeature {
    pub fn span(&self, source: Source) -> Option<Span> {
        self.layout.iter().copied().find(|s| s.source == source)
    }

    /// Copies one span out as a standalone feature map.
    pub fn extract(&self, span: Span) -> FeatureMap {
        let mut data = Vec::with_capacity(self.map.num_pixels() * span.len);
        for i in 0..self.map.num_pixels() {
            data.extend_from_slice(&self.map.pixel(i)[span.range()]);
        }
        FeatureMap::from_parts_unchecked(
            self.map.height,
            self.map.width,
            span.len,
            span.source,
            data,
        )
    }
}

pub(crate) fn normalize_in_place(v: &mut [f32]) {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// Divides every pixel's channel vector by its L2 norm. All-zero vectors
/// pass through unchanged.
pub fn l2_normalize(f: &FeatureMap) -> FeatureMap {
    let mut data = f.data().to_vec();
    if f.channels > 0 {
        data.par_chunks_mut(f.channels).for_each(normalize_in_place);
    }
    FeatureMap::from_parts_unchecked(f.height, f.width, f.channels, f.source, data)
}

pub fn fuse(sd: &FeatureMap, dino: &FeatureMap) -> Result<FusedFeature> {
    if sd.source != Source::Sd || dino.source != Source::Dino {
        return Err(Error::Validation(format!(
            "fusion expects (sd, dino) maps, got ({}, {})",
            sd.source, dino.source
        )));
    }
    if (sd.height, sd.width) != (dino.height, dino.width) {
        return Err(Error::Shape(format!(
            "sd map is {}x{} but dino map is {}x{}",
            sd.height, sd.width, dino.height, dino.width
        )));
    }
    let sd = l2_normalize(sd);
    let dino = l2_normalize(dino);
    let channels = sd.channels + dino.channels;

    let mut data = vec![0.0f32; sd.num_pixels() * channels];
    data.par_chunks_mut(channels.max(1))
        .enumerate()
        .for_each(|(i, out)| {
            out[..sd.channels].copy_from_slice(sd.pixel(i));
            out[sd.channels..].copy_from_slice(dino.pixel(i));
        });

    let layout = vec![
        Span {
            source: Source::Sd,
            offset: 0,
            len: sd.channels,
        },
        Span {
            source: Source::Dino,
            offset: sd.channels,
            len: dino.channels,
        },
    ];
    Ok(FusedFeature {
        map: FeatureMap::from_parts_unchecked(sd.height, sd.width, channels, Source::Fused, data),
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, d: usize, source: Source, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(h, w, d, source, data).unwrap()
    }

    #[test]
    fn three_four_five() {
        let n = l2_normalize(&map(1, 1, 2, Source::Sd, vec![3.0, 4.0]));
        assert!((n.pixel(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.pixel(0)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_vector_passes_through() {
        let n = l2_normalize(&map(1, 1, 2, Source::Sd, vec![0.0, 0.0]));
        assert_eq!(n.pixel(0), &[0.0, 0.0]);
    }

    #[test]
    fn concatenation_order() {
        let sd = map(1, 1, 2, Source::Sd, vec![1.0, 0.0]);
        let dino = map(1, 1, 3, Source::Dino, vec![0.0, 1.0, 0.0]);
        let f = fuse(&sd, &dino).unwrap();
        assert_eq!(f.map.pixel(0), &[1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(f.map.source, Source::Fused);
    }

    #[test]
    fn production_geometry_layout() {
        let sd = map(2, 2, 768, Source::Sd, vec![0.1; 4 * 768]);
        let dino = map(2, 2, 1024, Source::Dino, vec![0.2; 4 * 1024]);
        let f = fuse(&sd, &dino).unwrap();
        assert_eq!(f.map.channels, 1792);
        assert_eq!(
            f.layout,
            vec![
                Span {
                    source: Source::Sd,
                    offset: 0,
                    len: 768
                },
                Span {
                    source: Source::Dino,
                    offset: 768,
                    len: 1024
                },
            ]
        );
    }

    #[test]
    fn spatial_mismatch() {
        let sd = map(1, 2, 1, Source::Sd, vec![1.0; 2]);
        let dino = map(2, 1, 1, Source::Dino, vec![1.0; 2]);
        assert!(matches!(fuse(&sd, &dino), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicate_source() {
        let a = map(1, 1, 1, Source::Sd, vec![1.0]);
        let b = map(1, 1, 1, Source::Sd, vec![1.0]);
        assert!(matches!(fuse(&a, &b), Err(Error::Validation(_))));
    }

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
    }

    proptest! {
        #[test]
        fn spans_are_unit_and_renormalizing_is_a_noop(
            sd in prop::collection::vec(-10.0f32..10.0, 12),
            dino in prop::collection::vec(-10.0f32..10.0, 8),
        ) {
            let f = fuse(
                &map(2, 2, 3, Source::Sd, sd),
                &map(2, 2, 2, Source::Dino, dino),
            ).unwrap();
            let covered: usize = f.layout.iter().map(|s| s.len).sum();
            prop_assert_eq!(covered, f.map.channels);
            for span in f.layout.clone() {
                let part = f.extract(span);
                for i in 0..part.num_pixels() {
                    let n = norm(part.pixel(i));
                    prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-5);
                }
                let again = l2_normalize(&part);
                for (a, b) in again.data().iter().zip(part.data()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn unit_vectors_are_fixed(theta in 0.0f64..std::f64::consts::TAU) {
            let v = vec![theta.cos() as f32, theta.sin() as f32];
            let n = l2_normalize(&map(1, 1, 2, Source::Dino, v.clone()));
            for (a, b) in n.pixel(0).iter().zip(&v) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }
    }
}
