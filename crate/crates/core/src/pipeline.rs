//! End-to-end segmentation of one query from one in-context example.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedFeature};
use crate::refine::{refine_scores, SolveReport, SolverConfig};
use crate::selection::{select_for_example, SelectionConfig};
use crate::tensor_io::{FeatureMap, ImageRgb, PartMaskSet, SelectionRecord};
use crate::transfer::{finalize, segment, LabelMap, ScoreField, TransferConfig};

/// Overlay colors, indexed by label modulo the palette length.
pub const OVERLAY_PALETTE: [[u8; 3]; 10] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub selection: SelectionConfig,
    pub beta: f64,
    pub use_selection: bool,
    pub solver: SolverConfig,
    pub use_fbs: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            beta: TransferConfig::default().beta,
            use_selection: true,
            solver: SolverConfig::default(),
            use_fbs: true,
        }
    }
}

/// The in-context example, fused and with masks at feature resolution.
#[derive(Clone, Debug)]
pub struct Reference {
    pub fused: FusedFeature,
    pub masks: PartMaskSet,
}

impl Reference {
    /// Fuses the two sources and area-downsamples `masks` onto the feature grid.
    pub fn prepare(sd: &FeatureMap, dino: &FeatureMap, masks: &PartMaskSet) -> Result<Self> {
        let fused = fuse(sd, dino)?;
        let masks = masks.downsample(fused.map.height, fused.map.width)?;
        Ok(Self { fused, masks })
    }

    pub fn names(&self) -> &[String] {
        &self.masks.names
    }

    pub fn select(&self, config: &SelectionConfig) -> Result<SelectionRecord> {
        select_for_example(&self.fused, &self.masks, config)
    }
}

#[derive(Clone, Debug)]
pub struct SegmentOutput {
    pub selection: Option<SelectionRecord>,
    /// Scores at feature resolution.
    pub coarse: ScoreField,
    /// Scores at image resolution, refined when refinement ran.
    pub scores: ScoreField,
    pub labels: LabelMap,
    pub solve_reports: Vec<SolveReport>,
    /// Wall-clock seconds per stage, in execution order.
    pub timings: Vec<(String, f64)>,
}

impl SegmentOutput {
    pub fn all_converged(&self) -> bool {
        self.solve_reports.iter().all(|r| r.converged)
    }
}

/// Segments `query` at the resolution of `guide`.
///
/// When selection is enabled and `selection` is `None`, channels are selected
/// from the reference first.
pub fn segment_query(
    reference: &Reference,
    selection: Option<&SelectionRecord>,
    query_sd: &FeatureMap,
    query_dino: &FeatureMap,
    guide: &ImageRgb,
    config: &PipelineConfig,
) -> Result<SegmentOutput> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let query = fuse(query_sd, query_dino)?;
    if (query.map.height, query.map.width)
        != (reference.fused.map.height, reference.fused.map.width)
    {
        // transfer works for any pair of grids, but mismatches usually mean a wrong input
        log::debug!(
            "query grid {}x{} differs from reference {}x{}",
            query.map.height,
            query.map.width,
            reference.fused.map.height,
            reference.fused.map.width
        );
    }
    lap("fuse", &mut timings);

    let record = match (config.use_selection, selection) {
        (false, _) => None,
        (true, Some(s)) => Some(s.clone()),
        (true, None) => {
            let s = reference.select(&config.selection)?;
            lap("select", &mut timings);
            Some(s)
        }
    };
    let empty = SelectionRecord {
        metric: config.selection.metric,
        parts: Vec::new(),
    };
    let transfer = TransferConfig {
        beta: config.beta,
        use_selection: config.use_selection,
        upsample_to: (guide.height, guide.width),
    };
    let coarse = segment(
        &query,
        &reference.fused,
        &reference.masks,
        record.as_ref().unwrap_or(&empty),
        &transfer,
    )?;
    lap("transfer", &mut timings);

    let (mut labels, mut scores) = finalize(&coarse, &transfer)?;
    lap("upsample", &mut timings);

    let mut solve_reports = Vec::new();
    if config.use_fbs {
        let (refined, reports) = refine_scores(&scores, guide, &config.solver)?;
        labels = refined.argmax();
        scores = refined;
        solve_reports = reports;
        lap("refine", &mut timings);
    }

    Ok(SegmentOutput {
        selection: record,
        coarse,
        scores,
        labels,
        solve_reports,
        timings,
    })
}

/// Blends the label colors into `image` at 50%.
pub fn overlay(image: &ImageRgb, labels: &LabelMap) -> Result<ImageRgb> {
    if (image.height, image.width) != (labels.height, labels.width) {
        return Err(Error::Shape(format!(
            "image is {}x{} but labels are {}x{}",
            image.height, image.width, labels.height, labels.width
        )));
    }
    let data = image
        .data
        .chunks_exact(3)
        .zip(&labels.labels)
        .flat_map(|(px, &l)| {
            let color = OVERLAY_PALETTE[l as usize % OVERLAY_PALETTE.len()];
            [0, 1, 2].map(|k| (px[k] as u16 + color[k] as u16).div_ceil(2) as u8)
        })
        .collect();
    ImageRgb::new(image.height, image.width, data)
}
