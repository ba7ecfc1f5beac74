//! End-to-end properties of the library pipeline on synthetic fixtures.

use oiparts_core::eval::{iou_report, ConfusionMatrix};
use oiparts_core::pipeline::{segment_query, PipelineConfig, Reference};
use oiparts_core::synth::{generate, Layout, SynthFixture, SynthSpec};
use oiparts_core::tensor_io::{PartSelection, SourceSelection};
use oiparts_core::transfer::{finalize, TransferConfig};
use oiparts_core::{LabelMap, SelectionRecord, Source};

fn family(seed: u64, noise_sigma: f64) -> SynthFixture {
    generate(&SynthSpec {
        seed,
        height: 32,
        width: 32,
        dims_sd: 32,
        dims_dino: 32,
        num_parts: 4,
        layout: Layout::Voronoi,
        prototype_separation: 75.0,
        noise_sigma,
        distractor_channels: 8,
        ..Default::default()
    })
    .unwrap()
}

fn miou(f: &SynthFixture, labels: &LabelMap) -> f64 {
    let gt = LabelMap::new(
        f.image_height(),
        f.image_width(),
        f.names.clone(),
        f.query_labels.clone(),
    )
    .unwrap();
    let mut cm = ConfusionMatrix::new(f.names.len());
    cm.accumulate(&gt, labels).unwrap();
    iou_report(&cm, &f.names).unwrap().miou.unwrap()
}

fn run(f: &SynthFixture, config: &PipelineConfig) -> oiparts_core::SegmentOutput {
    let reference = Reference::prepare(&f.ref_sd, &f.ref_dino, &f.ref_masks()).unwrap();
    segment_query(
        &reference,
        None,
        &f.query_sd,
        &f.query_dino,
        &f.query_image,
        config,
    )
    .unwrap()
}

#[test]
fn more_noise_never_helps_on_average() {
    let sigmas = [0.05, 0.3, 0.6];
    let means: Vec<f64> = sigmas
        .iter()
        .map(|&s| {
            (0..5)
                .map(|seed| {
                    let f = family(seed, s);
                    miou(&f, &run(&f, &PipelineConfig::default()).labels)
                })
                .sum::<f64>()
                / 5.0
        })
        .collect();
    assert!(
        means.windows(2).all(|w| w[1] <= w[0]),
        "mean mIoU over sigmas {sigmas:?}: {means:?}"
    );
}

#[test]
fn skipping_refinement_is_argmax_of_upsampled_scores() {
    let f = family(3, 0.2);
    let out = run(
        &f,
        &PipelineConfig {
            use_fbs: false,
            ..Default::default()
        },
    );
    let transfer = TransferConfig {
        upsample_to: (f.image_height(), f.image_width()),
        ..Default::default()
    };
    let (labels, up) = finalize(&out.coarse, &transfer).unwrap();
    assert_eq!(out.scores, up);
    assert_eq!(out.labels, labels);
    assert_eq!(out.labels, up.argmax());
    assert!(out.solve_reports.is_empty());
}

#[test]
fn without_selection_the_record_is_ignored() {
    let f = family(4, 0.1);
    let reference = Reference::prepare(&f.ref_sd, &f.ref_dino, &f.ref_masks()).unwrap();
    let bogus = SelectionRecord {
        metric: Default::default(),
        parts: f
            .names
            .iter()
            .map(|n| PartSelection {
                name: n.clone(),
                per_source: [Source::Sd, Source::Dino]
                    .map(|source| SourceSelection {
                        source,
                        k: 1,
                        channels: vec![0],
                        sweep_accuracy: 0.0,
                    })
                    .to_vec(),
            })
            .collect(),
    };
    let config = PipelineConfig {
        use_selection: false,
        ..Default::default()
    };
    let a = segment_query(
        &reference,
        None,
        &f.query_sd,
        &f.query_dino,
        &f.query_image,
        &config,
    )
    .unwrap();
    let b = segment_query(
        &reference,
        Some(&bogus),
        &f.query_sd,
        &f.query_dino,
        &f.query_image,
        &config,
    )
    .unwrap();
    assert_eq!(a.scores, b.scores);
    assert!(a.selection.is_none() && b.selection.is_none());
}

#[test]
fn a_loaded_selection_is_used_verbatim() {
    let f = family(5, 0.1);
    let reference = Reference::prepare(&f.ref_sd, &f.ref_dino, &f.ref_masks()).unwrap();
    let record = reference.select(&Default::default()).unwrap();
    let config = PipelineConfig::default();
    let computed = segment_query(
        &reference,
        None,
        &f.query_sd,
        &f.query_dino,
        &f.query_image,
        &config,
    )
    .unwrap();
    let loaded = segment_query(
        &reference,
        Some(&record),
        &f.query_sd,
        &f.query_dino,
        &f.query_image,
        &config,
    )
    .unwrap();
    assert_eq!(computed.selection.as_ref(), Some(&record));
    assert_eq!(computed.labels, loaded.labels);
}
