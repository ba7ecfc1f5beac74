//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::json;

use oiparts_core::eval::{iou_report, ConfusionMatrix, IouReport};
use oiparts_core::pipeline::{overlay, segment_query, PipelineConfig, Reference};
use oiparts_core::refine::{build_grid, solve};
use oiparts_core::synth::{generate, SynthSpec, GENERATOR};
use oiparts_core::tensor_io::{
    load_mask_set, read_image, read_json, read_plane, read_selection, read_tensor, write_image,
    write_json, write_plane, write_selection, write_tensor, write_u8_array,
};
use oiparts_core::{Error, FeatureMap, LabelMap, Plane, SelectionConfig, Source};

use crate::manifest::RunManifest;
use crate::{
    EvalArgs, ReferenceArgs, RefineArgs, SegmentArgs, SelectArgs, SelectionArgs, SynthArgs,
};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn load_reference(args: &ReferenceArgs, manifest: &mut RunManifest) -> Result<Reference> {
    let sd = read_tensor(&args.ref_sd, Source::Sd).context("--ref-sd")?;
    let dino = read_tensor(&args.ref_dino, Source::Dino).context("--ref-dino")?;
    let masks = load_mask_set(&args.ref_mask, &args.names).context("--ref-mask/--names")?;
    manifest
        .input("ref_sd", &args.ref_sd)
        .input("ref_dino", &args.ref_dino)
        .input("ref_mask", &args.ref_mask)
        .input("names", &args.names);
    Reference::prepare(&sd, &dino, &masks).context("preparing the reference")
}

fn selection_config(args: &SelectionArgs) -> SelectionConfig {
    SelectionConfig {
        metric: args.metric,
        k_grid: args.k_grid.clone(),
    }
}

pub fn select(args: &SelectArgs) -> Result<()> {
    let config = selection_config(&args.selection);
    let mut manifest = RunManifest::new("select", json!({ "selection": config }));
    let t = Instant::now();
    let reference = load_reference(&args.reference, &mut manifest)?;
    manifest.stage("load", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let record = reference.select(&config).context("selecting channels")?;
    manifest.stage("select", t.elapsed().as_secs_f64());

    create_dir(&args.out_dir)?;
    let path = args.out_dir.join("selection.json");
    write_selection(&record, &path)?;
    manifest.output("selection", &path);
    manifest.write(&args.out_dir)?;
    Ok(())
}

pub fn segment(args: &SegmentArgs) -> Result<()> {
    let config = PipelineConfig {
        selection: selection_config(&args.selection),
        beta: args.beta,
        use_selection: !args.no_selection,
        solver: args.solver.config(),
        use_fbs: !args.no_fbs,
    };
    let mut manifest = RunManifest::new(
        "segment",
        json!({ "pipeline": config, "strict": args.solver.strict }),
    );

    let t = Instant::now();
    let reference = load_reference(&args.reference, &mut manifest)?;
    let query_sd = read_tensor(&args.query_sd, Source::Sd).context("--query-sd")?;
    let query_dino = read_tensor(&args.query_dino, Source::Dino).context("--query-dino")?;
    let image = read_image(&args.query_image).context("--query-image")?;
    manifest
        .input("query_sd", &args.query_sd)
        .input("query_dino", &args.query_dino)
        .input("query_image", &args.query_image);
    let loaded = match &args.selection_in {
        Some(p) => {
            manifest.input("selection", p);
            Some(read_selection(p).context("--selection-in")?)
        }
        None => None,
    };
    manifest.stage("load", t.elapsed().as_secs_f64());

    let out = segment_query(
        &reference,
        loaded.as_ref(),
        &query_sd,
        &query_dino,
        &image,
        &config,
    )
    .context("segmenting the query")?;
    for (name, secs) in &out.timings {
        manifest.stage(name, *secs);
    }

    create_dir(&args.out_dir)?;
    let labels_path = args.out_dir.join("labels.npy");
    out.labels.write(&labels_path)?;
    let scores_path = args.out_dir.join("scores.npy");
    out.scores.write(&scores_path)?;
    let overlay_path = args.out_dir.join("overlay.ppm");
    write_image(&overlay(&image, &out.labels)?, &overlay_path)?;
    manifest
        .output("labels", &labels_path)
        .output("scores", &scores_path)
        .output("overlay", &overlay_path);
    if let Some(record) = &out.selection {
        let mut targets = vec![args.out_dir.join("selection.json")];
        targets.extend(args.selection_out.clone());
        for p in &targets {
            write_selection(record, p)?;
        }
        manifest.output("selection", &targets[0]);
    }

    let failed: Vec<(usize, f64)> = out
        .solve_reports
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.converged)
        .map(|(c, r)| (c, r.relative_residual))
        .collect();
    for &(c, residual) in &failed {
        manifest.warn(format!(
            "refinement of part '{}' stopped at relative residual {residual:e}",
            reference.names()[c]
        ));
    }
    manifest.write(&args.out_dir)?;

    if args.solver.strict {
        if let Some(&(c, residual)) = failed.first() {
            return Err(Error::NonConvergence {
                iterations: out.solve_reports[c].iterations,
                residual,
            })
            .with_context(|| format!("refining part '{}'", reference.names()[c]));
        }
    }
    Ok(())
}

pub fn refine(args: &RefineArgs) -> Result<()> {
    let config = args.solver.config();
    let mut manifest = RunManifest::new(
        "refine",
        json!({ "solver": config, "strict": args.solver.strict }),
    );
    let target = read_plane(&args.target).context("--target")?;
    let guide = read_image(&args.guide).context("--guide")?;
    manifest
        .input("target", &args.target)
        .input("guide", &args.guide);
    let confidence = match &args.confidence {
        Some(p) => {
            manifest.input("confidence", p);
            read_plane(p).context("--confidence")?
        }
        None => Plane::filled(target.height, target.width, 1.0),
    };

    let t = Instant::now();
    let grid = build_grid(&guide, &config).context("--guide")?;
    let (refined, report) = solve(&grid, &target, &confidence, &config)?;
    manifest.stage("refine", t.elapsed().as_secs_f64());

    create_dir(&args.out_dir)?;
    let path = args.out_dir.join("refined.npy");
    write_plane(&refined, &path)?;
    manifest.output("refined", &path);
    if !report.converged {
        manifest.warn(format!(
            "solver stopped at relative residual {:e} after {} iterations",
            report.relative_residual, report.iterations
        ));
    }
    manifest.write(&args.out_dir)?;
    if args.solver.strict && !report.converged {
        return Err(Error::NonConvergence {
            iterations: report.iterations,
            residual: report.relative_residual,
        }
        .into());
    }
    Ok(())
}

/// Maps file stem to path for every `.npy` in `dir`.
fn npy_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .with_context(|| format!("listing {}", dir.display()))?
            .path();
        if path.extension().is_some_and(|e| e == "npy") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let names: Vec<String> = read_json(&args.names).context("--names")?;
    let preds = npy_stems(&args.pred_dir).context("--pred-dir")?;
    let gts = npy_stems(&args.gt_dir).context("--gt-dir")?;
    let unmatched: Vec<&String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Validation(format!(
            "stems without a counterpart in the other directory: {}",
            unmatched
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))
        .into());
    }
    if preds.is_empty() {
        return Err(Error::Validation(format!(
            "no .npy label maps in {}",
            args.pred_dir.display()
        ))
        .into());
    }

    let mut manifest = RunManifest::new("eval", json!({ "num_parts": names.len() }));
    manifest
        .input("pred_dir", &args.pred_dir)
        .input("gt_dir", &args.gt_dir)
        .input("names", &args.names);

    let t = Instant::now();
    let mut total = ConfusionMatrix::new(names.len());
    let mut per_image: BTreeMap<String, IouReport> = BTreeMap::new();
    for (stem, pred_path) in &preds {
        let pred = LabelMap::read(pred_path, names.clone())?;
        let gt = LabelMap::read(&gts[stem], names.clone())?;
        let mut cm = ConfusionMatrix::new(names.len());
        cm.accumulate(&gt, &pred)
            .with_context(|| format!("comparing '{stem}'"))?;
        total.merge(&cm)?;
        per_image.insert(stem.clone(), iou_report(&cm, &names)?);
    }
    let aggregate = iou_report(&total, &names)?;
    manifest.stage("eval", t.elapsed().as_secs_f64());

    create_dir(&args.out_dir)?;
    let mut per_image_csv = String::from("image,part,iou\n");
    for (stem, report) in &per_image {
        for line in report.to_csv().lines().skip(1) {
            per_image_csv.push_str(&format!("{stem},{line}\n"));
        }
    }
    let files = [
        ("report_txt", "report.txt", aggregate.to_table()),
        ("report_csv", "report.csv", aggregate.to_csv()),
        ("report_json", "report.json", aggregate.to_json()),
        ("per_image_csv", "per_image.csv", per_image_csv),
    ];
    for (key, file, text) in files {
        let path = args.out_dir.join(file);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        manifest.output(key, &path);
    }
    let per_image_json = args.out_dir.join("per_image.json");
    write_json(&per_image_json, &per_image)?;
    manifest.output("per_image_json", &per_image_json);
    for (stem, report) in &per_image {
        for p in report.parts.iter().filter(|p| p.excluded) {
            log::info!(
                "{stem}: part '{}' absent from prediction and ground truth",
                p.part
            );
        }
    }
    manifest.write(&args.out_dir)?;
    print!("{}", aggregate.to_table());
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: args.seed,
        height: args.height,
        width: args.width,
        dims_sd: args.dims_sd,
        dims_dino: args.dims_dino,
        num_parts: args.num_parts,
        layout: args.layout,
        prototype_separation: args.prototype_separation,
        noise_sigma: args.noise_sigma,
        distractor_channels: args.distractor_channels,
        distractor_sigma: args.distractor_sigma,
        image_scale: args.image_scale,
    };
    let t = Instant::now();
    let f = generate(&spec).context("generating the fixture")?;
    let mut manifest = RunManifest::new(
        "synth",
        json!({
            "spec": spec,
            "generator": GENERATOR,
            "informative_channels": { "sd": f.informative[0], "dino": f.informative[1] },
        }),
    );
    manifest.stage("generate", t.elapsed().as_secs_f64());

    create_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    let (h, w) = (f.image_height(), f.image_width());
    let tensors: [(&str, &FeatureMap); 4] = [
        ("ref_sd", &f.ref_sd),
        ("ref_dino", &f.ref_dino),
        ("query_sd", &f.query_sd),
        ("query_dino", &f.query_dino),
    ];
    for (key, map) in tensors {
        let path = dir.join(format!("{key}.npy"));
        write_tensor(map, &path)?;
        manifest.output(key, &path);
    }
    let labels: [(&str, &[u8], usize, usize); 3] = [
        ("ref_labels", &f.ref_labels, h, w),
        ("query_labels", &f.query_labels, h, w),
        (
            "query_labels_feat",
            &f.query_labels_feat,
            spec.height,
            spec.width,
        ),
    ];
    for (key, data, lh, lw) in labels {
        let path = dir.join(format!("{key}.npy"));
        write_u8_array(&path, &[lh, lw], data)?;
        manifest.output(key, &path);
    }
    for (key, image) in [("ref_image", &f.ref_image), ("query_image", &f.query_image)] {
        let path = dir.join(format!("{key}.ppm"));
        write_image(image, &path)?;
        manifest.output(key, &path);
    }
    let names = dir.join("names.json");
    write_json(&names, &f.names)?;
    manifest.output("names", &names);
    manifest.write(dir)?;
    Ok(())
}
