use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use patchmil::checkpoint::{load_checkpoint, save_checkpoint};
use patchmil::eval::evaluate;
use patchmil::gradcheck::{grad_check, toy_check_setup, CheckReport, CheckSettings};
use patchmil::net::{block_kind, ModelConfig, ModelParams};
use patchmil::synth::{generate_dataset, load_ground_truth, load_manifest, SynthConfig};
use patchmil::train::{assemble_samples, train, write_loss_log, TrainSample};
use patchmil::{nms, Result};

use crate::common::{
    build_proposals, load_file_config, merged_train_config, parse_mode, resolve_proposals_source,
    resolve_test_scales, DEFAULT_IOU_THRESHOLD,
};
use crate::{DiscoverArgs, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs};

pub fn gen_data(args: &GenDataArgs) -> Result<ExitCode> {
    let mut cfg = SynthConfig {
        num_images: args.num,
        classes: args.classes,
        seed: args.seed,
        ..SynthConfig::default()
    };
    if let Some(v) = args.min_size {
        cfg.min_size = v;
    }
    if let Some(v) = args.max_size {
        cfg.max_size = v;
    }
    if let Some(v) = args.min_objects {
        cfg.min_objects = v;
    }
    if let Some(v) = args.max_objects {
        cfg.max_objects = v;
    }
    if let Some(v) = args.min_object {
        cfg.min_object = v;
    }
    if let Some(v) = args.max_object {
        cfg.max_object = v;
    }
    if let Some(v) = args.clutter {
        cfg.clutter = v;
    }
    let manifest = generate_dataset(&cfg, &args.out)?;
    println!(
        "wrote {} images ({} classes: {}) to {}",
        manifest.images.len(),
        manifest.classes.len(),
        manifest.classes.join(", "),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Loads a dataset directory plus its proposal bags into training samples.
pub fn load_samples(
    data: &Path,
    proposals_source: &str,
) -> Result<(patchmil::synth::DatasetManifest, Vec<TrainSample>)> {
    let manifest = load_manifest(data)?;
    let proposals = build_proposals(proposals_source, &manifest)?;
    let samples = assemble_samples(data, &manifest, &proposals)?;
    Ok((manifest, samples))
}

pub fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let file = load_file_config(args.config.as_deref())?;
    let cfg = merged_train_config(&file, &args.overrides())?;
    let source = resolve_proposals_source(args.proposals.as_deref(), &file);
    let (manifest, samples) = load_samples(&args.data, &source)?;
    let mean_boxes =
        samples.iter().map(|s| s.boxes.len()).sum::<usize>() as f64 / samples.len().max(1) as f64;
    println!(
        "{} images, {:.1} proposals/image ({})",
        samples.len(),
        mean_boxes,
        if source == "sw" { "sliding window" } else { source.as_str() }
    );

    let mc = ModelConfig::toy(manifest.classes.len());
    let mut params = ModelParams::<f32>::init(&mc, cfg.seed);
    let start = Instant::now();
    let outcome = train(&samples, &mc, &mut params, &cfg)?;
    let secs = start.elapsed().as_secs_f64();

    save_checkpoint(&args.out, &mc, &params)?;
    let loss_path = args
        .loss_log
        .clone()
        .unwrap_or_else(|| args.out.join("loss.csv"));
    write_loss_log(&loss_path, &outcome.rows)?;

    let done = outcome.rows.len();
    let final_loss = outcome.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations in {:.1}s ({:.3} s/iter); final loss {:.4}",
        done,
        secs,
        secs / done.max(1) as f64,
        final_loss
    );
    println!("checkpoint: {}", args.out.display());
    println!("loss log: {}", loss_path.display());
    if let Some(err) = outcome.abort {
        eprintln!("error: {}", err);
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let file = load_file_config(args.config.as_deref())?;
    let source = resolve_proposals_source(args.proposals.as_deref(), &file);
    let scales = resolve_test_scales(args.scales.as_ref(), &file);
    let iou_thr = args
        .iou_threshold
        .or(file.iou_threshold)
        .unwrap_or(DEFAULT_IOU_THRESHOLD);
    let (mc, params) = load_checkpoint::<f32>(&args.checkpoint)?;
    let (manifest, samples) = load_samples(&args.data, &source)?;
    let gt = load_ground_truth(&args.data)?;
    let report = evaluate(&samples, &gt, &manifest.classes, &params, &mc, &scales, iou_thr)?;

    let out_dir = args.out.clone().unwrap_or_else(|| args.checkpoint.clone());
    std::fs::create_dir_all(&out_dir)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(out_dir.join("report.json"), json)?;
    let mut table = report.text_table();
    table.push('\n');
    std::fs::write(out_dir.join("report.txt"), &table)?;

    print!("{}", table);
    println!("timing: {:.3} s/image", report.seconds_per_image);
    println!("report: {}", out_dir.join("report.json").display());
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_discover(args: &DiscoverArgs) -> Result<ExitCode> {
    let file = load_file_config(args.config.as_deref())?;
    let source = resolve_proposals_source(args.proposals.as_deref(), &file);
    let scales = resolve_test_scales(args.scales.as_ref(), &file);
    let (mc, params) = load_checkpoint::<f32>(&args.checkpoint)?;
    let (manifest, samples) = load_samples(&args.data, &source)?;
    let classes = mc.head.classes;
    let topk = args.topk.unwrap_or(1).max(1);

    let mut out = String::from("image_id,class,score,lx,ly,rx,ry\n");
    let mut rows = 0usize;
    for sample in &samples {
        let scores = patchmil::eval::score_image(sample, &params, &mc, &scales)?;
        for c in 0..classes {
            if !args.all_classes && sample.labels.get(c) == 0 {
                continue;
            }
            let per_patch: Vec<f64> = (0..sample.boxes.len())
                .map(|j| scores.pat_scores.data()[j * classes + c])
                .collect();
            let ranked: Vec<usize> = match args.nms {
                Some(thr) => nms(&sample.boxes, &per_patch, thr),
                None => {
                    let mut order: Vec<usize> = (0..sample.boxes.len()).collect();
                    order.sort_by(|&i, &j| {
                        per_patch[j]
                            .partial_cmp(&per_patch[i])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(i.cmp(&j))
                    });
                    order
                }
            };
            for &j in ranked.iter().take(topk) {
                let b = &sample.boxes[j];
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    sample.id, manifest.classes[c], per_patch[j], b.lx, b.ly, b.rx, b.ry
                ));
                rows += 1;
            }
        }
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &out)?;
            println!("wrote {} boxes to {}", rows, path.display());
        }
        None => print!("{}", out),
    }
    Ok(ExitCode::SUCCESS)
}

/// Drops rows for branches the loss mode leaves frozen.
fn visible_report(report: &CheckReport, mode: patchmil::head::LossMode) -> CheckReport {
    CheckReport {
        blocks: report
            .blocks
            .iter()
            .filter(|b| block_kind(&b.name).trained_in(mode))
            .cloned()
            .collect(),
        tolerance: report.tolerance,
    }
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let mode = parse_mode(&args.mode)?;
    let settings = CheckSettings {
        epsilon: args.epsilon.unwrap_or(1e-5),
        tolerance: args.tolerance.unwrap_or(1e-4),
        ..CheckSettings::default()
    };
    let start = Instant::now();
    let mut all_pass = true;
    let mut worst = 0.0f64;
    for i in 0..args.models {
        let seed = args.seed + i as u64;
        let (mc, params, sample) = toy_check_setup(seed);
        let report = grad_check(&sample, &params, &mc, mode, args.dis_weight, &settings)?;
        let shown = visible_report(&report, mode);
        println!("model seed {} ({} patches):", seed, sample.boxes.len());
        println!("{}", shown);
        let skipped: Vec<&str> = report
            .blocks
            .iter()
            .filter(|b| !block_kind(&b.name).trained_in(mode))
            .map(|b| b.name.as_str())
            .collect();
        if !skipped.is_empty() {
            println!("frozen, skipped: {}", skipped.join(", "));
        }
        worst = worst.max(shown.max_rel_err());
        all_pass &= shown.passed();
    }
    let secs = start.elapsed().as_secs_f64();
    if all_pass {
        println!(
            "gradient check passed: {} models, max rel err {:.3e}, tolerance {:.1e}, {:.1}s",
            args.models, worst, settings.tolerance, secs
        );
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "gradient check FAILED: max rel err {:.3e} exceeds tolerance {:.1e}",
            worst, settings.tolerance
        );
        Ok(ExitCode::from(3))
    }
}
