use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use patchmil::eval::evaluate;
use patchmil::head::LossMode;
use patchmil::net::{ModelConfig, ModelParams};
use patchmil::proposals::{jittered, load_proposals, save_proposals, sliding_window, ProposalSet};
use patchmil::synth::{generate_dataset, load_ground_truth, sub_seed, SynthConfig};
use patchmil::train::{assemble_samples, train, TrainSample};
use patchmil::{Error, Result};

use crate::common::{load_file_config, merged_train_config, mode_name, TrainOverrides};
use crate::AblateArgs;

const FULL_SCALES: [u32; 3] = [64, 96, 128];
const SINGLE_SCALE: [u32; 1] = [96];
const JITTER_SHIFT: f64 = 6.0;
// Keeps the jitter stream apart from the generator's placement attempts.
const JITTER_STREAM: u64 = 999_983;

struct Cell {
    mode: LossMode,
    scales: &'static [u32],
    external: bool,
}

fn grid() -> Vec<Cell> {
    vec![
        Cell { mode: LossMode::MultiTask, scales: &FULL_SCALES, external: false },
        Cell { mode: LossMode::ClsOnly, scales: &FULL_SCALES, external: false },
        Cell { mode: LossMode::DisOnly, scales: &FULL_SCALES, external: false },
        Cell { mode: LossMode::MultiTask, scales: &SINGLE_SCALE, external: false },
        Cell { mode: LossMode::MultiTask, scales: &FULL_SCALES, external: true },
    ]
}

fn scales_label(scales: &[u32]) -> String {
    scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+")
}

/// Jitters every sliding-window bag, writes the result to `path`, then loads it
/// back so the run covers the external-file code path end to end.
fn external_proposals(
    manifest: &patchmil::synth::DatasetManifest,
    seed: u64,
    path: &Path,
) -> Result<BTreeMap<String, ProposalSet>> {
    let mut sets = Vec::with_capacity(manifest.images.len());
    for (i, rec) in manifest.images.iter().enumerate() {
        let (w, h) = (rec.width as u32, rec.height as u32);
        let sw = sliding_window(&rec.id, w, h);
        sets.push(jittered(&sw, w, h, JITTER_SHIFT, sub_seed(seed, i, JITTER_STREAM)));
    }
    let refs: Vec<&ProposalSet> = sets.iter().collect();
    save_proposals(path, &refs)?;
    load_proposals(path)
}

struct SeedData {
    sw_train: Vec<TrainSample>,
    sw_test: Vec<TrainSample>,
    ext_train: Vec<TrainSample>,
    ext_test: Vec<TrainSample>,
    test_gt: patchmil::synth::GroundTruth,
    classes: Vec<String>,
}

fn prepare_seed_data(args: &AblateArgs, seed: u64) -> Result<SeedData> {
    let data_dir = args.out.join(format!("data_seed{}", seed));
    let train_dir = data_dir.join("train");
    let test_dir = data_dir.join("test");
    let train_manifest = generate_dataset(
        &SynthConfig { num_images: args.train_num, seed, ..SynthConfig::default() },
        &train_dir,
    )?;
    let test_manifest = generate_dataset(
        &SynthConfig {
            num_images: args.test_num,
            seed: seed.wrapping_add(1000),
            ..SynthConfig::default()
        },
        &test_dir,
    )?;

    let sw_of = |m: &patchmil::synth::DatasetManifest| -> BTreeMap<String, ProposalSet> {
        m.images
            .iter()
            .map(|r| (r.id.clone(), sliding_window(&r.id, r.width as u32, r.height as u32)))
            .collect()
    };
    let ext_train_map = external_proposals(
        &train_manifest,
        seed,
        &data_dir.join("external_train.csv"),
    )?;
    let ext_test_map =
        external_proposals(&test_manifest, seed.wrapping_add(1000), &data_dir.join("external_test.csv"))?;

    Ok(SeedData {
        sw_train: assemble_samples(&train_dir, &train_manifest, &sw_of(&train_manifest))?,
        sw_test: assemble_samples(&test_dir, &test_manifest, &sw_of(&test_manifest))?,
        ext_train: assemble_samples(&train_dir, &train_manifest, &ext_train_map)?,
        ext_test: assemble_samples(&test_dir, &test_manifest, &ext_test_map)?,
        test_gt: load_ground_truth(&test_dir)?,
        classes: train_manifest.classes.clone(),
    })
}

fn stat_line(values: &[f64]) -> String {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() == 1 {
        return format!("{:.4}", mean);
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    format!("{:.4} [{:.4}..{:.4}]", mean, lo, hi)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<ExitCode> {
    let file = load_file_config(args.config.as_deref())?;
    let overrides = TrainOverrides { schedule: args.schedule.clone(), ..TrainOverrides::default() };
    let base_cfg = merged_train_config(&file, &overrides)?;
    if args.seeds.is_empty() {
        return Err(Error::invalid("ablate: at least one seed required"));
    }
    std::fs::create_dir_all(&args.out)?;

    let cells = grid();
    let total = cells.len() * args.seeds.len();
    let mut csv = String::from("mode,scales,proposals,mAP,CorLoc,test_s_per_image\n");
    // [cell][seed] -> (mAP, CorLoc)
    let mut results = vec![Vec::with_capacity(args.seeds.len()); cells.len()];
    let mut run = 0usize;
    for &seed in &args.seeds {
        let data = prepare_seed_data(args, seed)?;
        for (ci, cell) in cells.iter().enumerate() {
            run += 1;
            let label_p = if cell.external { "external" } else { "sw" };
            eprintln!(
                "[{}/{}] mode={} scales={} proposals={} seed={}",
                run,
                total,
                mode_name(cell.mode),
                scales_label(cell.scales),
                label_p,
                seed
            );
            let cfg = patchmil::train::TrainConfig {
                mode: cell.mode,
                train_scales: cell.scales.to_vec(),
                seed,
                ..base_cfg.clone()
            };
            let (train_samples, test_samples) = if cell.external {
                (&data.ext_train, &data.ext_test)
            } else {
                (&data.sw_train, &data.sw_test)
            };
            let mc = ModelConfig::toy(data.classes.len());
            let mut params = ModelParams::<f32>::init(&mc, seed);
            let start = Instant::now();
            let outcome = train(train_samples, &mc, &mut params, &cfg)?;
            if let Some(err) = outcome.abort {
                return Err(err);
            }
            let train_secs = start.elapsed().as_secs_f64();
            let report = evaluate(
                test_samples,
                &data.test_gt,
                &data.classes,
                &params,
                &mc,
                cell.scales,
                crate::common::DEFAULT_IOU_THRESHOLD,
            )?;
            eprintln!(
                "    mAP {:.4} CorLoc {:.4} (train {:.1}s, eval {:.3} s/image)",
                report.map, report.mean_corloc, train_secs, report.seconds_per_image
            );
            csv.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4}\n",
                mode_name(cell.mode),
                scales_label(cell.scales),
                label_p,
                report.map,
                report.mean_corloc,
                report.seconds_per_image
            ));
            results[ci].push((report.map, report.mean_corloc));
        }
    }

    let csv_path = args.out.join("ablation.csv");
    std::fs::write(&csv_path, &csv)?;

    let corloc = |ci: usize| -> Vec<f64> { results[ci].iter().map(|r| r.1).collect() };
    let map = |ci: usize| -> Vec<f64> { results[ci].iter().map(|r| r.0).collect() };
    println!(
        "findings over {} seed(s) {:?} (mean, [min..max]); reported, not asserted:",
        args.seeds.len(),
        args.seeds
    );
    println!(
        "  loss mode  CorLoc: multi-task {} vs cls {} vs dis {}",
        stat_line(&corloc(0)),
        stat_line(&corloc(1)),
        stat_line(&corloc(2))
    );
    println!(
        "  loss mode  mAP:    multi-task {} vs cls {} vs dis {}",
        stat_line(&map(0)),
        stat_line(&map(1)),
        stat_line(&map(2))
    );
    println!(
        "  scale set  CorLoc: {} {} vs {} {}",
        scales_label(&FULL_SCALES),
        stat_line(&corloc(0)),
        scales_label(&SINGLE_SCALE),
        stat_line(&corloc(3))
    );
    println!(
        "  proposals  CorLoc: sw {} vs external {}",
        stat_line(&corloc(0)),
        stat_line(&corloc(4))
    );
    println!("wrote {}", csv_path.display());
    Ok(ExitCode::SUCCESS)
}
