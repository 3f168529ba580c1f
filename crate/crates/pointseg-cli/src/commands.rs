use std::fmt::Write as FmtWrite;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use pointseg::dataio::{self, DatasetIndex, Split};
use pointseg::metrics::{ClassCounts, EvalReport};
use pointseg::network::{
    load_checkpoint, model_forward, predict_masked, save_checkpoint, Adagrad, ModelParams,
    TrainSample, WiringConfig,
};
use pointseg::postprocess::refine_ground;
use pointseg::projection::{
    backproject, dataset_from_frame, frame_cloud, frame_from_dataset, project as project_scan,
    PointCloud, ProjectionConfig, SphericalFrame,
};

use crate::config::RunConfig;

fn required<'a>(opt: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    opt.as_deref().ok_or_else(|| anyhow!("--{flag} is required"))
}

/// Reads either a raw scan (.bin) or a frame array (.npy) into a frame plus
/// the point cloud it covers. For arrays the cloud is reconstructed from the
/// occupied pixels, ordered to match the frame's source indices.
fn load_input_frame(
    path: &Path,
    proj: &ProjectionConfig,
) -> Result<(SphericalFrame, PointCloud)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => {
            let cloud = dataio::load_velodyne_bin(path)?;
            let frame = project_scan(&cloud, proj)
                .with_context(|| format!("projecting {}", path.display()))?;
            Ok((frame, cloud))
        }
        Some("npy") => {
            let array = dataio::read_npy(path)?;
            let frame = frame_from_dataset(&array, proj)
                .with_context(|| format!("reading frame array {}", path.display()))?;
            let cloud = frame_cloud(&frame);
            Ok((frame, cloud))
        }
        _ => bail!("input {} must end in .bin or .npy", path.display()),
    }
}

/// The projection grid a checkpoint was trained for.
fn checkpoint_projection(params: &ModelParams, base: &ProjectionConfig) -> ProjectionConfig {
    ProjectionConfig {
        height: params.wiring.height,
        width: params.wiring.width,
        ..base.clone()
    }
}

pub fn project(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input, "input")?;
    let output = required(&cfg.output, "output")?;

    let cloud = dataio::load_velodyne_bin(input)?;
    let frame = project_scan(&cloud, &cfg.projection)?;
    let array = dataset_from_frame(&frame)?;
    dataio::write_npy(&array, output)?;
    let preview = output.with_extension("ppm");
    dataio::save_range_preview(&frame, &preview)?;

    let occupied = frame.occupancy.iter().filter(|&&o| o).count();
    println!(
        "projected {} of {} points into {}x{} ({}, preview {})",
        occupied,
        cloud.points.len(),
        frame.height(),
        frame.width(),
        output.display(),
        preview.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input, "input")?;
    let output = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("model.pseg"));

    let index = DatasetIndex::scan(input, cfg.seed)?;
    let train_paths = index.split_paths(Split::Train);
    if train_paths.is_empty() {
        bail!("no frames hash into the train split under {}", input.display());
    }

    let samples: Vec<TrainSample> = train_paths
        .iter()
        .map(|p| -> Result<TrainSample> {
            let array = dataio::load_frame_array(p)?;
            let frame = frame_from_dataset(&array, &cfg.projection)?;
            TrainSample::from_frame(&frame)
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<_>>()?;

    let wiring = WiringConfig::scaled(cfg.model_scale)
        .with_frame(cfg.projection.height, cfg.projection.width);
    let mut params = ModelParams::init(wiring, cfg.seed)?;
    let mut opt = Adagrad::new(cfg.lr);

    eprintln!(
        "training on {} frames, {} steps, batch {}, lr {}, {} parameters",
        samples.len(),
        cfg.steps,
        cfg.batch,
        cfg.lr,
        params.parameter_count()
    );

    let mut csv = String::from("step,loss\n");
    let indices: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;
    let mut last_loss = f32::NAN;
    'epochs: for epoch in 0.. {
        for batch in dataio::batches(&indices, cfg.batch, cfg.seed, epoch)? {
            step += 1;
            let chosen: Vec<TrainSample> =
                batch.iter().map(|&i| samples[i].clone()).collect();
            let loss = pointseg::network::train_step(
                &mut params,
                &chosen,
                &cfg.class_weights,
                &mut opt,
            )?;
            last_loss = loss;
            if step == 1 || step == cfg.steps || step % cfg.log_every.max(1) == 0 {
                writeln!(csv, "{step},{loss}").expect("string write");
                eprintln!("step {step}: loss {loss:.6}");
            }
            if step == cfg.steps {
                break 'epochs;
            }
        }
    }

    let csv_path = output.with_extension("loss.csv");
    std::fs::write(&csv_path, csv)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    save_checkpoint(&params, &output)?;
    println!(
        "trained {step} steps, final loss {last_loss:.6}; checkpoint {}, loss log {}",
        output.display(),
        csv_path.display()
    );
    Ok(())
}

pub fn infer(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input, "input")?;
    let checkpoint = required(&cfg.checkpoint, "checkpoint")?;
    let outdir = required(&cfg.output, "output")?;

    let params = load_checkpoint(checkpoint)?;
    let proj = checkpoint_projection(&params, &cfg.projection);
    let (frame, cloud) = load_input_frame(input, &proj)?;

    let probs = model_forward(&params, &frame.channels)?;
    let mut pred = predict_masked(&probs, &frame.occupancy)?;
    let mut labeled = backproject(&frame, &pred, &cloud)?;

    if cfg.ransac {
        let refined = refine_ground(&labeled, &cfg.ransac_config);
        if refined.fallback {
            eprintln!("warning: ground plane fit failed; labels unchanged");
        } else if refined.relabeled > 0 {
            eprintln!("ground refinement demoted {} points", refined.relabeled);
        }
        labeled = refined.cloud;
        // Keep the pixel map consistent with the refined point labels.
        for (px, &si) in frame.source_index.iter().enumerate() {
            if si >= 0 {
                pred[px] = labeled.labels[si as usize];
            }
        }
    }

    std::fs::create_dir_all(outdir)
        .with_context(|| format!("creating {}", outdir.display()))?;
    let map_path = outdir.join("class_map.ppm");
    let cloud_path = outdir.join("labeled_cloud.txt");
    dataio::save_class_map_image(&pred, frame.height(), frame.width(), &map_path)?;
    dataio::save_labeled_cloud(&labeled, &cloud_path)?;

    let fg = pred.iter().filter(|&&c| c != 0).count();
    println!(
        "labeled {} points ({} foreground pixels); wrote {} and {}",
        labeled.len(),
        fg,
        map_path.display(),
        cloud_path.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input, "input")?;
    let checkpoint = required(&cfg.checkpoint, "checkpoint")?;
    let outdir = required(&cfg.output, "output")?;

    let params = load_checkpoint(checkpoint)?;
    let proj = checkpoint_projection(&params, &cfg.projection);
    let index = DatasetIndex::scan(input, cfg.seed)?;
    let paths: Vec<&Path> = index
        .entries
        .iter()
        .filter(|(_, s)| cfg.split.matches(*s))
        .map(|(p, _)| p.as_path())
        .collect();
    if paths.is_empty() {
        bail!("no frames in the requested split under {}", input.display());
    }

    let counts = paths
        .par_iter()
        .map(|p| -> Result<ClassCounts> {
            let array = dataio::read_npy(p)?;
            let frame = frame_from_dataset(&array, &proj)
                .with_context(|| format!("reading frame array {}", p.display()))?;
            let labels = frame
                .labels
                .as_ref()
                .ok_or_else(|| anyhow!("{} carries no labels", p.display()))?;
            let probs = model_forward(&params, &frame.channels)?;
            let pred = predict_masked(&probs, &frame.occupancy)?;
            let mut c = ClassCounts::new();
            c.accumulate(&pred, labels, &frame.occupancy)?;
            Ok(c)
        })
        .try_reduce(ClassCounts::new, |mut a, b| {
            a.merge(&b);
            Ok(a)
        })?;

    let report = EvalReport::from_counts(&counts);
    std::fs::create_dir_all(outdir)
        .with_context(|| format!("creating {}", outdir.display()))?;
    let table_path = outdir.join("report.txt");
    let csv_path = outdir.join("report.csv");
    std::fs::write(&table_path, report.render_table())
        .with_context(|| format!("writing {}", table_path.display()))?;
    std::fs::write(&csv_path, report.to_csv())
        .with_context(|| format!("writing {}", csv_path.display()))?;

    print!("{}", report.render_table());
    println!(
        "evaluated {} frames; reports under {}",
        paths.len(),
        outdir.display()
    );
    Ok(())
}

const BENCH_WARMUP: usize = 10;
const STAGES: [&str; 5] = ["projection", "forward", "argmax", "backprojection", "ransac"];

pub fn bench(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let input = required(&cfg.input, "input")?;
    let checkpoint = required(&cfg.checkpoint, "checkpoint")?;
    if cfg.iterations == 0 {
        bail!("--iterations must be positive");
    }

    let params = load_checkpoint(checkpoint)?;
    let proj = checkpoint_projection(&params, &cfg.projection);
    let (_, cloud) = load_input_frame(input, &proj)?;

    let mut samples: [Vec<f64>; 5] = Default::default();
    for it in 0..BENCH_WARMUP + cfg.iterations {
        let timed = it >= BENCH_WARMUP;
        let mut record = |stage: usize, start: Instant| {
            if timed {
                samples[stage].push(start.elapsed().as_secs_f64() * 1e3);
            }
        };

        let t = Instant::now();
        let frame = project_scan(&cloud, &proj)?;
        record(0, t);

        let t = Instant::now();
        let probs = model_forward(&params, &frame.channels)?;
        record(1, t);

        let t = Instant::now();
        let pred = predict_masked(&probs, &frame.occupancy)?;
        record(2, t);

        let t = Instant::now();
        let labeled = backproject(&frame, &pred, &cloud)?;
        record(3, t);

        let t = Instant::now();
        let _ = refine_ground(&labeled, &cfg.ransac_config);
        record(4, t);
    }

    let mut csv = String::from("stage,count,median_ms,p95_ms\n");
    for (name, series) in STAGES.iter().zip(samples.iter_mut()) {
        let (median, p95) = percentiles(series);
        writeln!(csv, "{name},{},{median:.3},{p95:.3}", series.len()).expect("string write");
    }
    out.write_all(csv.as_bytes()).context("writing bench report")?;
    if let Some(path) = &cfg.output {
        std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!(
        "timed {} iterations per stage after {BENCH_WARMUP} warmup runs",
        cfg.iterations
    );
    Ok(())
}

/// Median and 95th percentile (nearest-rank on the sorted series).
fn percentiles(series: &mut [f64]) -> (f64, f64) {
    assert!(!series.is_empty());
    series.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let n = series.len();
    let median = if n % 2 == 1 {
        series[n / 2]
    } else {
        0.5 * (series[n / 2 - 1] + series[n / 2])
    };
    let p95 = series[((n - 1) as f64 * 0.95).round() as usize];
    (median, p95)
}
