//! Writes a synthetic scan, a small labeled dataset, and an untrained
//! checkpoint for manual runs: `make_fixtures [out_dir] [model_scale]`.

use std::path::PathBuf;

use pointseg::dataio::{save_velodyne_bin, write_npy};
use pointseg::network::{save_checkpoint, ModelParams, WiringConfig};
use pointseg::projection::{dataset_from_frame, ProjectionConfig};
use pointseg::synth;

fn main() -> pointseg::Result<()> {
    let out: PathBuf = std::env::args_os()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| "fixtures".into());
    let scale: usize = std::env::args()
        .nth(2)
        .map(|s| s.parse().expect("model scale must be an integer"))
        .unwrap_or(1);
    std::fs::create_dir_all(&out).expect("create output dir");

    let cfg = ProjectionConfig::default();
    let cloud = synth::scene_cloud(1, &cfg);
    save_velodyne_bin(&cloud.cloud, &out.join("scan.bin"))?;

    for seed in 0..10u64 {
        let frame = synth::scene_frame(seed, &cfg)?;
        let array = dataset_from_frame(&frame)?;
        write_npy(&array, &out.join(format!("frame_{seed:03}.npy")))?;
    }

    let wiring = WiringConfig::scaled(scale).with_frame(cfg.height, cfg.width);
    let params = ModelParams::init(wiring, 0)?;
    save_checkpoint(&params, &out.join("model.pseg"))?;
    println!("fixtures under {} (model scale {scale})", out.display());
    Ok(())
}
