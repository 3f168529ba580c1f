//! Spherical projection of LiDAR scans into dense frames and back.
//!
//! A scan point at range `r` maps to a vertical angle `alpha = asin(z / r)`
//! and a horizontal angle `beta = asin(y / sqrt(x^2 + y^2))`, both binned
//! onto a fixed grid. The default grid is 64 rows over `[-24.9, +2.0]`
//! degrees (the sensor's beam span) and 512 columns over `[-45, +45]`
//! degrees (front view). Row 0 is the topmost beam, so rows count down
//! from `azimuth_max`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 4;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["background", "car", "pedestrian", "cyclist"];

/// One LiDAR return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn range(&self) -> f32 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

/// A point cloud with one class id per point.
#[derive(Clone, Debug)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<u8>,
}

impl LabeledCloud {
    pub fn new(cloud: PointCloud, labels: Vec<u8>) -> Result<Self> {
        if cloud.points.len() != labels.len() {
            return Err(Error::shape(
                "labeled_cloud",
                format!(
                    "{} points but {} labels",
                    cloud.points.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::shape(
                "labeled_cloud",
                format!("label {bad} out of range for {CLASS_COUNT} classes"),
            ));
        }
        Ok(LabeledCloud { cloud, labels })
    }

    pub fn len(&self) -> usize {
        self.cloud.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.points.is_empty()
    }
}

/// Grid geometry of the spherical frame. `azimuth` is the vertical span
/// (degrees above/below the horizon), `zenith` the horizontal span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    pub azimuth_min: f32,
    pub azimuth_max: f32,
    pub zenith_min: f32,
    pub zenith_max: f32,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            height: 64,
            width: 512,
            azimuth_min: -24.9,
            azimuth_max: 2.0,
            zenith_min: -45.0,
            zenith_max: 45.0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "frame extent {}x{} must be positive",
                self.height, self.width
            )));
        }
        if self.azimuth_max <= self.azimuth_min || self.zenith_max <= self.zenith_min {
            return Err(Error::Config(format!(
                "angular spans must be increasing: azimuth [{}, {}], zenith [{}, {}]",
                self.azimuth_min, self.azimuth_max, self.zenith_min, self.zenith_max
            )));
        }
        Ok(())
    }

    /// Vertical bin size in degrees.
    pub fn delta_alpha(&self) -> f64 {
        (self.azimuth_max as f64 - self.azimuth_min as f64) / self.height as f64
    }

    /// Horizontal bin size in degrees.
    pub fn delta_beta(&self) -> f64 {
        (self.zenith_max as f64 - self.zenith_min as f64) / self.width as f64
    }

    /// Grid cell for a pair of angles (degrees), or `None` if out of span.
    /// Boundary hits on the far edges clamp into the last row/column.
    pub fn bin(&self, alpha_deg: f64, beta_deg: f64) -> Option<(usize, usize)> {
        let (a_min, a_max) = (self.azimuth_min as f64, self.azimuth_max as f64);
        let (b_min, b_max) = (self.zenith_min as f64, self.zenith_max as f64);
        if alpha_deg < a_min || alpha_deg > a_max || beta_deg < b_min || beta_deg > b_max {
            return None;
        }
        let row = ((a_max - alpha_deg) / self.delta_alpha()).floor() as usize;
        let col = ((beta_deg - b_min) / self.delta_beta()).floor() as usize;
        Some((row.min(self.height - 1), col.min(self.width - 1)))
    }

    /// The point at range `r` whose angles sit exactly at the center of a
    /// grid cell. Inverse of `bin` up to binning; used by the synthetic
    /// scene generator and the geometry tests.
    pub fn pixel_center_point(&self, row: usize, col: usize, r: f32, intensity: f32) -> Point {
        let alpha = (self.azimuth_max as f64 - (row as f64 + 0.5) * self.delta_alpha())
            .to_radians();
        let beta =
            (self.zenith_min as f64 + (col as f64 + 0.5) * self.delta_beta()).to_radians();
        let rho = r as f64 * alpha.cos();
        Point {
            x: (rho * beta.cos()) as f32,
            y: (rho * beta.sin()) as f32,
            z: (r as f64 * alpha.sin()) as f32,
            intensity,
        }
    }
}

pub const FRAME_CHANNELS: usize = 5;

/// Dense spherical frame: per-pixel `(x, y, z, intensity, range)` channels
/// plus occupancy, the index of the winning source point (-1 when empty),
/// and optional per-pixel class labels.
#[derive(Clone, Debug)]
pub struct SphericalFrame {
    pub channels: Tensor,
    pub occupancy: Vec<bool>,
    pub source_index: Vec<i32>,
    pub labels: Option<Vec<u8>>,
}

impl SphericalFrame {
    pub fn height(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }
}

/// Angles (degrees) and range of a point as `(vertical, horizontal, r)`,
/// or `None` when it cannot be projected: at the origin, behind the sensor
/// (the horizontal angle formula folds the rear hemisphere onto the front
/// view), or on the vertical axis.
pub fn angles_deg(p: &Point) -> Option<(f64, f64, f64)> {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let r2 = x * x + y * y + z * z;
    if r2 == 0.0 || x <= 0.0 {
        return None;
    }
    let r = r2.sqrt();
    let rho = (x * x + y * y).sqrt();
    let alpha = (z / r).asin().to_degrees();
    let beta = (y / rho).asin().to_degrees();
    Some((alpha, beta, r))
}

/// Projects a cloud into a spherical frame. Points at the origin are
/// skipped; points outside the configured spans (including the rear
/// hemisphere) are discarded. On pixel collisions the nearest point wins;
/// an exact range tie keeps the earlier point.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<SphericalFrame> {
    cfg.validate()?;
    if !cloud.points.iter().any(|p| p.range() > 0.0) {
        return Err(Error::data("projection", "no projectable points"));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut channels = vec![0.0f32; h * w * FRAME_CHANNELS];
    let mut occupancy = vec![false; h * w];
    let mut source_index = vec![-1i32; h * w];
    let mut best_range = vec![f64::INFINITY; h * w];

    for (i, p) in cloud.points.iter().enumerate() {
        let Some((alpha, beta, r)) = angles_deg(p) else {
            continue;
        };
        let Some((row, col)) = cfg.bin(alpha, beta) else {
            continue;
        };
        let px = row * w + col;
        if r < best_range[px] {
            best_range[px] = r;
            occupancy[px] = true;
            source_index[px] = i as i32;
            let base = px * FRAME_CHANNELS;
            channels[base] = p.x;
            channels[base + 1] = p.y;
            channels[base + 2] = p.z;
            channels[base + 3] = p.intensity;
            channels[base + 4] = r as f32;
        }
    }

    Ok(SphericalFrame {
        channels: Tensor::new(vec![h, w, FRAME_CHANNELS], channels)?,
        occupancy,
        source_index,
        labels: None,
    })
}

/// Projects a labeled cloud; every occupied pixel carries the label of its
/// winning point, empty pixels are background.
pub fn project_labeled(cloud: &LabeledCloud, cfg: &ProjectionConfig) -> Result<SphericalFrame> {
    let mut frame = project(&cloud.cloud, cfg)?;
    let labels = frame
        .source_index
        .iter()
        .map(|&si| if si < 0 { 0 } else { cloud.labels[si as usize] })
        .collect();
    frame.labels = Some(labels);
    Ok(frame)
}

/// Transfers per-pixel class ids back onto the original cloud. Points that
/// were discarded during projection or lost their pixel to a nearer point
/// receive background.
pub fn backproject(
    frame: &SphericalFrame,
    class_map: &[u8],
    cloud: &PointCloud,
) -> Result<LabeledCloud> {
    if class_map.len() != frame.pixels() {
        return Err(Error::shape(
            "backproject",
            format!(
                "class map has {} entries for a {}x{} frame",
                class_map.len(),
                frame.height(),
                frame.width()
            ),
        ));
    }
    let mut labels = vec![0u8; cloud.points.len()];
    for (px, &si) in frame.source_index.iter().enumerate() {
        if si >= 0 {
            let idx = si as usize;
            if idx >= cloud.points.len() {
                return Err(Error::shape(
                    "backproject",
                    format!(
                        "source index {idx} outside cloud of {} points",
                        cloud.points.len()
                    ),
                ));
            }
            labels[idx] = class_map[px];
        }
    }
    LabeledCloud::new(cloud.clone(), labels)
}

pub const DATASET_CHANNELS: usize = 6;

/// Converts a dataset array `[h, w, 6]` (x, y, z, intensity, range, label)
/// into a frame. Occupancy is `range > 0`; the label channel is rounded to
/// the nearest class id and clamped into range. Occupied pixels receive
/// dense source indices in row-major order so that `frame_cloud` and
/// `backproject` work on dataset frames too.
pub fn frame_from_dataset(array: &Tensor, cfg: &ProjectionConfig) -> Result<SphericalFrame> {
    let (h, w, c) = array.dims3()?;
    if c != DATASET_CHANNELS {
        return Err(Error::shape(
            "frame_from_dataset",
            format!("array has {c} channels, expected {DATASET_CHANNELS}"),
        ));
    }
    if (h, w) != (cfg.height, cfg.width) {
        return Err(Error::shape(
            "frame_from_dataset",
            format!(
                "array extent {h}x{w}, config expects {}x{}",
                cfg.height, cfg.width
            ),
        ));
    }
    let ad = array.data();
    let mut channels = vec![0.0f32; h * w * FRAME_CHANNELS];
    let mut occupancy = vec![false; h * w];
    let mut source_index = vec![-1i32; h * w];
    let mut labels = vec![0u8; h * w];
    let mut next_index = 0i32;
    for px in 0..h * w {
        let src = &ad[px * DATASET_CHANNELS..(px + 1) * DATASET_CHANNELS];
        channels[px * FRAME_CHANNELS..(px + 1) * FRAME_CHANNELS].copy_from_slice(&src[..5]);
        let occupied = src[4] > 0.0;
        occupancy[px] = occupied;
        if occupied {
            source_index[px] = next_index;
            next_index += 1;
        }
        labels[px] = (src[5].round().max(0.0) as usize).min(CLASS_COUNT - 1) as u8;
    }
    Ok(SphericalFrame {
        channels: Tensor::new(vec![h, w, FRAME_CHANNELS], channels)?,
        occupancy,
        source_index,
        labels: Some(labels),
    })
}

/// Packs a frame into the dataset array layout `[h, w, 6]`. The label
/// channel comes from the frame's labels, or zero when absent; occupancy is
/// already encoded by the range channel.
pub fn dataset_from_frame(frame: &SphericalFrame) -> Result<Tensor> {
    let (h, w, _) = frame.channels.dims3()?;
    let cd = frame.channels.data();
    let mut out = vec![0.0f32; h * w * DATASET_CHANNELS];
    for px in 0..h * w {
        out[px * DATASET_CHANNELS..px * DATASET_CHANNELS + FRAME_CHANNELS]
            .copy_from_slice(&cd[px * FRAME_CHANNELS..(px + 1) * FRAME_CHANNELS]);
        if let Some(labels) = &frame.labels {
            out[px * DATASET_CHANNELS + FRAME_CHANNELS] = labels[px] as f32;
        }
    }
    Tensor::new(vec![h, w, DATASET_CHANNELS], out)
}

/// The cloud of occupied pixels, ordered to match the frame's source
/// indices (row-major over occupied pixels).
pub fn frame_cloud(frame: &SphericalFrame) -> PointCloud {
    let cd = frame.channels.data();
    let points = frame
        .occupancy
        .iter()
        .enumerate()
        .filter(|(_, &occ)| occ)
        .map(|(px, _)| {
            let base = px * FRAME_CHANNELS;
            Point {
                x: cd[base],
                y: cd[base + 1],
                z: cd[base + 2],
                intensity: cd[base + 3],
            }
        })
        .collect();
    PointCloud { points }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f32, y: f32, z: f32) -> Point {
        Point {
            x,
            y,
            z,
            intensity: 0.5,
        }
    }

    #[test]
    fn pinned_example_point() {
        let cloud = PointCloud {
            points: vec![pt(10.0, 0.0, 0.0)],
        };
        let cfg = ProjectionConfig::default();
        let frame = project(&cloud, &cfg).unwrap();
        let px = 4 * 512 + 256;
        assert!(frame.occupancy[px]);
        assert_eq!(frame.source_index[px], 0);
        let base = px * FRAME_CHANNELS;
        let ch = &frame.channels.data()[base..base + 5];
        assert_eq!(ch, [10.0, 0.0, 0.0, 0.5, 10.0]);
        assert_eq!(frame.occupancy.iter().filter(|&&o| o).count(), 1);
    }

    #[test]
    fn out_of_span_and_rear_points_are_discarded() {
        let cfg = ProjectionConfig::default();
        // beta = -50 degrees: left of the front-view span.
        let beta: f32 = (-50.0f32).to_radians();
        let side = pt(10.0 * beta.cos(), 10.0 * beta.sin(), 0.0);
        // Rear hemisphere point whose folded beta would land in span.
        let rear = pt(-10.0, 0.0, 0.0);
        // Too far above the vertical span.
        let high = pt(10.0, 0.0, 10.0);
        let keep = pt(10.0, 0.0, 0.0);
        let cloud = PointCloud {
            points: vec![side, rear, high, keep],
        };
        let frame = project(&cloud, &cfg).unwrap();
        assert_eq!(frame.occupancy.iter().filter(|&&o| o).count(), 1);
        assert_eq!(frame.source_index[4 * 512 + 256], 3);
    }

    #[test]
    fn collision_keeps_nearest_point() {
        let cfg = ProjectionConfig::default();
        let cloud = PointCloud {
            points: vec![pt(8.0, 0.0, 0.0), pt(5.0, 0.0, 0.0), pt(9.0, 0.0, 0.0)],
        };
        let frame = project(&cloud, &cfg).unwrap();
        let px = 4 * 512 + 256;
        assert_eq!(frame.source_index[px], 1);
        assert_eq!(frame.channels.data()[px * FRAME_CHANNELS + 4], 5.0);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let cfg = ProjectionConfig::default();
        let err = project(&PointCloud::default(), &cfg).unwrap_err();
        assert!(err.to_string().contains("no projectable points"));
        // A cloud of only origin points is equally unprojectable.
        let origin_only = PointCloud {
            points: vec![pt(0.0, 0.0, 0.0)],
        };
        assert!(project(&origin_only, &cfg).is_err());
    }

    #[test]
    fn stored_channels_are_consistent_with_their_pixel() {
        let cfg = ProjectionConfig::default();
        let mut points = Vec::new();
        for row in (3..60).step_by(7) {
            for col in (10..500).step_by(37) {
                let r = 4.0 + (row * col % 83) as f32;
                points.push(cfg.pixel_center_point(row, col, r, 0.3));
            }
        }
        let frame = project(&PointCloud { points }, &cfg).unwrap();
        let cd = frame.channels.data();
        for px in 0..frame.pixels() {
            if !frame.occupancy[px] {
                assert_eq!(frame.source_index[px], -1);
                continue;
            }
            let base = px * FRAME_CHANNELS;
            let p = Point {
                x: cd[base],
                y: cd[base + 1],
                z: cd[base + 2],
                intensity: cd[base + 3],
            };
            let d = cd[base + 4];
            assert!((d - p.range()).abs() < 1e-4, "range channel mismatch");
            // Re-binning the stored point lands on the same pixel.
            let (alpha, beta, _) = angles_deg(&p).unwrap();
            let (row, col) = cfg.bin(alpha, beta).unwrap();
            assert_eq!(row * cfg.width + col, px);
        }
    }

    #[test]
    fn z_rotation_shifts_columns_by_one() {
        let cfg = ProjectionConfig::default();
        let mut points = Vec::new();
        let mut expected = Vec::new();
        for row in (5..60).step_by(11) {
            for col in (20..490).step_by(53) {
                points.push(cfg.pixel_center_point(row, col, 12.0, 0.4));
                expected.push((row, col));
            }
        }
        let theta = (cfg.delta_beta() as f32).to_radians();
        let rotated: Vec<Point> = points
            .iter()
            .map(|p| Point {
                x: p.x * theta.cos() - p.y * theta.sin(),
                y: p.x * theta.sin() + p.y * theta.cos(),
                z: p.z,
                intensity: p.intensity,
            })
            .collect();
        let frame = project(&PointCloud { points: rotated }, &cfg).unwrap();
        for (i, &(row, col)) in expected.iter().enumerate() {
            let px = row * cfg.width + (col + 1);
            assert_eq!(
                frame.source_index[px], i as i32,
                "point {i} expected at ({row}, {})",
                col + 1
            );
        }
    }

    #[test]
    fn backproject_assigns_pixel_classes_and_background() {
        let cfg = ProjectionConfig::default();
        let points = vec![
            cfg.pixel_center_point(10, 100, 9.0, 0.8),
            cfg.pixel_center_point(10, 101, 9.0, 0.8),
            cfg.pixel_center_point(40, 300, 20.0, 0.2),
            // Collides with point 0 but sits farther away -> loses.
            cfg.pixel_center_point(10, 100, 15.0, 0.8),
            // Discarded: rear hemisphere.
            pt(-5.0, 0.0, 0.0),
        ];
        let cloud = PointCloud { points };
        let frame = project(&cloud, &cfg).unwrap();
        let mut class_map = vec![0u8; frame.pixels()];
        class_map[10 * 512 + 100] = 1;
        class_map[10 * 512 + 101] = 1;
        class_map[40 * 512 + 300] = 2;
        let labeled = backproject(&frame, &class_map, &cloud).unwrap();
        assert_eq!(labeled.labels, vec![1, 1, 2, 0, 0]);
    }

    #[test]
    fn labeled_projection_carries_point_classes() {
        let cfg = ProjectionConfig::default();
        let cloud = LabeledCloud::new(
            PointCloud {
                points: vec![
                    cfg.pixel_center_point(20, 200, 10.0, 0.9),
                    cfg.pixel_center_point(30, 250, 14.0, 0.1),
                ],
            },
            vec![1, 0],
        )
        .unwrap();
        let frame = project_labeled(&cloud, &cfg).unwrap();
        let labels = frame.labels.as_ref().unwrap();
        assert_eq!(labels[20 * 512 + 200], 1);
        assert_eq!(labels[30 * 512 + 250], 0);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 1);
    }

    #[test]
    fn dataset_frame_roundtrips_through_frame_cloud() {
        let cfg = ProjectionConfig::default();
        let (h, w) = (cfg.height, cfg.width);
        let mut data = vec![0.0f32; h * w * DATASET_CHANNELS];
        // Two occupied pixels with labels 1 and 3.
        for (px, label) in [(100usize, 1.0f32), (2000usize, 3.0f32)] {
            let base = px * DATASET_CHANNELS;
            data[base] = 5.0;
            data[base + 3] = 0.7;
            data[base + 4] = 5.0;
            data[base + 5] = label;
        }
        let array = Tensor::new(vec![h, w, DATASET_CHANNELS], data).unwrap();
        let frame = frame_from_dataset(&array, &cfg).unwrap();
        assert_eq!(frame.occupancy.iter().filter(|&&o| o).count(), 2);
        assert_eq!(frame.source_index[100], 0);
        assert_eq!(frame.source_index[2000], 1);
        assert_eq!(frame.labels.as_ref().unwrap()[100], 1);
        assert_eq!(frame.labels.as_ref().unwrap()[2000], 3);

        let cloud = frame_cloud(&frame);
        assert_eq!(cloud.points.len(), 2);
        let mut map = vec![0u8; h * w];
        map[100] = 2;
        let labeled = backproject(&frame, &map, &cloud).unwrap();
        assert_eq!(labeled.labels, vec![2, 0]);
    }

    #[test]
    fn dataset_frame_rejects_wrong_channel_count() {
        let cfg = ProjectionConfig::default();
        let array = Tensor::zeros(vec![cfg.height, cfg.width, 5]);
        let err = frame_from_dataset(&array, &cfg).unwrap_err().to_string();
        assert!(err.contains("5 channels"), "got: {err}");
    }

    #[test]
    fn boundary_angles_clamp_into_frame() {
        let cfg = ProjectionConfig::default();
        // Exactly on azimuth_min: row index would be `height`, clamps to 63.
        assert_eq!(cfg.bin(cfg.azimuth_min as f64, 0.0), Some((63, 256)));
        assert_eq!(cfg.bin(cfg.azimuth_max as f64, 0.0), Some((0, 256)));
        assert_eq!(cfg.bin(0.0, cfg.zenith_max as f64), Some((4, 511)));
        assert_eq!(cfg.bin(0.0, -45.0000001), None);
    }

    #[test]
    fn dataset_array_round_trips_through_a_frame() {
        let cfg = ProjectionConfig {
            height: 8,
            width: 16,
            ..ProjectionConfig::default()
        };
        let frame = crate::synth::scene_frame(3, &cfg).unwrap();
        let array = dataset_from_frame(&frame).unwrap();
        let back = frame_from_dataset(&array, &cfg).unwrap();
        assert_eq!(back.channels, frame.channels);
        assert_eq!(back.occupancy, frame.occupancy);
        assert_eq!(back.labels, frame.labels);
        let again = dataset_from_frame(&back).unwrap();
        assert_eq!(again, array);
    }
}
