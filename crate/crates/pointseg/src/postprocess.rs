//! Ground-plane refinement of predicted point labels.
//!
//! Segmentation networks occasionally smear foreground classes onto road
//! pixels. A RANSAC plane fit over the scan geometry recovers the ground
//! surface; foreground points lying on it are demoted to background.
//! The pass only ever demotes labels, so a clean prediction survives it
//! unchanged, and re-running it is a no-op because the geometry (and with
//! it the fitted plane) does not change.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::projection::{LabeledCloud, Point, PointCloud};

/// Plane `normal . p + offset = 0` with a unit normal oriented upward
/// (positive z component) so equal planes compare equal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneModel {
    pub normal: [f32; 3],
    pub offset: f32,
}

impl PlaneModel {
    pub fn distance(&self, p: &Point) -> f32 {
        (self.normal[0] * p.x + self.normal[1] * p.y + self.normal[2] * p.z + self.offset).abs()
    }

    /// Angle in degrees between this plane's normal and another direction.
    pub fn normal_angle_deg(&self, dir: [f32; 3]) -> f32 {
        let dot = self.normal[0] * dir[0] + self.normal[1] * dir[1] + self.normal[2] * dir[2];
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        (dot / n).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier distance threshold in meters.
    pub threshold: f32,
    /// Minimum fraction of all points the winning plane must explain.
    pub min_inlier_fraction: f32,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 100,
            threshold: 0.15,
            min_inlier_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Plane through three points, or `None` when they are (near) collinear.
fn plane_from_triple(a: &Point, b: &Point, c: &Point) -> Option<PlaneModel> {
    let u = [
        (b.x - a.x) as f64,
        (b.y - a.y) as f64,
        (b.z - a.z) as f64,
    ];
    let v = [
        (c.x - a.x) as f64,
        (c.y - a.y) as f64,
        (c.z - a.z) as f64,
    ];
    let mut n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if norm < 1e-9 {
        return None;
    }
    for x in &mut n {
        *x /= norm;
    }
    // Canonical orientation: normal points up, falling back to the first
    // nonzero component for vertical planes.
    let flip = if n[2] != 0.0 {
        n[2] < 0.0
    } else if n[0] != 0.0 {
        n[0] < 0.0
    } else {
        n[1] < 0.0
    };
    if flip {
        for x in &mut n {
            *x = -*x;
        }
    }
    let offset = -(n[0] * a.x as f64 + n[1] * a.y as f64 + n[2] * a.z as f64);
    Some(PlaneModel {
        normal: [n[0] as f32, n[1] as f32, n[2] as f32],
        offset: offset as f32,
    })
}

/// Fits a plane by RANSAC over all points. Hypotheses come from seeded
/// random triples; the winner is the hypothesis with the most inliers,
/// earliest iteration breaking ties. Fails when the cloud has fewer than
/// three points or no hypothesis reaches the support floor.
pub fn ransac_plane(cloud: &PointCloud, cfg: &RansacConfig) -> Result<PlaneModel> {
    let n = cloud.points.len();
    if n < 3 {
        return Err(Error::Degenerate(format!(
            "plane fit needs at least 3 points, got {n}"
        )));
    }
    if cfg.iterations == 0 {
        return Err(Error::Config("plane fit needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Draw every sample triple up front so the consumed random stream
    // depends only on the configuration, not on evaluation order.
    let triples: Vec<[usize; 3]> = (0..cfg.iterations)
        .map(|_| [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)])
        .collect();

    let mut best: Option<(usize, PlaneModel)> = None;
    for t in &triples {
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            continue;
        }
        let Some(plane) = plane_from_triple(
            &cloud.points[t[0]],
            &cloud.points[t[1]],
            &cloud.points[t[2]],
        ) else {
            continue;
        };
        let inliers = cloud
            .points
            .iter()
            .filter(|p| plane.distance(p) <= cfg.threshold)
            .count();
        if best.is_none_or(|(bc, _)| inliers > bc) {
            best = Some((inliers, plane));
        }
    }

    let Some((count, plane)) = best else {
        return Err(Error::Degenerate(
            "no valid plane hypothesis (all sample triples degenerate)".into(),
        ));
    };
    let needed = (cfg.min_inlier_fraction as f64 * n as f64).ceil() as usize;
    if count < needed.max(3) {
        return Err(Error::Degenerate(format!(
            "best plane explains {count} of {n} points, below the support floor of {needed}"
        )));
    }
    Ok(plane)
}

/// Outcome of the ground refinement pass.
#[derive(Clone, Debug)]
pub struct RefineResult {
    pub cloud: LabeledCloud,
    /// The fitted ground plane, absent when the fit failed.
    pub plane: Option<PlaneModel>,
    /// Foreground points demoted to background.
    pub relabeled: usize,
    /// True when the plane fit failed and labels were passed through.
    pub fallback: bool,
}

/// Demotes foreground labels on ground-plane inliers. A failed plane fit
/// is not an error: the input labels pass through and `fallback` is set
/// so callers can warn.
pub fn refine_ground(labeled: &LabeledCloud, cfg: &RansacConfig) -> RefineResult {
    let plane = match ransac_plane(&labeled.cloud, cfg) {
        Ok(p) => p,
        Err(_) => {
            return RefineResult {
                cloud: labeled.clone(),
                plane: None,
                relabeled: 0,
                fallback: true,
            }
        }
    };
    let mut labels = labeled.labels.clone();
    let mut relabeled = 0;
    for (p, l) in labeled.cloud.points.iter().zip(&mut labels) {
        if *l != 0 && plane.distance(p) <= cfg.threshold {
            *l = 0;
            relabeled += 1;
        }
    }
    RefineResult {
        cloud: LabeledCloud::new(labeled.cloud.clone(), labels)
            .expect("label vector length is preserved"),
        plane: Some(plane),
        relabeled,
        fallback: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ProjectionConfig;
    use crate::synth;

    fn grid_plane(nx: usize, ny: usize, z: f32) -> Vec<Point> {
        let mut pts = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                pts.push(Point {
                    x: 2.0 + i as f32 * 0.5,
                    y: -10.0 + j as f32 * 0.5,
                    z,
                    intensity: 0.2,
                });
            }
        }
        pts
    }

    #[test]
    fn recovers_exact_plane() {
        let cloud = PointCloud {
            points: grid_plane(20, 20, -1.7),
        };
        let plane = ransac_plane(&cloud, &RansacConfig::default()).unwrap();
        assert!(plane.normal_angle_deg([0.0, 0.0, 1.0]) < 0.01);
        assert!((plane.offset - 1.7).abs() < 1e-4);
    }

    #[test]
    fn tolerates_ten_percent_outliers() {
        let mut points = grid_plane(15, 12, -1.7);
        let n_out = points.len() / 9;
        for k in 0..n_out {
            points.push(Point {
                x: 5.0 + k as f32 * 0.3,
                y: 1.0,
                z: 3.0 + (k % 7) as f32,
                intensity: 0.9,
            });
        }
        let plane = ransac_plane(&PointCloud { points }, &RansacConfig::default()).unwrap();
        assert!(plane.normal_angle_deg([0.0, 0.0, 1.0]) < 0.5);
        assert!((plane.offset - 1.7).abs() < 0.05);
    }

    #[test]
    fn too_few_points_is_degenerate() {
        let cloud = PointCloud {
            points: grid_plane(1, 2, 0.0),
        };
        let err = ransac_plane(&cloud, &RansacConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn scattered_cloud_fails_the_support_floor() {
        // Points spread over a tall helix: no plane explains 20 percent.
        let points: Vec<Point> = (0..200)
            .map(|k| {
                let t = k as f32 * 0.7;
                Point {
                    x: 10.0 + 8.0 * t.cos(),
                    y: 8.0 * t.sin(),
                    z: -20.0 + 0.2 * k as f32,
                    intensity: 0.1,
                }
            })
            .collect();
        let err = ransac_plane(&PointCloud { points }, &RansacConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn mislabeled_ground_points_are_demoted() {
        let cfg = ProjectionConfig::default();
        let scene = synth::scene_cloud(21, &cfg);
        // Corrupt some ground labels to "car".
        let mut labels = scene.labels.clone();
        let mut corrupted = Vec::new();
        for (i, (p, l)) in scene.cloud.points.iter().zip(&mut labels).enumerate() {
            if *l == 0 && (p.z - synth::GROUND_Z).abs() < 1e-4 && i % 17 == 0 {
                *l = 1;
                corrupted.push(i);
            }
        }
        assert!(corrupted.len() > 20);
        let noisy = LabeledCloud::new(scene.cloud.clone(), labels).unwrap();
        let result = refine_ground(&noisy, &RansacConfig::default());
        assert!(!result.fallback);
        assert!(result.relabeled >= corrupted.len());
        for &i in &corrupted {
            assert_eq!(result.cloud.labels[i], 0);
        }
    }

    #[test]
    fn refinement_is_idempotent_and_never_promotes() {
        let cfg = ProjectionConfig::default();
        let scene = synth::scene_cloud(33, &cfg);
        let ransac = RansacConfig::default();
        let once = refine_ground(&scene, &ransac);
        let twice = refine_ground(&once.cloud, &ransac);
        assert_eq!(twice.relabeled, 0);
        assert_eq!(once.cloud.labels, twice.cloud.labels);
        // Background labels never turn into foreground.
        for (before, after) in scene.labels.iter().zip(&once.cloud.labels) {
            if *before == 0 {
                assert_eq!(*after, 0);
            }
        }
    }

    #[test]
    fn failed_fit_passes_labels_through() {
        let cloud = PointCloud {
            points: vec![
                Point { x: 1.0, y: 0.0, z: 0.0, intensity: 0.5 },
                Point { x: 2.0, y: 0.0, z: 0.0, intensity: 0.5 },
            ],
        };
        let labeled = LabeledCloud::new(cloud, vec![1, 2]).unwrap();
        let result = refine_ground(&labeled, &RansacConfig::default());
        assert!(result.fallback);
        assert!(result.plane.is_none());
        assert_eq!(result.cloud.labels, vec![1, 2]);
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let cfg = ProjectionConfig::default();
        let scene = synth::scene_cloud_with_jitter(2, &cfg, 0.05);
        let ransac = RansacConfig::default();
        let a = ransac_plane(&scene.cloud, &ransac).unwrap();
        let b = ransac_plane(&scene.cloud, &ransac).unwrap();
        assert_eq!(a, b);
    }
}
