//! Seeded synthetic road scenes for tests and benchmarks.
//!
//! Each scene is a flat ground plane plus three objects (a car box, a
//! pedestrian cylinder, a cyclist box) at seeded poses. Points are produced
//! by casting one ray through every frame pixel center and keeping the
//! nearest surface hit, so the generated cloud projects back onto exactly
//! the pixels it was cast from and the ground points lie exactly on the
//! plane unless range jitter is requested.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::projection::{LabeledCloud, Point, PointCloud, ProjectionConfig, SphericalFrame};
use crate::{projection, Result};

/// Ground height relative to the sensor.
pub const GROUND_Z: f32 = -1.7;

const RANGE_MIN: f64 = 2.0;
const RANGE_MAX: f64 = 70.0;

struct Box3 {
    min: [f64; 3],
    max: [f64; 3],
    intensity: f32,
    label: u8,
}

impl Box3 {
    /// Slab-method ray intersection from the origin; returns the entry
    /// distance along the unit direction.
    #[allow(clippy::needless_range_loop)]
    fn hit(&self, d: [f64; 3]) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            if d[axis].abs() < 1e-12 {
                if 0.0 < self.min[axis] || 0.0 > self.max[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[axis];
            let (mut near, mut far) = (self.min[axis] * inv, self.max[axis] * inv);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 0.0).then_some(t0)
    }
}

struct Cylinder {
    cx: f64,
    cy: f64,
    radius: f64,
    z0: f64,
    z1: f64,
    intensity: f32,
    label: u8,
}

impl Cylinder {
    /// Nearest side-wall intersection of an origin ray with the vertical
    /// cylinder.
    fn hit(&self, d: [f64; 3]) -> Option<f64> {
        let a = d[0] * d[0] + d[1] * d[1];
        if a < 1e-12 {
            return None;
        }
        let b = -2.0 * (d[0] * self.cx + d[1] * self.cy);
        let c = self.cx * self.cx + self.cy * self.cy - self.radius * self.radius;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let t = (-b - disc.sqrt()) / (2.0 * a);
        if t <= 0.0 {
            return None;
        }
        let z = d[2] * t;
        (z >= self.z0 && z <= self.z1).then_some(t)
    }
}

struct Scene {
    boxes: Vec<Box3>,
    cylinder: Cylinder,
}

fn upright_box(cx: f64, cy: f64, len: f64, wid: f64, height: f64, intensity: f32, label: u8) -> Box3 {
    Box3 {
        min: [cx - len / 2.0, cy - wid / 2.0, GROUND_Z as f64],
        max: [cx + len / 2.0, cy + wid / 2.0, GROUND_Z as f64 + height],
        intensity,
        label,
    }
}

fn build_scene(rng: &mut ChaCha8Rng) -> Scene {
    // Disjoint lateral bands keep the three objects from overlapping.
    let car_x = rng.gen_range(8.0..18.0);
    let car_y = rng.gen_range(-7.0..-2.5);
    let ped_x = rng.gen_range(6.0..14.0);
    let ped_y = rng.gen_range(-0.5..2.0);
    let cyc_x = rng.gen_range(7.0..16.0);
    let cyc_y = rng.gen_range(3.5..7.0);
    Scene {
        boxes: vec![
            upright_box(car_x, car_y, 4.2, 1.8, 1.5, 0.8, 1),
            upright_box(cyc_x, cyc_y, 1.8, 0.6, 1.6, 0.6, 3),
        ],
        cylinder: Cylinder {
            cx: ped_x,
            cy: ped_y,
            radius: 0.3,
            z0: GROUND_Z as f64,
            z1: GROUND_Z as f64 + 1.7,
            intensity: 0.45,
            label: 2,
        },
    }
}

/// Nearest hit along a unit direction: objects first, else the ground
/// plane, within the sensor's usable range band.
fn cast(scene: &Scene, d: [f64; 3]) -> Option<(f64, f32, u8)> {
    let mut best: Option<(f64, f32, u8)> = None;
    let mut consider = |t: f64, intensity: f32, label: u8| {
        if !(RANGE_MIN..=RANGE_MAX).contains(&t) {
            return;
        }
        if best.is_none_or(|(bt, _, _)| t < bt) {
            best = Some((t, intensity, label));
        }
    };
    for b in &scene.boxes {
        if let Some(t) = b.hit(d) {
            consider(t, b.intensity, b.label);
        }
    }
    if let Some(t) = scene.cylinder.hit(d) {
        consider(t, scene.cylinder.intensity, scene.cylinder.label);
    }
    if d[2] < -1e-9 {
        consider(GROUND_Z as f64 / d[2], 0.2, 0);
    }
    best
}

/// Generates a labeled scene cloud. `range_jitter` perturbs every hit
/// distance by a uniform offset in `[-range_jitter, +range_jitter]` meters
/// along its ray; zero keeps ground points exactly on the plane.
pub fn scene_cloud_with_jitter(
    seed: u64,
    cfg: &ProjectionConfig,
    range_jitter: f32,
) -> LabeledCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = build_scene(&mut rng);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let alpha = (cfg.azimuth_max as f64 - (row as f64 + 0.5) * cfg.delta_alpha())
                .to_radians();
            let beta =
                (cfg.zenith_min as f64 + (col as f64 + 0.5) * cfg.delta_beta()).to_radians();
            let d = [
                alpha.cos() * beta.cos(),
                alpha.cos() * beta.sin(),
                alpha.sin(),
            ];
            let Some((t, base_intensity, label)) = cast(&scene, d) else {
                continue;
            };
            let t = if range_jitter > 0.0 {
                t + rng.gen_range(-range_jitter as f64..=range_jitter as f64)
            } else {
                t
            };
            let intensity = (base_intensity + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
            points.push(Point {
                x: (d[0] * t) as f32,
                y: (d[1] * t) as f32,
                z: (d[2] * t) as f32,
                intensity,
            });
            labels.push(label);
        }
    }
    LabeledCloud::new(PointCloud { points }, labels)
        .expect("generator emits one label per point")
}

/// Noiseless seeded scene.
pub fn scene_cloud(seed: u64, cfg: &ProjectionConfig) -> LabeledCloud {
    scene_cloud_with_jitter(seed, cfg, 0.0)
}

/// Seeded scene projected into a labeled spherical frame.
pub fn scene_frame(seed: u64, cfg: &ProjectionConfig) -> Result<SphericalFrame> {
    projection::project_labeled(&scene_cloud(seed, cfg), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_contains_all_classes_and_exact_ground() {
        let cfg = ProjectionConfig::default();
        let scene = scene_cloud(3, &cfg);
        let mut counts = [0usize; 4];
        for &l in &scene.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 20), "class counts {counts:?}");
        for (p, &l) in scene.cloud.points.iter().zip(&scene.labels) {
            if l == 0 {
                assert!(
                    (p.z - GROUND_Z).abs() < 1e-4,
                    "ground point off plane: z = {}",
                    p.z
                );
            }
        }
    }

    #[test]
    fn scene_is_deterministic_per_seed() {
        let cfg = ProjectionConfig::default();
        let a = scene_cloud(11, &cfg);
        let b = scene_cloud(11, &cfg);
        assert_eq!(a.cloud.points, b.cloud.points);
        assert_eq!(a.labels, b.labels);
        let c = scene_cloud(12, &cfg);
        assert_ne!(a.cloud.points, c.cloud.points);
    }

    #[test]
    fn scene_projects_onto_cast_pixels() {
        let cfg = ProjectionConfig::default();
        let scene = scene_cloud(5, &cfg);
        let frame = scene_frame(5, &cfg).unwrap();
        // Ray casting emits at most one point per pixel, so projection
        // loses nothing: every point owns its pixel.
        let occupied = frame.occupancy.iter().filter(|&&o| o).count();
        assert_eq!(occupied, scene.len());
        let labels = frame.labels.as_ref().unwrap();
        let fg = labels.iter().filter(|&&l| l != 0).count();
        assert!(fg > 100, "foreground pixels: {fg}");
    }

    #[test]
    fn jitter_moves_points_off_the_plane_but_keeps_pixels() {
        let cfg = ProjectionConfig::default();
        let clean = scene_cloud(7, &cfg);
        let noisy = scene_cloud_with_jitter(7, &cfg, 0.05);
        assert_eq!(clean.len(), noisy.len());
        let off_plane = noisy
            .cloud
            .points
            .iter()
            .zip(&noisy.labels)
            .filter(|(p, &l)| l == 0 && (p.z - GROUND_Z).abs() > 1e-4)
            .count();
        assert!(off_plane > 100, "jitter had no effect: {off_plane}");
    }
}
