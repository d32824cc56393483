//! Procedural stand-in for a KITTI raw tree: a road with boxes and poles,
//! rendered by ray casting for the camera and for a 64-beam LiDAR.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{format_calibration, CalibrationSet, Camera, Image, LidarScan, Roi, Split};
use crate::error::{Error, Result};

pub const WIDTH: usize = 1242;
pub const HEIGHT: usize = 375;
/// Rows kept by the standard crop.
pub const ROI_ROWS: usize = 256;
const DATE: &str = "2011_09_26";
/// Camera height above the road in meters.
const CAMERA_HEIGHT: f64 = 1.65;
const MAX_RANGE: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSpec {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub frames_per_scene: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    /// Sixteen training frames plus four validation and four test frames.
    fn default() -> Self {
        Self {
            train_scenes: 4,
            val_scenes: 1,
            test_scenes: 1,
            frames_per_scene: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub splits: BTreeMap<String, Split>,
    pub camera: Camera,
    pub roi: Roi,
}

/// Calibration of the left color camera from the 2011_09_26 raw recordings.
pub fn kitti_calibration() -> CalibrationSet {
    CalibrationSet {
        r_lidar_to_cam: Matrix3::new(
            7.533745e-03, -9.999714e-01, -6.166020e-04,
            1.480249e-02, 7.280733e-04, -9.998902e-01,
            9.998621e-01, 7.523790e-03, 1.480755e-02,
        ),
        t_lidar_to_cam: Vector3::new(-4.069766e-03, -7.631618e-02, -2.717806e-01),
        r_rect: Matrix3::new(
            9.999239e-01, 9.837760e-03, -7.445048e-03,
            -9.869795e-03, 9.999421e-01, -4.278459e-03,
            7.402527e-03, 4.351614e-03, 9.999631e-01,
        ),
        p_rect: Matrix3x4::new(
            7.215377e+02, 0.0, 6.095593e+02, 4.485728e+01,
            0.0, 7.215377e+02, 1.728540e+02, 2.163791e-01,
            0.0, 0.0, 1.0, 2.745884e-03,
        ),
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Axis-aligned box between two corners.
    Box { lo: Vector3<f64>, hi: Vector3<f64> },
    /// Vertical cylinder from `top` (smaller y) down to the road.
    Pole { x: f64, z: f64, radius: f64, top: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    color: [f64; 3],
    reflectance: f64,
    /// Spatial frequency of the surface pattern.
    pattern: f64,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    point: Vector3<f64>,
    color: [f64; 3],
    reflectance: f64,
    pattern: f64,
}

/// Scene geometry in the rectified camera frame (x right, y down,
/// z forward); the road is the plane `y = CAMERA_HEIGHT`.
struct Scene {
    objects: Vec<Object>,
    sun: Vector3<f64>,
    road_tint: f64,
}

fn hash2(a: i64, b: i64, seed: u64) -> f64 {
    let mut h = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ seed;
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]`.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (ix, iy) = (x.floor(), y.floor());
    let (fx, fy) = (x - ix, y - iy);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (ix, iy) = (ix as i64, iy as i64);
    let top = hash2(ix, iy, seed) * (1.0 - s(fx)) + hash2(ix + 1, iy, seed) * s(fx);
    let bottom = hash2(ix, iy + 1, seed) * (1.0 - s(fx)) + hash2(ix + 1, iy + 1, seed) * s(fx);
    top * (1.0 - s(fy)) + bottom * s(fy)
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut objects = vec![];
        let palette = [[0.75, 0.15, 0.12], [0.15, 0.25, 0.6], [0.85, 0.85, 0.82], [0.1, 0.1, 0.12], [0.55, 0.55, 0.5]];
        // parked and moving cars
        for _ in 0..rng.gen_range(5..9) {
            let lane = [-5.5, -2.0, 2.0, 5.5][rng.gen_range(0..4)];
            let z = rng.gen_range(6.0..70.0);
            let (w, h, l) = (rng.gen_range(1.6..1.9), rng.gen_range(1.3..1.7), rng.gen_range(3.6..4.6));
            objects.push(Object {
                shape: Shape::Box {
                    lo: Vector3::new(lane - w / 2.0, CAMERA_HEIGHT - h, z),
                    hi: Vector3::new(lane + w / 2.0, CAMERA_HEIGHT, z + l),
                },
                color: palette[rng.gen_range(0..palette.len())],
                reflectance: rng.gen_range(0.2..0.6),
                pattern: 0.0,
            });
        }
        // buildings on both sides
        for side in [-1.0f64, 1.0] {
            let mut z = rng.gen_range(-5.0..5.0);
            while z < 110.0 {
                let depth = rng.gen_range(8.0..20.0);
                let near = rng.gen_range(9.0..13.0);
                let h = rng.gen_range(5.0..14.0);
                let x0 = side * near;
                let x1 = side * (near + rng.gen_range(6.0..12.0));
                let tone = rng.gen_range(0.35..0.8);
                objects.push(Object {
                    shape: Shape::Box {
                        lo: Vector3::new(x0.min(x1), CAMERA_HEIGHT - h, z),
                        hi: Vector3::new(x0.max(x1), CAMERA_HEIGHT, z + depth),
                    },
                    color: [tone, tone * rng.gen_range(0.8..1.0), tone * rng.gen_range(0.7..0.95)],
                    reflectance: rng.gen_range(0.1..0.4),
                    pattern: rng.gen_range(0.5..1.5),
                });
                z += depth + rng.gen_range(1.0..6.0);
            }
        }
        // poles and trunks
        for _ in 0..rng.gen_range(6..12) {
            let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            objects.push(Object {
                shape: Shape::Pole {
                    x: side * rng.gen_range(7.0..8.5),
                    z: rng.gen_range(4.0..80.0),
                    radius: rng.gen_range(0.08..0.3),
                    top: CAMERA_HEIGHT - rng.gen_range(3.0..7.0),
                },
                color: [0.3, 0.28, 0.25],
                reflectance: 0.5,
                pattern: 0.0,
            });
        }
        Self {
            objects,
            sun: Vector3::new(rng.gen_range(-0.6..0.6), -1.0, rng.gen_range(-0.2..0.6)).normalize(),
            road_tint: rng.gen_range(0.3..0.42),
        }
    }

    /// The same scene after driving `dz` meters forward.
    fn advanced(&self, dz: f64) -> Self {
        let shift = Vector3::new(0.0, 0.0, dz);
        let objects = self
            .objects
            .iter()
            .map(|o| Object {
                shape: match o.shape {
                    Shape::Box { lo, hi } => Shape::Box {
                        lo: lo - shift,
                        hi: hi - shift,
                    },
                    Shape::Pole { x, z, radius, top } => Shape::Pole {
                        x,
                        z: z - dz,
                        radius,
                        top,
                    },
                },
                ..*o
            })
            .collect();
        Self {
            objects,
            sun: self.sun,
            road_tint: self.road_tint,
        }
    }

    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, offset_z: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, normal: Vector3<f64>, obj: Option<&Object>| {
            if t > 1e-6 && t < MAX_RANGE && best.as_ref().is_none_or(|b| t < b.t) {
                let point = origin + dir * t;
                let hit = match obj {
                    Some(o) => Hit {
                        t,
                        normal,
                        point,
                        color: o.color,
                        reflectance: o.reflectance,
                        pattern: o.pattern,
                    },
                    None => {
                        let (x, z) = (point.x, point.z + offset_z);
                        let road = x.abs() < 7.5;
                        let marking = road && (x.abs() - 3.75).abs() < 0.08 && (z / 3.0).rem_euclid(2.0) < 1.0;
                        let edge = road && (x.abs() - 7.2).abs() < 0.1;
                        let g = self.road_tint;
                        let color = if marking || edge {
                            [0.9, 0.9, 0.85]
                        } else if road {
                            [g, g, g * 1.05]
                        } else {
                            [0.25, 0.45, 0.18]
                        };
                        Hit {
                            t,
                            normal,
                            point,
                            color,
                            reflectance: if marking || edge { 0.8 } else { 0.15 },
                            pattern: if road { 4.0 } else { 2.0 },
                        }
                    }
                };
                best = Some(hit);
            }
        };
        if dir.y > 1e-9 {
            consider((CAMERA_HEIGHT - origin.y) / dir.y, Vector3::new(0.0, -1.0, 0.0), None);
        }
        for o in &self.objects {
            match o.shape {
                Shape::Box { lo, hi } => {
                    if let Some((t, n)) = ray_box(origin, dir, &lo, &hi) {
                        consider(t, n, Some(o));
                    }
                }
                Shape::Pole { x, z, radius, top } => {
                    if let Some((t, n)) = ray_pole(origin, dir, x, z, radius, top) {
                        consider(t, n, Some(o));
                    }
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, offset_z: f64, seed: u64) -> [f64; 3] {
        let lambert = (-hit.normal.dot(&self.sun)).max(0.0);
        let light = 0.45 + 0.55 * lambert;
        let p = hit.point + Vector3::new(0.0, 0.0, offset_z);
        let texture = if hit.pattern > 0.0 {
            let (u, v) = if hit.normal.y.abs() > 0.5 {
                (p.x, p.z)
            } else if hit.normal.x.abs() > 0.5 {
                (p.z, p.y)
            } else {
                (p.x, p.y)
            };
            // windows on facades, grain elsewhere
            let windows = if hit.normal.y.abs() < 0.5 && hit.pattern < 2.0 {
                let (a, b) = ((u * hit.pattern).rem_euclid(1.0), (v * hit.pattern * 0.8).rem_euclid(1.0));
                if a > 0.25 && a < 0.75 && b > 0.3 && b < 0.8 { -0.25 } else { 0.0 }
            } else {
                0.0
            };
            windows + 0.12 * (value_noise(u * hit.pattern, v * hit.pattern, seed) - 0.5)
        } else {
            0.0
        };
        let fog = (-hit.t / 180.0).exp();
        hit.color.map(|c| ((c + texture) * light * fog + 0.75 * (1.0 - fog)).clamp(0.0, 1.0))
    }
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    for i in 0..3 {
        if d[i].abs() < 1e-12 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
        let (a, b) = (a.min(b), a.max(b));
        if a > t0 {
            t0 = a;
            axis = i;
        }
        t1 = t1.min(b);
    }
    if t0 > t1 || t0 <= 0.0 {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = -d[axis].signum();
    Some((t0, n))
}

fn ray_pole(o: &Vector3<f64>, d: &Vector3<f64>, x: f64, z: f64, r: f64, top: f64) -> Option<(f64, Vector3<f64>)> {
    let (ox, oz) = (o.x - x, o.z - z);
    let a = d.x * d.x + d.z * d.z;
    if a < 1e-12 {
        return None;
    }
    let b = 2.0 * (ox * d.x + oz * d.z);
    let c = ox * ox + oz * oz - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    let y = o.y + t * d.y;
    if t <= 0.0 || y < top || y > CAMERA_HEIGHT {
        return None;
    }
    Some((t, Vector3::new(ox + t * d.x, 0.0, oz + t * d.z) / r))
}

fn render_image(scene: &Scene, calib: &CalibrationSet, offset_z: f64, seed: u64) -> Image {
    let p = &calib.p_rect;
    let (fx, fy, cx, cy) = (p[(0, 0)], p[(1, 1)], p[(0, 2)], p[(1, 2)]);
    // camera center in the rectified frame
    let origin = Vector3::new(-p[(0, 3)] / fx, -p[(1, 3)] / fy, -p[(2, 3)]);
    let plane = WIDTH * HEIGHT;
    let mut data = vec![0f32; 3 * plane];
    for v in 0..HEIGHT {
        for u in 0..WIDTH {
            let dir = Vector3::new((u as f64 - cx) / fx, (v as f64 - cy) / fy, 1.0).normalize();
            let rgb = match scene.cast(&origin, &dir, offset_z) {
                Some(hit) => scene.shade(&hit, offset_z, seed),
                None => {
                    let k = (v as f64 / cy).min(1.0);
                    [0.55 + 0.3 * k, 0.7 + 0.2 * k, 0.95]
                }
            };
            let grain = 0.01 * (hash2(u as i64, v as i64, seed ^ offset_z.to_bits()) - 0.5);
            for c in 0..3 {
                data[c * plane + v * WIDTH + u] = (rgb[c] + grain).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(WIDTH, HEIGHT, data)
}

/// 64 beams from +2° to −24.8°, 0.2° azimuth steps over the full turn.
fn render_scan(scene: &Scene, calib: &CalibrationSet, offset_z: f64, rng: &mut ChaCha8Rng) -> LidarScan {
    let to_rect = calib.r_rect * calib.r_lidar_to_cam;
    let origin = calib.r_rect * calib.t_lidar_to_cam;
    let to_velo = to_rect.transpose();
    let mut points = vec![];
    for beam in 0..64 {
        let elev = (2.0 - 26.8 * beam as f64 / 63.0).to_radians();
        for step in 0..1800 {
            let az = (step as f64 * 0.2).to_radians();
            let dir_velo = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let dir = to_rect * dir_velo;
            if let Some(hit) = scene.cast(&origin, &dir, offset_z) {
                let range = hit.t + rng.gen_range(-0.01..0.01);
                let p = to_velo * (dir * range);
                points.push([p.x as f32, p.y as f32, p.z as f32, hit.reflectance as f32]);
            }
        }
    }
    LidarScan { points }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

/// Write a KITTI-layout tree under `root` and return the scene split.
///
/// Scenes are `<DATE>_drive_NNNN_sync`; consecutive frames advance the
/// vehicle by 1.5 m. Output depends only on `spec`.
pub fn generate_fixture(root: &Path, spec: &FixtureSpec) -> Result<Fixture> {
    let calib = kitti_calibration();
    let camera = Camera::Left;
    let date_dir = root.join(DATE);
    let (velo, cam) = format_calibration(&calib, camera);
    write(&date_dir.join("calib_velo_to_cam.txt"), velo.as_bytes())?;
    write(&date_dir.join("calib_cam_to_cam.txt"), cam.as_bytes())?;

    let plan = [
        (Split::Train, spec.train_scenes),
        (Split::Val, spec.val_scenes),
        (Split::Test, spec.test_scenes),
    ];
    let mut splits = BTreeMap::new();
    let mut drive = 0;
    for (split, count) in plan {
        for _ in 0..count {
            drive += 1;
            let scene_id = format!("{DATE}_drive_{drive:04}_sync");
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(drive);
            let base = Scene::random(&mut rng);
            let scene_dir = date_dir.join(&scene_id);
            for frame in 0..spec.frames_per_scene {
                let offset = 1.5 * frame as f64;
                let scene = base.advanced(offset);
                let stem = format!("{frame:010}");
                let image = render_image(&scene, &calib, offset, spec.seed ^ drive);
                let image_path = scene_dir.join(camera.image_dir()).join("data").join(format!("{stem}.png"));
                if let Some(dir) = image_path.parent() {
                    fs::create_dir_all(dir).map_err(Error::io(dir))?;
                }
                image.save_png(&image_path)?;
                let scan = render_scan(&scene, &calib, offset, &mut rng);
                write(
                    &scene_dir.join("velodyne_points").join("data").join(format!("{stem}.bin")),
                    &scan.to_bytes(),
                )?;
            }
            splits.insert(scene_id, split);
        }
    }
    Ok(Fixture {
        splits,
        camera,
        roi: Roi::bottom_band(WIDTH, HEIGHT, ROI_ROWS),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_manifest;
    use crate::projection::{normalize_equalize, project_scan, ProjectionConfig};

    #[test]
    fn calibration_is_valid_and_round_trips() {
        let c = kitti_calibration();
        c.validate().unwrap();
        let (velo, cam) = format_calibration(&c, Camera::Left);
        let back = crate::dataset::parse_calibration(&format!("{velo}\n{cam}"), Camera::Left).unwrap();
        assert!((back.p_rect - c.p_rect).abs().max() < 1e-9);
    }

    #[test]
    fn lidar_hits_land_on_rendered_geometry() {
        let calib = kitti_calibration();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = Scene::random(&mut rng);
        let scan = render_scan(&scene, &calib, 0.0, &mut rng);
        assert!(scan.len() > 50_000, "{}", scan.len());
        let map = project_scan(&scan, &calib, &ProjectionConfig::default());
        let occupied = map.occupied();
        assert!(occupied > 5_000, "{occupied}");
        // projected road points sit at the road's depth along their pixel ray
        let eq = normalize_equalize(&map, &ProjectionConfig::default());
        assert!(eq.values.contains(&255));
    }

    #[test]
    fn small_tree_builds_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            train_scenes: 1,
            val_scenes: 0,
            test_scenes: 1,
            frames_per_scene: 1,
            seed: 3,
        };
        let fx = generate_fixture(dir.path(), &spec).unwrap();
        assert_eq!(fx.splits.len(), 2);
        let m = build_manifest(dir.path(), &fx.splits, fx.camera, fx.roi).unwrap();
        assert_eq!(m[&Split::Train].records.len(), 1);
        assert_eq!(m[&Split::Test].records.len(), 1);
        let pair = m[&Split::Train].records[0].load_pair(Camera::Left).unwrap();
        assert_eq!((pair.image.width, pair.image.height), (WIDTH, HEIGHT));
    }
}
