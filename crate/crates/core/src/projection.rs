//! LiDAR → camera-plane projection and the equalized sparse depth map.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3x4, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationSet, LidarScan, Roi, ScenePair};
use crate::error::{Error, Result};

/// Number of depth bins before equalization (`0..=254`).
pub const DEPTH_BINS: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    /// Depth bins per meter after min subtraction.
    pub scale: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            scale: 3.0,
            width: 1242,
            height: 375,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "projection.scale".into(),
                message: format!("must be positive, got {}", self.scale),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig {
                field: "projection.width/height".into(),
                message: "raster must be non-empty".into(),
            });
        }
        Ok(())
    }
}

/// Forward depth per pixel (0 where no point landed).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub occupancy: Vec<bool>,
}

impl SparseDepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            occupancy: vec![false; width * height],
        }
    }

    pub fn occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }
}

/// 8-bit equalized depth; 0 marks an empty pixel, occupied pixels lie in
/// `1..=255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EqualizedDepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl EqualizedDepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn occupancy(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v != 0).collect()
    }

    pub fn crop(&self, roi: &Roi) -> Result<Self> {
        roi.check(self.width, self.height)?;
        let mut values = Vec::with_capacity(roi.width * roi.height);
        for y in roi.y..roi.y + roi.height {
            let row = y * self.width + roi.x;
            values.extend_from_slice(&self.values[row..row + roi.width]);
        }
        Ok(Self {
            width: roi.width,
            height: roi.height,
            values,
        })
    }

    /// Values scaled by `1/255` into `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.values);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err("not a binary PGM (P5)".into());
        }
        let mut num = |what: &str| -> std::result::Result<usize, String> {
            token()?.parse().map_err(|_| format!("bad {what}"))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let data = bytes.get(pos + 1..).ok_or("missing raster")?;
        if data.len() != width * height {
            return Err(format!("raster has {} bytes, expected {}", data.len(), width * height));
        }
        Ok(Self {
            width,
            height,
            values: data.to_vec(),
        })
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(Error::io(path))
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_pgm(&bytes).map_err(|message| Error::MalformedFile {
            kind: "pgm",
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Homogeneous 4×4 LiDAR-to-camera transform `[R t; 0 1]`.
pub fn assemble_lidar_to_camera(calib: &CalibrationSet) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&calib.r_lidar_to_cam);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&calib.t_lidar_to_cam);
    m
}

/// `P_rect · R_rect · [R t; 0 1]` as one 3×4 matrix.
pub fn composite_projection(calib: &CalibrationSet) -> Matrix3x4<f64> {
    let mut rect = Matrix4::identity();
    rect.fixed_view_mut::<3, 3>(0, 0).copy_from(&calib.r_rect);
    calib.p_rect * rect * assemble_lidar_to_camera(calib)
}

/// Project every point and keep the nearest one per pixel.
///
/// Depth is the homogeneous divisor (the rectified forward coordinate);
/// pixel coordinates are rounded half away from zero.
pub fn project_scan(scan: &LidarScan, calib: &CalibrationSet, cfg: &ProjectionConfig) -> SparseDepthMap {
    let m = composite_projection(calib);
    let mut map = SparseDepthMap::empty(cfg.width, cfg.height);
    for p in &scan.points {
        let h = m * Vector4::new(p[0] as f64, p[1] as f64, p[2] as f64, 1.0);
        let w = h[2];
        if !(w > 0.0) {
            continue;
        }
        let u = (h[0] / w).round();
        let v = (h[1] / w).round();
        if !(u >= 0.0 && v >= 0.0 && u < cfg.width as f64 && v < cfg.height as f64) {
            continue;
        }
        let idx = v as usize * cfg.width + u as usize;
        if !map.occupancy[idx] || w < map.depth[idx] {
            map.occupancy[idx] = true;
            map.depth[idx] = w;
        }
    }
    map
}

/// Min-subtract, bin at `cfg.scale` bins per meter, then histogram-equalize
/// the occupied pixels onto levels `1..=255`.
pub fn normalize_equalize(map: &SparseDepthMap, cfg: &ProjectionConfig) -> EqualizedDepthMap {
    let mut out = EqualizedDepthMap::zeros(map.width, map.height);
    let min = map
        .depth
        .iter()
        .zip(&map.occupancy)
        .filter(|(_, &o)| o)
        .map(|(&d, _)| d)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return out;
    }
    let bin_of = |d: f64| ((d - min) * cfg.scale).round().clamp(0.0, (DEPTH_BINS - 1) as f64) as usize;
    let mut hist = [0usize; DEPTH_BINS];
    for (&d, _) in map.depth.iter().zip(&map.occupancy).filter(|(_, &o)| o) {
        hist[bin_of(d)] += 1;
    }
    let lut = equalization_lut(&hist);
    for ((v, &d), &o) in out.values.iter_mut().zip(&map.depth).zip(&map.occupancy) {
        if o {
            *v = lut[bin_of(d)];
        }
    }
    out
}

/// Cumulative-histogram mapping `1 + round(254·(cdf(b) − cdf_min)/(N − cdf_min))`.
fn equalization_lut(hist: &[usize; DEPTH_BINS]) -> [u8; DEPTH_BINS] {
    let total: usize = hist.iter().sum();
    let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let mut lut = [0u8; DEPTH_BINS];
    let mut cdf = 0usize;
    for (b, &count) in hist.iter().enumerate() {
        cdf += count;
        lut[b] = if total == cdf_min {
            255
        } else {
            let frac = (cdf.saturating_sub(cdf_min)) as f64 / (total - cdf_min) as f64;
            1 + (254.0 * frac).round() as u8
        };
    }
    lut
}

/// Project, equalize over the whole raster, then crop to the pair's window.
pub fn pair_depth(pair: &ScenePair, cfg: &ProjectionConfig) -> Result<EqualizedDepthMap> {
    let full = normalize_equalize(&project_scan(&pair.scan, &pair.calib, cfg), cfg);
    let out = match &pair.roi {
        Some(roi) => full.crop(roi)?,
        None => full,
    };
    if (out.width, out.height) != (pair.image.width, pair.image.height) {
        return Err(Error::Shape(format!(
            "depth raster {}×{} does not match image {}×{}",
            out.width, out.height, pair.image.width, pair.image.height
        )));
    }
    Ok(out)
}

/// Snap coordinates to voxel centers `(k + ½)·voxel` and merge points that
/// share a voxel, averaging reflectance. Output keeps first-occurrence order.
pub fn degrade_scan(scan: &LidarScan, voxel: f64) -> LidarScan {
    assert!(voxel > 0.0, "voxel edge must be positive");
    let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
    let mut acc: Vec<([i64; 3], f64, usize)> = Vec::new();
    for p in &scan.points {
        let key = [0, 1, 2].map(|i| (p[i] as f64 / voxel).floor() as i64);
        match slots.get(&key) {
            Some(&i) => {
                acc[i].1 += p[3] as f64;
                acc[i].2 += 1;
            }
            None => {
                slots.insert(key, acc.len());
                acc.push((key, p[3] as f64, 1));
            }
        }
    }
    let points = acc
        .into_iter()
        .map(|(k, refl, n)| {
            let c = |i: usize| ((k[i] as f64 + 0.5) * voxel) as f32;
            [c(0), c(1), c(2), (refl / n as f64) as f32]
        })
        .collect();
    LidarScan { points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{parse_calibration, Camera};
    use nalgebra::{Matrix3, Vector3};

    fn pinhole(f: f64, cx: f64, cy: f64) -> CalibrationSet {
        CalibrationSet {
            r_lidar_to_cam: Matrix3::identity(),
            t_lidar_to_cam: Vector3::zeros(),
            r_rect: Matrix3::identity(),
            p_rect: Matrix3x4::new(f, 0.0, cx, 0.0, 0.0, f, cy, 0.0, 0.0, 0.0, 1.0, 0.0),
        }
    }

    fn cfg(w: usize, h: usize) -> ProjectionConfig {
        ProjectionConfig {
            scale: 3.0,
            width: w,
            height: h,
        }
    }

    fn scan(points: &[[f32; 4]]) -> LidarScan {
        LidarScan {
            points: points.to_vec(),
        }
    }

    #[test]
    fn identity_and_translation_transforms() {
        let mut c = pinhole(1.0, 0.0, 0.0);
        assert_eq!(assemble_lidar_to_camera(&c), Matrix4::identity());
        c.t_lidar_to_cam = Vector3::new(1.0, 2.0, 3.0);
        let mut expect = Matrix4::identity();
        expect[(0, 3)] = 1.0;
        expect[(1, 3)] = 2.0;
        expect[(2, 3)] = 3.0;
        assert_eq!(assemble_lidar_to_camera(&c), expect);
    }

    #[test]
    fn principal_point_ray() {
        let map = project_scan(&scan(&[[0.0, 0.0, 5.0, 1.0]]), &pinhole(700.0, 60.0, 40.0), &cfg(120, 80));
        assert_eq!(map.occupied(), 1);
        assert!(map.occupancy[40 * 120 + 60]);
        assert_eq!(map.depth[40 * 120 + 60], 5.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let map = project_scan(&scan(&[[0.0, 0.0, -1.0, 1.0]]), &pinhole(700.0, 60.0, 40.0), &cfg(120, 80));
        assert_eq!(map.occupied(), 0);
    }

    #[test]
    fn nearest_point_wins() {
        let pts = [[0.0, 0.0, 5.0, 1.0], [0.0, 0.0, 3.0, 1.0], [0.0, 0.0, 4.0, 1.0]];
        let map = project_scan(&scan(&pts), &pinhole(700.0, 60.0, 40.0), &cfg(120, 80));
        assert_eq!(map.depth[40 * 120 + 60], 3.0);
    }

    #[test]
    fn half_pixel_rounds_away_from_zero() {
        // u = 10 · 0.25 / 1 + 0 = 2.5 → 3.
        let map = project_scan(&scan(&[[0.25, 0.0, 1.0, 0.0]]), &pinhole(10.0, 0.0, 0.0), &cfg(8, 8));
        assert!(map.occupancy[3]);
    }

    #[test]
    fn kitti_like_calibration_projects_forward_points() {
        let text = "\
R: 7.533745e-03 -9.999714e-01 -6.166020e-04 1.480249e-02 7.280733e-04 -9.998902e-01 9.998621e-01 7.523790e-03 1.480755e-02
T: -4.069766e-03 -7.631618e-02 -2.717806e-01
R_rect_00: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
P_rect_02: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
";
        let calib = parse_calibration(text, Camera::Left).unwrap();
        // Ten meters ahead of the sensor, near the image center.
        let map = project_scan(&scan(&[[10.0, 0.0, 0.0, 0.3]]), &calib, &ProjectionConfig::default());
        assert_eq!(map.occupied(), 1);
        let idx = map.occupancy.iter().position(|&o| o).unwrap();
        let (u, v) = (idx % 1242, idx / 1242);
        assert!((600..640).contains(&u) && (160..200).contains(&v), "{u},{v}");
    }

    #[test]
    fn single_depth_equalizes_to_top_level() {
        let mut map = SparseDepthMap::empty(4, 4);
        for i in [1, 5, 9] {
            map.occupancy[i] = true;
            map.depth[i] = 12.5;
        }
        let eq = normalize_equalize(&map, &cfg(4, 4));
        for (i, &v) in eq.values.iter().enumerate() {
            assert_eq!(v, if map.occupancy[i] { 255 } else { 0 });
        }
    }

    #[test]
    fn empty_map_equalizes_to_zeros() {
        let eq = normalize_equalize(&SparseDepthMap::empty(5, 3), &cfg(5, 3));
        assert_eq!(eq, EqualizedDepthMap::zeros(5, 3));
    }

    #[test]
    fn two_bins_span_full_range() {
        let mut map = SparseDepthMap::empty(2, 1);
        map.occupancy = vec![true, true];
        map.depth = vec![5.0, 50.0];
        assert_eq!(normalize_equalize(&map, &cfg(2, 1)).values, vec![1, 255]);
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let eq = EqualizedDepthMap {
            width: 3,
            height: 2,
            values: vec![0, 1, 2, 255, 10, 0],
        };
        assert_eq!(EqualizedDepthMap::from_pgm(&eq.to_pgm()).unwrap(), eq);
        let mut commented = b"P5\n# depth\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&eq.values);
        assert_eq!(EqualizedDepthMap::from_pgm(&commented).unwrap(), eq);
        assert!(EqualizedDepthMap::from_pgm(b"P5\n3 2\n255\n\x00").is_err());
        assert!(EqualizedDepthMap::from_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn crop_matches_image_window() {
        let eq = EqualizedDepthMap {
            width: 4,
            height: 3,
            values: (0..12).collect(),
        };
        let c = eq
            .crop(&Roi {
                x: 1,
                y: 1,
                width: 2,
                height: 2,
            })
            .unwrap();
        assert_eq!(c.values, vec![5, 6, 9, 10]);
    }

    #[test]
    fn tiny_voxel_leaves_integer_points() {
        let s = scan(&[[1.0, -2.0, 50.0, 0.5], [3.0, 4.0, -7.0, 0.25]]);
        let d = degrade_scan(&s, 1e-6);
        assert_eq!(d.len(), 2);
        for (a, b) in s.points.iter().zip(&d.points) {
            for i in 0..4 {
                assert!((a[i] - b[i]).abs() <= 1e-6, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn close_points_merge() {
        let d = degrade_scan(&scan(&[[0.2, 0.3, 0.4, 0.2], [0.21, 0.3, 0.4, 0.6]]), 1.0);
        assert_eq!(d.points, vec![[0.5, 0.5, 0.5, 0.4]]);
    }
}
