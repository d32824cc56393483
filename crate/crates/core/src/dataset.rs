//! KITTI-raw ingestion: calibration, Velodyne scans, images, and split
//! manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|RᵀR − I|∞` and `|det R − 1|` for calibration rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-3;

/// Color camera whose rectified projection the depth maps align with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Camera {
    /// `image_02`, `P_rect_02`.
    #[default]
    Left,
    /// `image_03`, `P_rect_03`.
    Right,
}

impl Camera {
    pub fn index(self) -> u8 {
        match self {
            Camera::Left => 2,
            Camera::Right => 3,
        }
    }

    pub fn image_dir(self) -> String {
        format!("image_{:02}", self.index())
    }

    fn projection_key(self) -> String {
        format!("P_rect_{:02}", self.index())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub r_lidar_to_cam: Matrix3<f64>,
    pub t_lidar_to_cam: Vector3<f64>,
    pub r_rect: Matrix3<f64>,
    pub p_rect: Matrix3x4<f64>,
}

impl CalibrationSet {
    pub fn validate(&self) -> Result<()> {
        check_rotation("R", &self.r_lidar_to_cam)?;
        check_rotation("R_rect_00", &self.r_rect)?;
        if self.p_rect[(2, 2)] == 0.0 {
            return Err(Error::MalformedCalibration("P_rect[2][2] is zero".into()));
        }
        Ok(())
    }
}

fn check_rotation(name: &'static str, r: &Matrix3<f64>) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    if !(ortho < ROTATION_TOLERANCE && det < ROTATION_TOLERANCE) {
        return Err(Error::InvalidRotation {
            name,
            detail: format!("|RᵀR − I|∞ = {ortho:.3e}, |det − 1| = {det:.3e}"),
        });
    }
    Ok(())
}

/// Parse KITTI raw calibration text (`calib_velo_to_cam.txt` followed by
/// `calib_cam_to_cam.txt`, or any text carrying the keys `R`, `T`,
/// `R_rect_00` and the camera's `P_rect_0X`).
pub fn parse_calibration(text: &str, camera: Camera) -> Result<CalibrationSet> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let key = key.trim();
        // Non-numeric entries such as `calib_time` are skipped.
        let nums: std::result::Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse).collect();
        if let Ok(nums) = nums {
            values.insert(key, nums);
        }
    }
    let take = |key: &str, len: usize| -> Result<&[f64]> {
        let v = values
            .get(key)
            .ok_or_else(|| Error::MalformedCalibration(format!("missing key `{key}`")))?;
        if v.len() != len {
            return Err(Error::MalformedCalibration(format!(
                "`{key}` has {} values, expected {len}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::MalformedCalibration(format!("`{key}` is not finite")));
        }
        Ok(v)
    };
    let calib = CalibrationSet {
        r_lidar_to_cam: Matrix3::from_row_slice(take("R", 9)?),
        t_lidar_to_cam: Vector3::from_row_slice(take("T", 3)?),
        r_rect: Matrix3::from_row_slice(take("R_rect_00", 9)?),
        p_rect: Matrix3x4::from_row_slice(take(&camera.projection_key(), 12)?),
    };
    calib.validate()?;
    Ok(calib)
}

/// Format calibration back into the two KITTI files' key/value lines.
pub fn format_calibration(calib: &CalibrationSet, camera: Camera) -> (String, String) {
    let row = |vals: &[f64]| vals.iter().map(|v| format!("{v:.12e}")).collect::<Vec<_>>().join(" ");
    let rows3 = |m: &Matrix3<f64>| row(m.transpose().as_slice());
    let velo = format!(
        "calib_time: synthetic\nR: {}\nT: {}\n",
        rows3(&calib.r_lidar_to_cam),
        row(calib.t_lidar_to_cam.as_slice())
    );
    let cam = format!(
        "calib_time: synthetic\nR_rect_00: {}\n{}: {}\n",
        rows3(&calib.r_rect),
        camera.projection_key(),
        row(calib.p_rect.transpose().as_slice())
    );
    (velo, cam)
}

/// Velodyne sweep as `(x, y, z, reflectance)` rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarScan {
    pub points: Vec<[f32; 4]>,
}

impl LidarScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Packed little-endian `f32 × 4` records, the KITTI `.bin` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.points
            .iter()
            .flat_map(|p| p.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

pub fn load_lidar_scan(bytes: &[u8]) -> Result<LidarScan> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::MalformedScan { len: bytes.len() });
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(LidarScan { points })
}

/// Planar RGB raster with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `3 × height × width`, channel-major.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        Self { width, height, data }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px.0[c] as f32 / 255.0;
            }
        }
        Ok(Self::new(w, h, data))
    }

    /// Write as 8-bit PNG, rounding to the nearest level.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let plane = self.width * self.height;
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = (self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn crop(&self, roi: &Roi) -> Result<Self> {
        roi.check(self.width, self.height)?;
        let mut data = Vec::with_capacity(3 * roi.width * roi.height);
        for c in 0..3 {
            for y in roi.y..roi.y + roi.height {
                let row = c * self.width * self.height + y * self.width;
                data.extend_from_slice(&self.data[row + roi.x..row + roi.x + roi.width]);
            }
        }
        Ok(Self::new(roi.width, roi.height, data))
    }
}

/// Crop rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl fmt::Display for Roi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}+{}+{}", self.width, self.height, self.x, self.y)
    }
}

impl Roi {
    /// Full-width band of `band` rows at the bottom of a frame.
    pub fn bottom_band(width: usize, height: usize, band: usize) -> Self {
        Self {
            x: 0,
            y: height.saturating_sub(band),
            width,
            height: band.min(height),
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            width,
            height,
        }
    }

    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.x + self.width > width || self.y + self.height > height {
            return Err(Error::RoiOutOfBounds {
                roi: self.to_string(),
                width,
                height,
            });
        }
        Ok(())
    }
}

/// One synchronized camera/LiDAR frame.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub image: Image,
    pub scan: LidarScan,
    pub calib: CalibrationSet,
    pub frame_id: String,
    pub scene_id: String,
    /// Crop applied to `image`; the depth raster must be cropped identically.
    pub roi: Option<Roi>,
}

/// Crop the image of `pair` and record the window for the depth map.
pub fn crop_roi(pair: &ScenePair, roi: Roi) -> Result<ScenePair> {
    let image = pair.image.crop(&roi)?;
    Ok(ScenePair {
        image,
        roi: Some(roi),
        ..pair.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// On-disk locations of one frame's modalities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub scene_id: String,
    pub frame_id: String,
    pub image: PathBuf,
    pub scan: PathBuf,
    pub calib_velo_to_cam: PathBuf,
    pub calib_cam_to_cam: PathBuf,
    /// Equalized depth map (PGM), filled in once projected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
}

impl FrameRecord {
    pub fn load_calibration(&self, camera: Camera) -> Result<CalibrationSet> {
        let mut text = fs::read_to_string(&self.calib_velo_to_cam).map_err(Error::io(&self.calib_velo_to_cam))?;
        text.push('\n');
        text += &fs::read_to_string(&self.calib_cam_to_cam).map_err(Error::io(&self.calib_cam_to_cam))?;
        parse_calibration(&text, camera)
    }

    pub fn load_scan(&self) -> Result<LidarScan> {
        load_lidar_scan(&fs::read(&self.scan).map_err(Error::io(&self.scan))?)
    }

    pub fn load_pair(&self, camera: Camera) -> Result<ScenePair> {
        Ok(ScenePair {
            image: Image::load_png(&self.image)?,
            scan: self.load_scan()?,
            calib: self.load_calibration(camera)?,
            frame_id: self.frame_id.clone(),
            scene_id: self.scene_id.clone(),
            roi: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub camera: Camera,
    pub roi: Roi,
    pub records: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn scene_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.scene_id.as_str()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            kind: "manifest",
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn stems(dir: &Path, ext: &str) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Ok(BTreeSet::new());
    }
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect())
}

/// Scan a KITTI raw tree (`<root>/<date>/<drive>/{image_0X,velodyne_points}/data`,
/// calibration files in `<date>/`) into one manifest per split.
///
/// Scenes are drive directories; those absent from `splits` are ignored.
/// Records are ordered by `(scene_id, frame_id)`.
pub fn build_manifest(
    root: &Path,
    splits: &BTreeMap<String, Split>,
    camera: Camera,
    roi: Roi,
) -> Result<BTreeMap<Split, DatasetManifest>> {
    let mut by_split: BTreeMap<Split, Vec<FrameRecord>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for date_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let velo_calib = date_dir.join("calib_velo_to_cam.txt");
        let cam_calib = date_dir.join("calib_cam_to_cam.txt");
        for drive in sorted_entries(&date_dir)?.into_iter().filter(|p| p.is_dir()) {
            let scene_id = drive.file_name().unwrap().to_string_lossy().into_owned();
            let Some(&split) = splits.get(&scene_id) else {
                log::debug!("scene {scene_id} not assigned to a split; skipped");
                continue;
            };
            let image_dir = drive.join(camera.image_dir()).join("data");
            let scan_dir = drive.join("velodyne_points").join("data");
            let images = stems(&image_dir, "png")?;
            let scans = stems(&scan_dir, "bin")?;
            for stem in images.union(&scans) {
                let frame_id = format!("{scene_id}/{stem}");
                let image = image_dir.join(format!("{stem}.png"));
                let scan = scan_dir.join(format!("{stem}.bin"));
                for needed in [&image, &scan, &velo_calib, &cam_calib] {
                    if !needed.is_file() {
                        return Err(Error::IncompleteFrame {
                            frame: frame_id,
                            missing: needed.clone(),
                        });
                    }
                }
                by_split.get_mut(&split).unwrap().push(FrameRecord {
                    scene_id: scene_id.clone(),
                    frame_id,
                    image,
                    scan,
                    calib_velo_to_cam: velo_calib.clone(),
                    calib_cam_to_cam: cam_calib.clone(),
                    depth: None,
                });
            }
        }
    }
    Ok(by_split
        .into_iter()
        .map(|(split, mut records)| {
            records.sort_by(|a, b| (&a.scene_id, &a.frame_id).cmp(&(&b.scene_id, &b.frame_id)));
            (
                split,
                DatasetManifest {
                    split,
                    camera,
                    roi,
                    records,
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const IDENTITY_CALIB: &str = "\
R: 1 0 0 0 1 0 0 0 1
T: 0 0 0
R_rect_00: 1 0 0 0 1 0 0 0 1
P_rect_02: 1 0 0 0 0 1 0 0 0 0 1 0
";

    #[test]
    fn identity_calibration_parses() {
        let c = parse_calibration(IDENTITY_CALIB, Camera::Left).unwrap();
        assert_eq!(c.r_lidar_to_cam, Matrix3::identity());
        assert_eq!(c.t_lidar_to_cam, Vector3::zeros());
        assert_eq!(c.p_rect[(2, 2)], 1.0);
    }

    #[test]
    fn missing_rotation_key() {
        let text = IDENTITY_CALIB.replace("R: 1 0 0 0 1 0 0 0 1\n", "");
        assert!(matches!(
            parse_calibration(&text, Camera::Left),
            Err(Error::MalformedCalibration(_))
        ));
    }

    #[test]
    fn right_camera_needs_its_own_projection() {
        assert!(matches!(
            parse_calibration(IDENTITY_CALIB, Camera::Right),
            Err(Error::MalformedCalibration(_))
        ));
    }

    #[test]
    fn skewed_rotation_rejected() {
        let text = IDENTITY_CALIB.replace("R: 1 0 0 0 1 0 0 0 1", "R: 1 0.1 0 0 1 0 0 0 1");
        assert!(matches!(
            parse_calibration(&text, Camera::Left),
            Err(Error::InvalidRotation { name: "R", .. })
        ));
    }

    #[test]
    fn single_point_scan() {
        let bytes: Vec<u8> = [1.0f32, 2.0, 3.0, 0.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        let scan = load_lidar_scan(&bytes).unwrap();
        assert_eq!(scan.points, vec![[1.0, 2.0, 3.0, 0.5]]);
    }

    #[test]
    fn empty_and_truncated_scans() {
        assert!(load_lidar_scan(&[]).unwrap().is_empty());
        assert!(matches!(load_lidar_scan(&[0; 24]), Err(Error::MalformedScan { len: 24 })));
    }

    fn pair(width: usize, height: usize) -> ScenePair {
        let data = (0..3 * width * height).map(|i| (i % 251) as f32 / 250.0).collect();
        ScenePair {
            image: Image::new(width, height, data),
            scan: LidarScan::default(),
            calib: parse_calibration(IDENTITY_CALIB, Camera::Left).unwrap(),
            frame_id: "s/0".into(),
            scene_id: "s".into(),
            roi: None,
        }
    }

    #[test]
    fn bottom_band_crop_matches_reference_resolution() {
        let p = pair(1242, 375);
        let roi = Roi::bottom_band(1242, 375, 256);
        let cropped = crop_roi(&p, roi).unwrap();
        assert_eq!((cropped.image.width, cropped.image.height), (1242, 256));
        assert_eq!(cropped.roi, Some(roi));
        // First cropped row is source row 119.
        assert_eq!(cropped.image.data[0], p.image.data[119 * 1242]);
    }

    #[test]
    fn full_roi_is_identity_and_oversized_roi_fails() {
        let p = pair(40, 30);
        let same = crop_roi(&p, Roi::full(40, 30)).unwrap();
        assert_eq!(same.image, p.image);
        let tall = Roi {
            x: 0,
            y: 0,
            width: 40,
            height: 400,
        };
        assert!(matches!(crop_roi(&p, tall), Err(Error::RoiOutOfBounds { .. })));
    }
}
