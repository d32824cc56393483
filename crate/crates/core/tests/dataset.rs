use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pcic_core::dataset::{
    build_manifest, load_lidar_scan, parse_calibration, Camera, LidarScan, Roi, Split,
};
use pcic_core::Error;
use proptest::prelude::*;

// Calibration files of the 2011_09_26 KITTI raw drives, with the extra keys
// the loader has to skip over.
const VELO_TO_CAM: &str = "\
calib_time: 15-Mar-2012 11:37:16
R: 7.533745e-03 -9.999714e-01 -6.166020e-04 1.480249e-02 7.280733e-04 -9.998902e-01 9.998621e-01 7.523790e-03 1.480755e-02
T: -4.069766e-03 -7.631618e-02 -2.717806e-01
delta_f: 0.000000e+00 0.000000e+00
delta_c: 0.000000e+00 0.000000e+00
";

const CAM_TO_CAM: &str = "\
calib_time: 09-Jan-2012 13:57:47
corner_dist: 9.950000e-02
S_00: 1.392000e+03 5.120000e+02
K_00: 9.842439e+02 0.000000e+00 6.900000e+02 0.000000e+00 9.808141e+02 2.331966e+02 0.000000e+00 0.000000e+00 1.000000e+00
R_rect_00: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
P_rect_00: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
S_rect_02: 1.242000e+03 3.750000e+02
P_rect_02: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
P_rect_03: 7.215377e+02 0.000000e+00 6.095593e+02 -3.395242e+02 0.000000e+00 7.215377e+02 1.728540e+02 2.199936e+00 0.000000e+00 0.000000e+00 1.000000e+00 2.729905e-03
";

/// Token-level reader written independently of the loader: the key is the
/// first token with its colon stripped, values are the remaining tokens.
fn oracle_values(text: &str, key: &str) -> Vec<f64> {
    for line in text.lines() {
        let mut tokens = line.split_whitespace();
        if tokens.next() == Some(&format!("{key}:")[..]) {
            return tokens.map(|t| t.parse().unwrap()).collect();
        }
    }
    panic!("{key} not found");
}

fn row_major(m: &[f64], rows: usize, cols: usize) -> impl Fn(usize, usize) -> f64 + '_ {
    assert_eq!(m.len(), rows * cols);
    move |r, c| m[r * cols + c]
}

#[test]
fn real_calibration_matches_token_oracle() {
    let text = format!("{VELO_TO_CAM}{CAM_TO_CAM}");
    for (camera, key) in [(Camera::Left, "P_rect_02"), (Camera::Right, "P_rect_03")] {
        let calib = parse_calibration(&text, camera).unwrap();
        let r = oracle_values(&text, "R");
        let r = row_major(&r, 3, 3);
        let rr = oracle_values(&text, "R_rect_00");
        let rr = row_major(&rr, 3, 3);
        let p = oracle_values(&text, key);
        let p = row_major(&p, 3, 4);
        let t = oracle_values(&text, "T");
        for i in 0..3 {
            assert_eq!(calib.t_lidar_to_cam[i], t[i]);
            for j in 0..3 {
                assert_eq!(calib.r_lidar_to_cam[(i, j)], r(i, j));
                assert_eq!(calib.r_rect[(i, j)], rr(i, j));
            }
            for j in 0..4 {
                assert_eq!(calib.p_rect[(i, j)], p(i, j));
            }
        }
    }
}

#[test]
fn calibration_file_order_does_not_matter() {
    let a = parse_calibration(&format!("{VELO_TO_CAM}{CAM_TO_CAM}"), Camera::Left).unwrap();
    let b = parse_calibration(&format!("{CAM_TO_CAM}{VELO_TO_CAM}"), Camera::Left).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncated_projection_row_is_reported() {
    let text = format!("{VELO_TO_CAM}{CAM_TO_CAM}").replace("2.745884e-03", "");
    let err = parse_calibration(&text, Camera::Left).unwrap_err();
    assert!(matches!(err, Error::MalformedCalibration(ref m) if m.contains("P_rect_02")), "{err}");
}

#[test]
fn non_rotation_is_rejected() {
    let text = format!("{VELO_TO_CAM}{CAM_TO_CAM}").replace("R: 7.533745e-03", "R: 2.0");
    assert!(matches!(parse_calibration(&text, Camera::Left), Err(Error::InvalidRotation { .. })));
}

proptest! {
    #[test]
    fn scan_bytes_round_trip(points in prop::collection::vec(prop::array::uniform4(any::<f32>()), 0..200)) {
        let scan = LidarScan { points };
        let bytes = scan.to_bytes();
        prop_assert_eq!(bytes.len(), 16 * scan.len());
        let back = load_lidar_scan(&bytes).unwrap();
        prop_assert_eq!(back.len(), scan.len());
        for (a, b) in back.points.iter().zip(&scan.points) {
            for k in 0..4 {
                prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
    }

    #[test]
    fn ragged_scans_are_rejected(len in 0usize..400) {
        let res = load_lidar_scan(&vec![0u8; len]);
        if len % 16 == 0 {
            prop_assert_eq!(res.unwrap().len(), len / 16);
        } else {
            prop_assert!(
                matches!(res, Err(Error::MalformedScan { len: l }) if l == len),
                "expected MalformedScan"
            );
        }
    }
}

/// Lay out a KITTI-shaped tree with placeholder payloads; the manifest only
/// looks at which files exist.
fn touch_tree(root: &Path, scenes: &[(String, Vec<u32>)]) {
    let date = root.join("2011_09_26");
    fs::create_dir_all(&date).unwrap();
    fs::write(date.join("calib_velo_to_cam.txt"), VELO_TO_CAM).unwrap();
    fs::write(date.join("calib_cam_to_cam.txt"), CAM_TO_CAM).unwrap();
    for (scene, frames) in scenes {
        let img = date.join(scene).join("image_02/data");
        let velo = date.join(scene).join("velodyne_points/data");
        fs::create_dir_all(&img).unwrap();
        fs::create_dir_all(&velo).unwrap();
        for f in frames {
            fs::write(img.join(format!("{f:010}.png")), b"").unwrap();
            fs::write(velo.join(format!("{f:010}.bin")), b"").unwrap();
        }
    }
}

fn scene_strategy() -> impl Strategy<Value = Vec<(String, Vec<u32>, Split)>> {
    prop::collection::btree_map(
        0u32..60,
        (prop::collection::btree_set(0u32..500, 1..5), prop::sample::select(Split::ALL.to_vec())),
        1..6,
    )
    .prop_map(|m| {
        m.into_iter()
            .map(|(d, (frames, split))| (format!("2011_09_26_drive_{d:04}_sync"), frames.into_iter().rev().collect(), split))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn manifest_is_deterministic_sorted_and_disjoint(scenes in scene_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let layout: Vec<_> = scenes.iter().map(|(s, f, _)| (s.clone(), f.clone())).collect();
        touch_tree(dir.path(), &layout);
        let splits: BTreeMap<String, Split> = scenes.iter().map(|(s, _, sp)| (s.clone(), *sp)).collect();
        let roi = Roi::bottom_band(1242, 375, 256);
        let a = build_manifest(dir.path(), &splits, Camera::Left, roi).unwrap();
        let b = build_manifest(dir.path(), &splits, Camera::Left, roi).unwrap();
        prop_assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );

        let total: usize = scenes.iter().map(|(_, f, _)| f.len()).sum();
        prop_assert_eq!(a.values().map(|m| m.records.len()).sum::<usize>(), total);
        for (split, m) in &a {
            prop_assert_eq!(m.split, *split);
            let keys: Vec<_> = m.records.iter().map(|r| (r.scene_id.clone(), r.frame_id.clone())).collect();
            let mut sorted = keys.clone();
            sorted.sort();
            prop_assert_eq!(&keys, &sorted);
            for r in &m.records {
                prop_assert_eq!(splits[&r.scene_id], *split);
            }
            for (other, n) in &a {
                if other != split {
                    prop_assert!(m.scene_ids().is_disjoint(&n.scene_ids()));
                }
            }
        }
    }
}

#[test]
fn unassigned_scenes_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    touch_tree(
        dir.path(),
        &[
            ("2011_09_26_drive_0001_sync".into(), vec![0, 1]),
            ("2011_09_26_drive_0002_sync".into(), vec![0]),
        ],
    );
    let splits = BTreeMap::from([("2011_09_26_drive_0002_sync".to_string(), Split::Test)]);
    let m = build_manifest(dir.path(), &splits, Camera::Left, Roi::full(1242, 375)).unwrap();
    assert!(m[&Split::Train].records.is_empty());
    assert_eq!(m[&Split::Test].records.len(), 1);
    assert_eq!(m[&Split::Test].records[0].frame_id, "2011_09_26_drive_0002_sync/0000000000");
}

#[test]
fn frame_missing_its_scan_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let scene = "2011_09_26_drive_0005_sync";
    touch_tree(dir.path(), &[(scene.into(), vec![0, 1])]);
    let gone = dir.path().join("2011_09_26").join(scene).join("velodyne_points/data/0000000001.bin");
    fs::remove_file(&gone).unwrap();
    let splits = BTreeMap::from([(scene.to_string(), Split::Train)]);
    let err = build_manifest(dir.path(), &splits, Camera::Left, Roi::full(1242, 375)).unwrap_err();
    match err {
        Error::IncompleteFrame { frame, missing } => {
            assert_eq!(frame, format!("{scene}/0000000001"));
            assert_eq!(missing, gone);
        }
        other => panic!("unexpected {other}"),
    }
    assert!(build_manifest(dir.path(), &splits, Camera::Left, Roi::full(1242, 375))
        .unwrap_err()
        .is_missing_file());
}
