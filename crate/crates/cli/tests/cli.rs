//! End-to-end runs of the `facereg` binary. Golden checks compare the files
//! it writes with the same operation done through the library.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use facereg::bench::{parse_csv, run_comparison, Method, PhantomSpec, ReportFormat, Scenario};
use facereg::depth::{
    depth_to_cloud, lift_landmarks, segment_region, select_eyes_nose, CameraIntrinsics, DepthFrame, LandmarkSet,
    DEFAULT_LIFT_WINDOW,
};
use facereg::keypoints::{iss_keypoints, KeypointParams};
use facereg::pgm::read_pgm;
use facereg::ply::{read_ply, write_cloud, write_ply, Encoding};
use facereg::registration::{register_two_stage, TwoStageResult};
use facereg::surface::{backproject_landmarks, edge_incidence, marching_cubes, NormalAngleImage, ScalarVolume, TriangleMesh};
use facereg::{Point3, PointCloud, RigidTransform};
use tempfile::TempDir;

fn facereg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facereg")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) {
    let out = facereg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = facereg(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    assert!(!stderr.is_empty());
    stderr
}

/// Phantom artifacts plus the CLI's depth cloud and CT mesh, written once.
struct Artifacts {
    _dir: TempDir,
    ph: PathBuf,
    cloud: PathBuf,
    mesh: PathBuf,
    image: PathBuf,
}

fn artifacts() -> &'static Artifacts {
    static A: OnceLock<Artifacts> = OnceLock::new();
    A.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let ph = dir.path().join("ph");
        let cloud = dir.path().join("cloud.ply");
        let mesh = dir.path().join("mesh.ply");
        let image = dir.path().join("image.pgm");
        ok(&["phantom", "--out-dir", s(&ph)]);
        ok(&["depth2cloud", s(&ph.join("depth.pgm")), "--out", s(&cloud)]);
        ok(&["extract", s(&ph.join("ct.raw")), "--out", s(&mesh)]);
        ok(&["render", s(&mesh), "--axis", "0,0,-1", "--out", s(&image)]);
        Artifacts { _dir: dir, ph, cloud, mesh, image }
    })
}

#[test]
fn depth2cloud_matches_the_library() {
    let a = artifacts();
    let dir = TempDir::new().unwrap();
    let expected = dir.path().join("expected.ply");
    let frame = DepthFrame::load(a.ph.join("depth.pgm")).unwrap();
    write_cloud(&expected, &depth_to_cloud(&frame).unwrap(), Encoding::BinaryLittleEndian).unwrap();
    assert_eq!(fs::read(&a.cloud).unwrap(), fs::read(&expected).unwrap());

    let explicit = dir.path().join("explicit.ply");
    ok(&[
        "depth2cloud",
        s(&a.ph.join("depth.pgm")),
        s(&a.ph.join("depth.intrinsics.json")),
        "--out",
        s(&explicit),
    ]);
    assert_eq!(fs::read(&explicit).unwrap(), fs::read(&expected).unwrap());
}

#[test]
fn depth2cloud_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out.ply");
    fails_with(&["depth2cloud", s(&dir.path().join("missing.pgm")), "--out", s(&out)], 1);

    let zero = dir.path().join("zero.pgm");
    let k = CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 8.0, cy: 6.0, depth_scale: 1e-3 };
    DepthFrame::new(16, 12, vec![0; 16 * 12], k).unwrap().save(&zero).unwrap();
    let err = fails_with(&["depth2cloud", s(&zero), "--out", s(&out)], 2);
    assert!(err.contains("empty depth frame"), "{err}");
    assert!(!out.exists());
}

fn sphere_volume(path: &Path, value: impl Fn(f64) -> f64) {
    let c = Point3::new(15.5, 15.5, 15.5);
    ScalarVolume::from_fn([32; 3], [1.0; 3], Point3::origin(), |p| value((p - c).norm()).round())
        .unwrap()
        .save(path)
        .unwrap();
}

#[test]
fn extract_sphere_is_watertight_and_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("sphere.raw");
    sphere_volume(&raw, |r| (1000.0 + 100.0 * (10.0 - r)).clamp(0.0, 2000.0));
    let out = dir.path().join("sphere.ply");
    ok(&["extract", s(&raw), "--iso", "1000", "--out", s(&out)]);

    let mesh = TriangleMesh::load_ply(&out).unwrap();
    assert!(!mesh.is_empty());
    assert!(edge_incidence(mesh.triangles()).values().all(|&n| n == 2));

    let expected = dir.path().join("expected.ply");
    marching_cubes(&ScalarVolume::load(&raw).unwrap(), 1000.0)
        .unwrap()
        .save_ply(&expected, Encoding::BinaryLittleEndian)
        .unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&expected).unwrap());
}

#[test]
fn extract_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out.ply");
    let raw = dir.path().join("flat.raw");
    sphere_volume(&raw, |_| 500.0);
    let err = fails_with(&["extract", s(&raw), "--iso", "1000", "--out", s(&out)], 2);
    assert!(err.contains("empty isosurface"), "{err}");

    fs::write(dir.path().join("flat.volume.json"), "{ not json").unwrap();
    fails_with(&["extract", s(&raw), "--out", s(&out)], 1);
}

#[test]
fn render_examples() {
    let dir = TempDir::new().unwrap();
    let plane = dir.path().join("plane.ply");
    let cloud = PointCloud::new(vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(20.0, 0.0, 0.0),
        Point3::new(20.0, 20.0, 0.0),
        Point3::new(0.0, 20.0, 0.0),
    ])
    .unwrap();
    write_ply(&plane, &cloud, &[[0, 1, 2], [0, 2, 3]], Encoding::Ascii).unwrap();
    let img = dir.path().join("plane.pgm");
    ok(&["render", s(&plane), "--axis", "0,0,1", "--res", "0.5", "--out", s(&img)]);
    let rendered = NormalAngleImage::load(&img).unwrap();
    let covered: Vec<u8> = (0..rendered.gray.len())
        .filter(|&i| rendered.lookup[i].is_some())
        .map(|i| rendered.gray[i])
        .collect();
    assert!(covered.len() >= 40 * 40);
    assert!(covered.iter().all(|&g| g == 255));

    let empty = dir.path().join("empty.ply");
    write_cloud(&empty, &cloud, Encoding::Ascii).unwrap();
    fails_with(&["render", s(&empty), "--out", s(&img)], 1);
    fails_with(&["render", s(&plane), "--axis", "0,0", "--out", s(&img)], 1);
}

#[test]
fn render_sphere_darkens_toward_the_rim() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("sphere.raw");
    sphere_volume(&raw, |r| (1000.0 + 100.0 * (12.0 - r)).clamp(0.0, 2000.0));
    let mesh = dir.path().join("sphere.ply");
    let img = dir.path().join("sphere.pgm");
    ok(&["extract", s(&raw), "--out", s(&mesh)]);
    ok(&["render", s(&mesh), "--axis", "0,0,1", "--res", "0.25", "--out", s(&img)]);
    let g = read_pgm(&img).unwrap();
    let row = g.height / 2;
    let line: Vec<f64> = (0..g.width).map(|c| g.data[row * g.width + c] as f64).collect();
    let mid = g.width / 2;
    assert!(line[mid] >= 245.0, "center gray {}", line[mid]);
    // Analytic profile 255 (1 - acos(sqrt(1 - (r/R)^2)) / 90deg), sampled
    // every 2 mm; the mesh is faceted, so compare with a loose tolerance.
    let radius = 12.0;
    for k in 1..=5 {
        let r = 2.0 * k as f64;
        let expected = 255.0 * (1.0 - (1.0 - (r / radius).powi(2)).sqrt().acos().to_degrees() / 90.0);
        for c in [mid + (r / 0.25) as usize, mid - (r / 0.25) as usize] {
            assert!((line[c] - expected).abs() < 20.0, "r {r}: gray {} vs {expected}", line[c]);
        }
    }
}

#[test]
fn keypoints_match_the_library() {
    let a = artifacts();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("kp.ply");
    ok(&["keypoints", s(&a.mesh), "--method", "iss", "--iss-min-neighbors", "6", "--out", s(&out)]);
    let mesh = read_ply(&a.mesh).unwrap().cloud;
    let mut params = KeypointParams::for_cloud(&mesh).unwrap();
    params.iss.min_neighbors = 6;
    let expected = dir.path().join("expected.ply");
    write_cloud(&expected, &iss_keypoints(&mesh, &params).unwrap(), Encoding::BinaryLittleEndian).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&expected).unwrap());

    fails_with(&["keypoints", s(&a.mesh), "--method", "ours", "--out", s(&out)], 1);
    fails_with(&["keypoints", s(&a.mesh), "--method", "iss", "--iss-gamma-21", "2", "--out", s(&out)], 1);
}

#[test]
fn cli_chain_reproduces_the_phantom_render() {
    let a = artifacts();
    assert_eq!(fs::read(&a.mesh).unwrap(), fs::read(a.ph.join("ct.ply")).unwrap());
    assert_eq!(fs::read(&a.image).unwrap(), fs::read(a.ph.join("ct_image.pgm")).unwrap());
}

fn register_phantom(extra: &[&str], out: &Path) {
    let a = artifacts();
    let mut args = vec![
        "register",
        s(&a.cloud),
        s(&a.mesh),
        "--src-landmarks",
        s(a.ph.join("camera_landmarks.json").as_path()),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(
        [
            "--src-frame",
            s(&a.ph.join("depth.pgm")),
            "--tgt-landmarks",
            s(&a.ph.join("ct_landmarks.json")),
            "--tgt-image",
            s(&a.image),
            "--src-margin",
            "10",
            "--tgt-margin",
            "20",
            "--out",
            s(out),
        ]
        .map(String::from),
    );
    args.extend(extra.iter().map(|x| x.to_string()));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
}

#[test]
fn register_phantom_pair_with_landmarks() {
    let a = artifacts();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("result.json");
    register_phantom(&[], &out);
    let result = TwoStageResult::load(&out).unwrap();
    assert!(result.rmse_mm <= 1.1, "fine rmse {}", result.rmse_mm);

    // The phantom camera sits at the CT origin looking +z: the truth is the identity.
    let truth: RigidTransform = serde_json::from_str(&fs::read_to_string(a.ph.join("ground_truth.json")).unwrap()).unwrap();
    let t = result.fine.transform.compose(&truth);
    assert!(t.rotation_angle_deg() < 1.0 && t.translation.norm() < 5.0);

    let src_lm = select_eyes_nose(&LandmarkSet::load(a.ph.join("camera_landmarks.json")).unwrap());
    let src_kp = lift_landmarks(&DepthFrame::load(a.ph.join("depth.pgm")).unwrap(), &src_lm, DEFAULT_LIFT_WINDOW)
        .unwrap()
        .cloud;
    let tgt_lm = select_eyes_nose(&LandmarkSet::load(a.ph.join("ct_landmarks.json")).unwrap());
    let tgt_kp = backproject_landmarks(&NormalAngleImage::load(&a.image).unwrap(), &tgt_lm).unwrap().cloud;
    let source = segment_region(&read_ply(&a.cloud).unwrap().cloud, &src_kp, 10.0).unwrap();
    let target = segment_region(&read_ply(&a.mesh).unwrap().cloud, &tgt_kp, 20.0).unwrap();
    let expected = register_two_stage(&source, &target, &src_kp, &tgt_kp).unwrap();
    let golden = dir.path().join("golden.json");
    expected.save(&golden).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&golden).unwrap());

    let single = dir.path().join("single.json");
    register_phantom(&["--threads", "1"], &single);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&single).unwrap());
}

#[test]
fn register_identical_clouds_and_tiny_keypoints() {
    let a = artifacts();
    let dir = TempDir::new().unwrap();
    let cloud = read_ply(&a.cloud).unwrap().cloud;
    let kp_path = dir.path().join("kp.ply");
    write_cloud(&kp_path, &cloud.select(&[100, 5000, 12000, 20000, 30000]), Encoding::Ascii).unwrap();
    let out = dir.path().join("same.json");
    ok(&[
        "register",
        s(&a.cloud),
        s(&a.cloud),
        "--src-keypoints",
        s(&kp_path),
        "--tgt-keypoints",
        s(&kp_path),
        "--out",
        s(&out),
    ]);
    assert!(TwoStageResult::load(&out).unwrap().rmse_mm < 1e-9);

    let two = dir.path().join("two.ply");
    write_cloud(&two, &cloud.select(&[100, 5000]), Encoding::Ascii).unwrap();
    fails_with(
        &[
            "register",
            s(&a.cloud),
            s(&a.cloud),
            "--src-keypoints",
            s(&two),
            "--tgt-keypoints",
            s(&two),
            "--out",
            s(&out),
        ],
        2,
    );
    fails_with(&["register", s(&a.cloud), s(&a.cloud), "--out", s(&out)], 1);
}

#[test]
fn bench_reports_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("report.csv");
    ok(&["bench", "--methods", "ours", "--trials", "3", "--out", s(&csv)]);
    let rows = parse_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].method, Method::Ours);
    assert!(rows[0].fine_rmse_mm.unwrap() <= 1.1);
    assert!(rows[0].t_total_s > 0.0);

    let json = dir.path().join("report.json");
    ok(&["bench", "--seed", "42", "--methods", "ours", "--trials", "1", "--out", s(&json)]);
    let report: facereg::bench::BenchReport = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report.trials, 1);
    // The CSV carries nine significant digits.
    let (full, short) = (report.rows[0].fine_rmse_mm.unwrap(), rows[0].fine_rmse_mm.unwrap());
    assert!((full - short).abs() <= 1e-8 * full);

    let lib = run_comparison(&PhantomSpec::default(), &RigidTransform::identity(), &[Method::Ours], 1).unwrap();
    assert_eq!(lib.rows[0].fine_rmse_mm, report.rows[0].fine_rmse_mm);
    assert_eq!(lib.rows[0].src_features, report.rows[0].src_features);
    assert_eq!(ReportFormat::from_path(&json), ReportFormat::Json);

    let scenario = dir.path().join("scenario.json");
    fs::write(&scenario, serde_json::to_string(&Scenario::default()).unwrap()).unwrap();
    let md = facereg(&["bench", "--spec", s(&scenario), "--methods", "ours", "--trials", "1"]);
    assert!(md.status.success());
    assert!(String::from_utf8_lossy(&md.stdout).contains("ours"));

    fails_with(&["bench", "--methods", "ours,orb"], 1);
    fails_with(&["bench", "--spec", s(&dir.path().join("missing.json"))], 1);
}

#[test]
fn usage_errors_exit_with_one() {
    fails_with(&["bench", "--no-such-flag"], 1);
    fails_with(&["frobnicate"], 1);
    fails_with(&[], 1);
    assert!(facereg(&["--help"]).status.success());
}
