use super::*;

#[test]
fn method_names() {
    assert_eq!("ISS".parse::<Method>().unwrap(), Method::Iss);
    assert!("orb".parse::<Method>().is_err());
    let mut m = vec![Method::Sift, Method::Ours, Method::Harris, Method::Iss];
    m.sort();
    assert_eq!(m, Method::ALL);
}

#[test]
fn perturbation_rotates_about_its_center() {
    let p = Perturbation {
        angle_deg: 90.0,
        axis: [0.0, 0.0, 1.0],
        center: [1.0, 0.0, 0.0],
        translation: [0.0, 0.0, 5.0],
    };
    let t = p.transform().unwrap();
    assert!((t.apply_point(&Point3::new(1.0, 0.0, 0.0)) - Point3::new(1.0, 0.0, 5.0)).norm() < 1e-12);
    assert!((t.apply_point(&Point3::new(2.0, 0.0, 0.0)) - Point3::new(1.0, 1.0, 5.0)).norm() < 1e-12);
}

#[test]
fn grid_spans_the_perturbation_range() {
    let g = perturbation_grid(&PhantomSpec::default(), 42);
    assert_eq!(g.len(), 25);
    assert_eq!(g.iter().map(|p| p.angle_deg).fold(0.0, f64::max), 30.0);
    let tmax = g.iter().map(|p| Vec3::from(p.translation).norm()).fold(0.0, f64::max);
    assert!((tmax - 50.0).abs() < 1e-9);
    assert_eq!(g, perturbation_grid(&PhantomSpec::default(), 42));
}

#[test]
fn oblique_fixture_reproduces_baseline_failure() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/oblique_failure.json");
    let sc = Scenario::load(path).unwrap();
    let r = run_comparison(&sc.phantom, &sc.perturbation.transform().unwrap(), &Method::ALL, 1).unwrap();
    eprintln!("{}", report_emit(&r, ReportFormat::Markdown).unwrap());
    let fine = |m: Method| r.rows.iter().find(|row| row.method == m).unwrap().fine_rmse_mm.unwrap();
    assert!(fine(Method::Ours) <= 1.1);
    assert!(fine(Method::Harris) > 2.0 && fine(Method::Sift) > 2.0);
    assert!(fine(Method::Iss) <= 1.1);
    assert!(r.rows.iter().all(|row| row.error.is_none()));
    assert_eq!(r.rows.iter().filter(|row| !row.converged).count(), 2);
}

fn noise_free() -> PhantomSpec {
    PhantomSpec {
        noise_sigma: 0.0,
        ct_noise_sigma: 0.0,
        ct_landmark_jitter_px: 0.0,
        ..PhantomSpec::default()
    }
}

#[test]
fn noise_free_grid_recovers_the_pose() {
    let spec = noise_free();
    let scene = Scene::prepare(&spec).unwrap();
    for p in perturbation_grid(&spec, spec.seed) {
        let r = run_comparison_on(&scene, &p.transform().unwrap(), &[Method::Ours], 1).unwrap();
        let row = &r.rows[0];
        let (rot, trans) = (row.rotation_error_deg.unwrap(), row.translation_error_mm.unwrap());
        assert!(rot <= 1.0 && trans <= 1.0, "{p:?}: {rot} deg, {trans} mm");
    }
}

#[test]
fn coarse_stage_saves_fine_iterations() {
    let spec = noise_free();
    let scene = Scene::prepare(&spec).unwrap();
    let p = Perturbation {
        angle_deg: 45.0,
        axis: [0.2, 1.0, 0.3],
        center: spec.head_center,
        translation: [300.0, -200.0, 400.0],
    }
    .transform()
    .unwrap();
    let source = apply_transform(&p, &scene.source);
    let direct = fine_register(&source, &scene.target, &RigidTransform::identity()).unwrap();
    let coarse = coarse_register(&apply_transform(&p, &scene.source_landmarks), &scene.target_landmarks).unwrap();
    let fine = fine_register(&source, &scene.target, &coarse.transform).unwrap();
    assert!(evaluate_rmse(&source, &scene.target, &fine.transform).unwrap() < 0.5);
    assert!(
        fine.iterations_run < direct.iterations_run,
        "two-stage fine {} iterations, direct {}",
        fine.iterations_run,
        direct.iterations_run
    );
}
