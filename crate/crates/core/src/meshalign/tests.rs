use super::*;
use crate::fixtures::example_scene;
use crate::scene::forward_camera_rig;
use proptest::prelude::*;
use std::f64::consts::PI;

fn cam() -> CameraModel {
    CameraModel {
        fx: 60.0,
        fy: 60.0,
        cx: 48.0,
        cy: 32.0,
        width: 96,
        height: 64,
        near: 0.1,
        far: 200.0,
    }
}

/// Ground truth rendered from `mesh` at `s_true` under candidate
/// `heading_true`; the box is `box_factor` times the true object size.
fn synth(mesh: &TriangleMesh, s_true: f64, heading_true: usize, box_factor: f64, lambda: f64, yaw: f64) -> AlignmentProblem {
    let (lo, hi) = mesh.bounds().unwrap();
    let dims = (hi - lo) * s_true * box_factor;
    let gt_box = BoundingBox3D {
        size: [dims.x, dims.y, dims.z],
        center_pose: Pose::from_yaw(yaw, Vector3::new(12.0, 1.5, 0.75)),
    };
    let mut p = AlignmentProblem {
        mesh: mesh.clone(),
        gt_box,
        gt_depth: DepthCrop {
            x0: 0,
            y0: 0,
            width: 0,
            height: 0,
            depth: vec![],
        },
        camera: cam(),
        camera_pose: forward_camera_rig(1.2),
        lambda,
    };
    let heads = candidate_headings(&p.gt_box);
    p.gt_depth = render_depth_crop(&p, s_true, &heads[heading_true]).unwrap();
    p
}

fn car() -> TriangleMesh {
    TriangleMesh::cuboid(4.5, 1.9, 1.5, [0.6, 0.2, 0.2])
}

fn wedge() -> TriangleMesh {
    TriangleMesh::wedge(4.5, 1.9, 1.5, 0.4, [0.2, 0.6, 0.2])
}

#[test]
fn best_frame_examples() {
    let mut s = example_scene();
    let set = |s: &mut Scene, c: Vec<u32>| s.assets[0].lidar_point_counts = Some(c);
    set(&mut s, vec![3, 9, 9, 1]);
    assert_eq!(best_observation_frame(&s, "car_lead").unwrap(), ObservationFrame { frame: 1, degenerate: false });
    set(&mut s, vec![5]);
    assert_eq!(best_observation_frame(&s, "car_lead").unwrap().frame, 0);
    set(&mut s, vec![0, 0, 0]);
    assert_eq!(best_observation_frame(&s, "car_lead").unwrap(), ObservationFrame { frame: 0, degenerate: true });
    assert_eq!(best_observation_frame(&s, "road"), Err(AlignError::MissingLidarCounts("road".into())));
    assert_eq!(best_observation_frame(&s, "nope"), Err(AlignError::UnknownAsset("nope".into())));
}

#[test]
fn candidates_of_identity_box() {
    let [a, b] = candidate_headings(&BoundingBox3D::new(1.0, 1.0, 1.0));
    assert_eq!(a, Pose::identity());
    assert!((b.yaw().abs() - PI).abs() < 1e-12);
    assert!(b.translation.norm() < 1e-15);
}

proptest! {
    #[test]
    fn candidates_differ_by_half_turn(yaw in -PI..PI, x in -50.0..50.0f64, y in -50.0..50.0f64) {
        let mut b = BoundingBox3D::new(4.0, 2.0, 1.5);
        b.center_pose = Pose::from_yaw(yaw, Vector3::new(x, y, 0.7));
        let [c0, c1] = candidate_headings(&b);
        let d = (c1.yaw() - c0.yaw()).rem_euclid(2.0 * PI);
        prop_assert!((d - PI).abs() < 1e-9);
        let turn = Pose::from_yaw(PI, Vector3::zeros());
        let back = compose(&c1, &turn);
        prop_assert!((back.translation - c0.translation).norm() < 1e-9);
        prop_assert!(back.rotation.angle_to(&c0.rotation) < 1e-9);
    }
}

#[test]
fn perfect_match_scores_minus_lambda_iou() {
    let p = synth(&car(), 1.0, 0, 1.0, 1.0, 0.5);
    let heads = candidate_headings(&p.gt_box);
    let sc = alignment_score(&p, 1.0, &heads[0]).unwrap();
    assert_eq!(sc.depth_rms, Some(0.0));
    assert!((sc.score + sc.iou).abs() < 1e-15);
    assert!(sc.score <= 0.0 && sc.iou > 0.5 && sc.iou <= 1.0);

    let p0 = AlignmentProblem { lambda: 0.0, ..p.clone() };
    for s in [0.7, 1.0, 1.2] {
        let sc = alignment_score(&p0, s, &heads[0]).unwrap();
        assert_eq!(sc.score, sc.depth_rms.unwrap());
    }
    assert!(alignment_score(&p, 2.0, &heads[0]).unwrap().score > alignment_score(&p, 1.0, &heads[0]).unwrap().score);
    assert_eq!(alignment_score(&p, 0.0, &heads[0]), Err(AlignError::BadScale(0.0)));
}

#[test]
fn no_shared_pixels_gives_infinite_score() {
    let mut p = synth(&car(), 1.0, 0, 1.0, 1.0, 0.5);
    p.gt_depth.depth.iter_mut().for_each(|d| *d = None);
    let heads = candidate_headings(&p.gt_box);
    let sc = alignment_score(&p, 1.0, &heads[0]).unwrap();
    assert_eq!(sc.score, f64::INFINITY);
    assert_eq!(sc.depth_rms, None);
    assert_eq!(align_mesh(&p), Err(AlignError::AllScoresInfinite));
}

#[test]
fn recovers_scale_larger_than_box() {
    let p = synth(&car(), 1.3, 0, 1.0 / 1.3, 1.0, 0.0);
    let r = align_mesh(&p).unwrap();
    assert!((r.initial_scale - 1.0).abs() < 1e-12);
    assert!((r.scale - 1.3).abs() <= 0.01 + 1e-12, "{}", r.scale);
}

#[test]
fn exact_box_gives_initial_scale() {
    let p = synth(&car(), 1.0, 0, 1.0, 1.0, 0.5);
    let r = align_mesh(&p).unwrap();
    assert_eq!(r.scale, r.initial_scale);
    assert_eq!(r.heading, 0);
    assert_eq!(r.score_curve[0].len(), GRID_POINTS);
    assert!((r.score_curve[0][0].0 - 0.5).abs() < 1e-12 && (r.score_curve[0][100].0 - 1.5).abs() < 1e-12);
}

#[test]
fn flipped_wedge_picks_second_candidate() {
    let p = synth(&wedge(), 1.0, 1, 1.0, 1.0, 0.5);
    let r = align_mesh(&p).unwrap();
    assert_eq!(r.heading, 1);
    assert!((r.scale - 1.0).abs() < 1e-12);
}

#[test]
fn minimizer_dominates_initial_scale() {
    for (mesh, h) in [(car(), 0), (wedge(), 1)] {
        let p = synth(&mesh, 1.15, h, 0.9, 1.0, -0.3);
        let r = align_mesh(&p).unwrap();
        let heads = candidate_headings(&p.gt_box);
        for hd in &heads {
            assert!(r.score <= alignment_score(&p, r.initial_scale, hd).unwrap().score);
        }
    }
}

#[test]
fn score_is_continuous_in_scale() {
    let p = synth(&wedge(), 1.1, 0, 0.95, 1.0, 0.4);
    let heads = candidate_headings(&p.gt_box);
    for s in scale_grid(initial_scale(&p).unwrap()) {
        let a = alignment_score(&p, s, &heads[0]).unwrap().score;
        let b = alignment_score(&p, s + 1e-9, &heads[0]).unwrap().score;
        assert!((a - b).abs() < 1e-6, "{s}: {a} vs {b}");
    }
}

#[test]
fn iou_is_bounded_and_reflexive() {
    let p = synth(&car(), 1.0, 0, 1.0, 1.0, 0.2);
    let heads = candidate_headings(&p.gt_box);
    for s in [0.5, 0.9, 1.0, 1.4] {
        let iou = alignment_score(&p, s, &heads[0]).unwrap().iou;
        assert!((0.0..=1.0).contains(&iou));
    }
    let r = box_rect(&p).unwrap();
    assert_eq!(r.iou(&r), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn self_consistent_recovery(
        use_wedge in any::<bool>(),
        l in 3.0..5.5f64, w in 1.5..2.2f64, h in 1.2..2.0f64,
        s_true in 0.7..1.6f64,
        heading in 0usize..2,
        yaw in -1.2..1.2f64,
        lambda_idx in 0usize..2,
    ) {
        let lambda = [0.0, 1.0][lambda_idx];
        let mesh = if use_wedge {
            TriangleMesh::wedge(l, w, h, 0.4, [0.5; 3])
        } else {
            TriangleMesh::cuboid(l, w, h, [0.5; 3])
        };
        let p = synth(&mesh, s_true, heading, 1.0, lambda, yaw);
        let r = align_mesh(&p).unwrap();
        if !use_wedge || lambda == 0.0 {
            prop_assert!((r.scale - s_true).abs() <= 0.01 * r.initial_scale + 1e-9, "{} vs {}", r.scale, s_true);
        }
        if use_wedge {
            prop_assert_eq!(r.heading, heading);
        }
    }
}

struct Fixed(usize);

impl HeadingOracle for Fixed {
    fn choose(&self, _: &HeadingQuery) -> Result<usize, OracleError> {
        Ok(self.0)
    }
}

#[test]
fn heading_resolution() {
    let sym = synth(&car(), 1.0, 0, 1.0, 1.0, 0.5);
    let r = align_mesh(&sym).unwrap();
    let d = resolve_heading(&sym, &r, None);
    assert_eq!((d.candidate, d.source), (0, HeadingSource::Score));
    let d = resolve_heading(&sym, &r, Some(&Fixed(1)));
    assert_eq!((d.candidate, d.source), (1, HeadingSource::Oracle));

    let asym = synth(&wedge(), 1.0, 1, 1.0, 1.0, 0.5);
    let r = align_mesh(&asym).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let failing = CommandOracle {
        program: "false".into(),
        args: vec![],
        workdir: dir.path().join("q"),
    };
    let d = resolve_heading(&asym, &r, Some(&failing));
    assert_eq!((d.candidate, d.source), (r.heading, HeadingSource::Fallback));
    assert!(d.oracle_error.is_some());

    let echo = CommandOracle {
        program: "sh".into(),
        args: vec!["-c".into(), "test -f \"$0/candidate_1.png\" && test -f \"$0/query.json\" && echo 0".into()],
        workdir: dir.path().join("q2"),
    };
    let d = resolve_heading(&asym, &r, Some(&echo));
    assert_eq!((d.candidate, d.source), (0, HeadingSource::Oracle));

    let garbage = CommandOracle {
        program: "sh".into(),
        args: vec!["-c".into(), "echo maybe".into()],
        workdir: dir.path().join("q3"),
    };
    let d = resolve_heading(&asym, &r, Some(&garbage));
    assert_eq!(d.source, HeadingSource::Fallback);
}

#[test]
fn scene_problem_aligns_lead_car() {
    let s = example_scene();
    let (p, obs) = problem_from_scene(&s, "car_lead", None, DEFAULT_LAMBDA).unwrap();
    assert_eq!(obs, best_observation_frame(&s, "car_lead").unwrap());
    assert!(p.gt_depth.depth.iter().any(|d| d.is_some()));
    let r = align_mesh(&p).unwrap();
    assert!((r.initial_scale - 1.0).abs() < 1e-12);
    assert!((r.scale - 1.0).abs() <= 0.2, "{}", r.scale);
    assert_eq!(problem_from_scene(&s, "road", None, 1.0).unwrap_err(), AlignError::MissingLidarCounts("road".into()));
}
