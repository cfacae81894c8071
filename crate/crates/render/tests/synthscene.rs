use clearflow_render::geometry::Vec3;
use clearflow_render::scene::{
    generate_scene, sample_scene, settle, AssetBank, Environment, MaterialClass, SceneConfig, SettleConfig,
    CONTACT_TOLERANCE,
};
use clearflow_render::tracer::Camera;
use clearflow_render::trajectory::{orbit_for_scene, sample_trajectory, scene_extent, TrajectoryConfig};

#[test]
fn sampling_is_deterministic() {
    let bank = AssetBank::standard();
    let cfg = SceneConfig::default();
    assert_eq!(
        sample_scene(&bank, &cfg, 42).unwrap(),
        sample_scene(&bank, &cfg, 42).unwrap()
    );
    assert_ne!(
        sample_scene(&bank, &cfg, 42).unwrap(),
        sample_scene(&bank, &cfg, 43).unwrap()
    );
    let s = SettleConfig::default();
    assert_eq!(
        generate_scene(&bank, &cfg, &s, 7, 4).unwrap(),
        generate_scene(&bank, &cfg, &s, 7, 4).unwrap()
    );
}

#[test]
fn asset_count_is_uniform() {
    let bank = AssetBank::standard();
    let cfg = SceneConfig::default();
    let n = 1000;
    let mut counts = [0usize; 4];
    for seed in 0..n {
        let m = sample_scene(&bank, &cfg, seed).unwrap().m();
        counts[m - 3] += 1;
    }
    let p = 0.25;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 4.0 * sigma, "{counts:?}");
    }
}

#[test]
fn restricted_bank_is_closed() {
    let bank = AssetBank::standard().restricted_to(&[MaterialClass::Glass]);
    for seed in 0..50 {
        let s = sample_scene(&bank, &SceneConfig::default(), seed).unwrap();
        assert!(s
            .placements
            .iter()
            .all(|p| p.asset.material.class == MaterialClass::Glass));
    }
}

#[test]
fn settled_scenes_are_plausible() {
    let bank = AssetBank::standard();
    let cfg = SceneConfig::default();
    for seed in 0..30 {
        let s = generate_scene(&bank, &cfg, &SettleConfig::default(), seed, 8).unwrap();
        assert!(s.settled);
        let e = s.environment.half_extent();
        let posed: Vec<_> = s
            .placements
            .iter()
            .map(|p| (p.asset.shape().unwrap(), p.pose.rotation(), p.pose.translation()))
            .collect();
        for (i, (shape, rot, c)) in posed.iter().enumerate() {
            let extent = |u: Vec3| u.dot(c) + shape.support(&(rot.transpose() * u));
            assert!(
                extent(-Vec3::z()) <= CONTACT_TOLERANCE,
                "seed {seed}: asset {i} below table"
            );
            for u in [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y()] {
                assert!(extent(u) <= e + 1e-9, "seed {seed}: asset {i} leaves the table");
            }
            let on_table = extent(-Vec3::z()).abs() <= CONTACT_TOLERANCE;
            let mut resting_on_other = false;
            for (j, (other, _, d)) in posed.iter().enumerate() {
                if i == j {
                    continue;
                }
                let gap = (c - d).norm() - shape.bounding_radius() - other.bounding_radius();
                assert!(gap >= -CONTACT_TOLERANCE, "seed {seed}: {i} and {j} overlap by {gap}");
                resting_on_other |= d.z < c.z && gap <= CONTACT_TOLERANCE;
            }
            assert!(on_table || resting_on_other, "seed {seed}: asset {i} floats");
        }
    }
}

#[test]
fn settling_rejects_overcrowded_containers() {
    let cfg = SceneConfig {
        m_range: [12, 12],
        half_extent: 0.12,
        container_probability: 1.0,
        ..SceneConfig::default()
    };
    let scene = sample_scene(&AssetBank::standard(), &cfg, 1).unwrap();
    assert!(matches!(scene.environment, Environment::Container { .. }));
    let quick = SettleConfig {
        max_iterations: 2000,
        ..SettleConfig::default()
    };
    assert!(settle(&scene, &quick, 1).is_err());
}

#[test]
fn height_perturbation_spans_one_period() {
    let (f, amp, h0) = (21, 0.1, 0.3);
    let t = sample_trajectory([0.0; 3], 1.0, h0, f, amp, 1.0, 0).unwrap();
    let heights: Vec<f64> = t.poses.iter().map(|p| p.position[2]).collect();
    for (k, h) in heights.iter().enumerate() {
        let oracle = h0 + amp * (std::f64::consts::TAU * k as f64 / f as f64).sin();
        assert!((h - oracle).abs() < 1e-12);
    }
    let signs: Vec<bool> = heights[1..].iter().map(|h| *h > h0).collect();
    let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(
        changes, 1,
        "one full period crosses the mid-height once inside the sweep"
    );
    let next_cycle = h0 + amp * (std::f64::consts::TAU * f as f64 / f as f64).sin();
    assert!((next_cycle - heights[0]).abs() < 1e-12);
}

#[test]
fn orbits_keep_the_centre_in_view_with_bounded_steps() {
    let bank = AssetBank::standard();
    for seed in 0..10 {
        let s = generate_scene(&bank, &SceneConfig::default(), &SettleConfig::default(), seed, 8).unwrap();
        let (_, extent) = scene_extent(&s).unwrap();
        let t = orbit_for_scene(&s, &TrajectoryConfig::default(), seed).unwrap();
        assert!(t.radius > extent);
        let bound = t.radius * std::f64::consts::TAU / t.frames() as f64 + 2.0 * t.perturb_amp;
        for w in t.poses.windows(2) {
            let step = (Vec3::from(w[1].position) - Vec3::from(w[0].position)).norm();
            assert!(step < bound, "{step} >= {bound}");
        }
        for p in &t.poses {
            let cam = Camera::look_at(p, 64, 64, 50.0).unwrap();
            let c = Vec3::from(t.center) - cam.eye;
            let z = c.dot(&cam.forward);
            let k = cam.intrinsics;
            let u = k.cx + k.fx * c.dot(&cam.right) / z;
            let v = k.cy - k.fy * c.dot(&cam.up) / z;
            assert!(z > 0.0 && (0.0..64.0).contains(&u) && (0.0..64.0).contains(&v));
        }
    }
}
