use std::fs;

use masklift::io::{load_scene, read_ply, save_labels, write_gray16, write_ply, IoError};
use masklift::synth::{generate_scene, SynthSpec};
use masklift::{LabelArray, PointCloud};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn saved_scene() -> (tempfile::TempDir, masklift::SceneBundle) {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SynthSpec {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    scene.save(dir.path()).unwrap();
    (dir, scene.bundle)
}

#[test]
fn scene_round_trip_is_exact() {
    let (dir, bundle) = saved_scene();
    assert_eq!(load_scene(dir.path()).unwrap(), bundle);
}

#[test]
fn million_point_ply_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<Point3<f64>> = (0..1_000_000)
        .map(|_| {
            Point3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-5.0..5.0),
            )
        })
        .collect();
    let cloud = PointCloud::from_positions(pts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.ply");
    write_ply(&cloud, &path).unwrap();
    let back = read_ply(&path).unwrap();
    assert_eq!(back.len(), cloud.len());
    for (a, b) in back.positions().iter().zip(cloud.positions()) {
        assert!((a - b).norm() <= 1e-9);
    }
}

#[test]
fn missing_view_file_is_named() {
    let (dir, bundle) = saved_scene();
    let name = &bundle.views[2].name;
    fs::remove_file(dir.path().join(format!("views/{name}.mask.png"))).unwrap();
    let err = load_scene(dir.path()).unwrap_err();
    assert!(matches!(err, IoError::Io { .. }), "{err:?}");
    assert!(err.to_string().contains(&format!("{name}.mask.png")));
}

#[test]
fn wrong_depth_resolution_names_the_view() {
    let (dir, bundle) = saved_scene();
    let name = &bundle.views[1].name;
    let path = dir.path().join(format!("views/{name}.depth.png"));
    write_gray16(&path, 10, 10, &[1000; 100]).unwrap();
    let err = load_scene(dir.path()).unwrap_err().to_string();
    assert!(err.contains(name.as_str()), "{err}");
}

#[test]
fn out_of_range_sparse_label_is_rejected() {
    let (dir, bundle) = saved_scene();
    let mut sparse = bundle.sparse.clone();
    sparse.set(7, Some(bundle.meta.num_classes as u32));
    save_labels(&sparse, &dir.path().join("sparse.labels")).unwrap();
    let err = load_scene(dir.path()).unwrap_err().to_string();
    assert!(err.contains("sparse.labels"), "{err}");

    save_labels(&LabelArray::ignored(3), &dir.path().join("sparse.labels")).unwrap();
    assert!(load_scene(dir.path()).is_err());
}
