use std::path::Path;

use dopnet_core::layout::{rasterize_plane_mask, raycast_depth, Layout};
use dopnet_core::model::DopNet;
use dopnet_core::scene::{self, load_image, RoomFiles, SceneSpec};
use dopnet_core::sphere::EquirectGrid;
use dopnet_core::train::{self, RunConfig, Sample, TraceEntry};

fn grid() -> EquirectGrid {
    EquirectGrid::new(64, 128).unwrap()
}

fn dataset(dir: &Path, seed: u64, rooms: usize) -> Vec<Sample> {
    scene::gen(&SceneSpec::new(seed, rooms, 4, grid()), dir).unwrap();
    let config = RunConfig::default().model_config(64);
    scene::load_dataset(dir)
        .unwrap()
        .iter()
        .map(|r| Sample::from_room(r, &config))
        .collect::<Result<_, _>>()
        .unwrap()
}

fn run(samples: &[Sample], steps: usize, lr: f64) -> (DopNet, Vec<TraceEntry>) {
    let config = RunConfig {
        steps,
        lr,
        ..RunConfig::default()
    };
    let out = train::train(&config, samples, |_| {}).unwrap();
    (out.net, out.trace)
}

#[test]
fn generation_is_byte_identical_for_a_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SceneSpec::new(7, 3, 6, grid());
    scene::gen(&spec, a.path()).unwrap();
    scene::gen(&spec, b.path()).unwrap();
    for k in 0..3 {
        let (fa, fb) = (RoomFiles::new(a.path(), k), RoomFiles::new(b.path(), k));
        for (pa, pb) in [(fa.layout, fb.layout), (fa.image, fb.image), (fa.depth, fb.depth), (fa.mask, fb.mask)] {
            assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "{}", pa.display());
        }
    }
    assert!(!RoomFiles::new(a.path(), 3).layout.exists());
}

#[test]
fn stored_rooms_match_their_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let layouts = scene::gen(&SceneSpec::new(3, 4, 4, grid()), dir.path()).unwrap();
    let rooms = scene::load_dataset(dir.path()).unwrap();
    assert_eq!(rooms.len(), 4);
    for (k, (room, layout)) in rooms.iter().zip(&layouts).enumerate() {
        assert_eq!(&room.layout, layout);
        assert!(layout.is_manhattan());
        let want = raycast_depth(layout, 128).unwrap();
        // depth files go through JSON, which round-trips f64 exactly
        assert_eq!(room.depth, want);
        let mask = rasterize_plane_mask(layout, grid()).unwrap();
        let stored = load_image(&RoomFiles::new(dir.path(), k).mask).unwrap();
        for i in 0..64 {
            for j in 0..128 {
                assert_eq!(stored.at(&[0, i, j]), mask.mask.at(&[i, j]), "room {k} pixel ({i}, {j})");
            }
        }
    }
}

#[test]
fn cuboid_rooms_cast_their_analytic_depth() {
    for (hx, hz) in [(2.0, 3.0), (1.5, 1.5), (3.0, 1.2), (2.5, 4.0)] {
        let layout = Layout::cuboid(hx, hz, 3.0, 1.6).unwrap();
        let hd = raycast_depth(&layout, 256).unwrap();
        for (j, d) in hd.depth.iter().enumerate() {
            let u = grid_lon(j, 256);
            let want = (hx / u.sin().abs()).min(hz / u.cos().abs());
            assert!((d - want).abs() < 1e-12 * want, "{hx}x{hz} column {j}");
        }
    }
}

fn grid_lon(j: usize, w: usize) -> f64 {
    2.0 * std::f64::consts::PI * (j as f64 + 0.5) / w as f64 - std::f64::consts::PI
}

#[test]
fn zero_learning_rate_keeps_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 0, 1);
    let (_, trace) = run(&samples, 4, 0.0);
    assert_eq!(trace.len(), 5);
    assert!(trace.iter().all(|e| e.loss == trace[0].loss));
    assert_eq!(trace.iter().map(|e| e.step).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn training_is_reproducible_and_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 1, 2);
    let (net, a) = run(&samples, 6, 1e-3);
    let (_, b) = run(&samples, 6, 1e-3);
    assert_eq!(a, b);
    assert!(a.last().unwrap().loss.total < a[0].loss.total);
    for e in &a {
        let l = e.loss;
        assert_eq!(l.total, 0.75 * l.segment + l.layout());
    }

    let path = dir.path().join("net.dopw");
    net.params.save(&path).unwrap();
    let loaded = DopNet::load(&path).unwrap();
    assert_eq!(loaded.config, net.config);
    // weights are stored at f32, so predictions agree to f32 precision
    let p0 = net.predict(&samples[0].image).unwrap();
    let p1 = loaded.predict(&samples[0].image).unwrap();
    let rel = p0.depth.max_abs_diff(&p1.depth) / p0.depth.data().iter().cloned().fold(0.0, f64::max);
    assert!(rel < 1e-4, "{rel}");
    assert!((p0.height - p1.height).abs() < 1e-4 * p0.height);
}

#[test]
fn bad_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(scene::load_dataset(dir.path()).is_err());
    assert!(scene::gen(&SceneSpec::new(0, 1, 5, grid()), dir.path()).is_err());
    assert!(scene::gen(&SceneSpec::new(0, 1, 14, grid()), dir.path()).is_err());
    let samples = dataset(dir.path(), 0, 1);
    let bad = RunConfig {
        channels: 6,
        heads: 4,
        ..RunConfig::default()
    };
    assert!(train::train(&bad, &samples, |_| {}).is_err());
    let negative = RunConfig {
        lr: -1.0,
        ..RunConfig::default()
    };
    assert!(train::train(&negative, &samples, |_| {}).is_err());
    assert!(train::train(&RunConfig::default(), &[], |_| {}).is_err());
}
