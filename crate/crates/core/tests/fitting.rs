use std::path::Path;

use handfit::fit::*;
use handfit::render::DepthMap;
use handfit::synth::*;

fn small_synth() -> SynthConfig {
    SynthConfig {
        seed: 11,
        vertex_budget: 800,
        n_train: 4,
        n_test: 1,
        image_width: 96,
        image_height: 96,
        focal: 340.0,
        hidden: 32,
        ..SynthConfig::default()
    }
}

fn small_fit() -> FitConfig {
    FitConfig {
        lr: 3e-4,
        pose_lr: 2e-2,
        epochs: 4,
        lr_drop_epochs: vec![3],
        batch_size: 2,
        views_per_frame: 2,
        ..FitConfig::default()
    }
}

fn setup() -> (Subject, Dataset) {
    let cfg = small_synth();
    let s = generate_subject(&cfg).unwrap();
    let ds = generate_dataset(&s, &cfg).unwrap();
    (s, ds)
}

#[test]
fn dataset_round_trips_through_disk() {
    let (s, ds) = setup();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &s.model, &ds).unwrap();
    let (model, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(model, s.model);
    assert_eq!(back.cameras, ds.cameras);
    assert_eq!(back.train.len(), ds.train.len());
    assert_eq!(back.test.len(), ds.test.len());
    for (a, b) in back.train.iter().chain(&back.test).zip(ds.train.iter().chain(&ds.test)) {
        assert_eq!(a.joints, b.joints);
        let q: Vec<DepthMap> = b.depth.iter().map(DepthMap::quantized).collect();
        assert_eq!(a.depth, q);
    }
}

#[test]
fn resuming_from_a_checkpoint_is_bit_identical() {
    let (s, ds) = setup();
    let cfg = small_fit();
    let mut straight = FitState::new(&s.model, ds.train.len(), &cfg).unwrap();
    fit_with(&mut straight, &s.model, &ds, None, |_, _| {}).unwrap();

    let mut first = FitState::new(&s.model, ds.train.len(), &cfg).unwrap();
    for _ in 0..3 {
        fit_step(&mut first, &s.model, &ds).unwrap();
    }
    let bytes = encode_checkpoint(&first).unwrap();
    let mut resumed = decode_checkpoint(&bytes, &s.model, Path::new("mem")).unwrap();
    assert_eq!(resumed, first);
    fit_with(&mut resumed, &s.model, &ds, None, |_, _| {}).unwrap();
    assert_eq!(encode_checkpoint(&resumed).unwrap(), encode_checkpoint(&straight).unwrap());
}

#[test]
fn all_losses_off_leaves_parameters_unchanged() {
    let (s, ds) = setup();
    let cfg = FitConfig {
        losses: LossToggles::none(),
        ..small_fit()
    };
    let mut state = FitState::new(&s.model, ds.train.len(), &cfg).unwrap();
    for p in &mut state.poses {
        let v: Vec<f64> = (0..s.model.num_dofs()).map(|i| 0.01 * i as f64).collect();
        p.set_value(handfit::diff::Tensor::from_vec(v)).unwrap();
    }
    let before = state.clone();
    for _ in 0..3 {
        let b = fit_step(&mut state, &s.model, &ds).unwrap();
        assert_eq!(b.total, 0.0);
    }
    assert_eq!(state.nets, before.nets);
    assert_eq!(state.poses, before.poses);
}

#[test]
fn identity_code_is_never_updated() {
    let (s, ds) = setup();
    let cfg = small_fit();
    let mut state = FitState::new(&s.model, ds.train.len(), &cfg).unwrap();
    let beta = state.beta.clone();
    let nets = state.nets.clone();
    fit_with(&mut state, &s.model, &ds, None, |_, _| {}).unwrap();
    assert_eq!(state.beta, beta);
    assert_ne!(state.nets, nets);
}

#[test]
fn loss_decreases_over_first_ten_iterations() {
    let (s, ds) = setup();
    let cfg = FitConfig {
        epochs: 10,
        lr_drop_epochs: vec![],
        ..FitConfig::default()
    };
    let state = fit(&ds, &s.model, &cfg).unwrap();
    let h = &state.history;
    assert_eq!(h.len(), 10);
    assert!(h[9].total < 0.9 * h[0].total, "{} -> {}", h[0].total, h[9].total);
}

#[test]
fn warm_start_moves_joints_towards_targets() {
    let (s, ds) = setup();
    let cfg = FitConfig {
        warmup_iterations: 60,
        ..small_fit()
    };
    let state = FitState::new(&s.model, ds.train.len(), &cfg).unwrap();
    let init = warm_start_poses(&s.model, &state.nets, &state.beta, &ds.cameras, &cfg, &ds.train).unwrap();
    let ctx = IterationContext::new(&s.model, &state.nets, &state.beta, &ds.cameras, &cfg).unwrap();
    let zero = vec![0.0; s.model.num_dofs()];
    let wants = Wants { pose: false, nets: false };
    for (f, u) in ds.train.iter().zip(&init) {
        let a = frame_pass(&ctx, f, &zero, &[], wants).unwrap();
        let b = frame_pass(&ctx, f, u, &[], wants).unwrap();
        assert!(p_err(&b.joints, &f.joints).unwrap() < p_err(&a.joints, &f.joints).unwrap());
    }
    let off = FitConfig { warmup_iterations: 0, ..cfg };
    let zeros = warm_start_poses(&s.model, &state.nets, &state.beta, &ds.cameras, &off, &ds.train).unwrap();
    assert!(zeros.iter().all(|u| u.iter().all(|&x| x == 0.0)));
}

#[test]
fn batches_cover_every_frame_once_per_epoch() {
    let cfg = FitConfig {
        batch_size: 3,
        ..FitConfig::default()
    };
    for epoch in 0..3u64 {
        let ipe = cfg.iterations_per_epoch(8) as u64;
        let mut seen: Vec<usize> = (0..ipe).flat_map(|k| batch_frames(&cfg, 8, epoch * ipe + k)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }
    let v = sample_views(&cfg, 8, 5, 2);
    assert_eq!(v.len(), 6);
    assert!(v.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn metrics_report_has_one_row_per_frame() {
    let (s, ds) = setup();
    let state = FitState::new(&s.model, ds.train.len(), &small_fit()).unwrap();
    let r = training_metrics(&state, &s.model, &ds).unwrap();
    assert_eq!(r.frames.len(), ds.train.len());
    assert_eq!(r.to_csv().lines().count(), ds.train.len() + 1);
}
