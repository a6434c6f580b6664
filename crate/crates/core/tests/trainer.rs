use clickvos_core::model::{AbsModel, MemoryFlags, ModelConfig, ObjMemMode};
use clickvos_core::synth::{SceneSampler, VideoSample};
use clickvos_core::train::{train, window_step, TrainConfig, TrainLog};
use clickvos_core::Error;

fn tiny_model() -> AbsModel {
    AbsModel::new(ModelConfig {
        channels: 8,
        n_heads: 2,
        stride: 4,
        n_max: 3,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn tiny_set(n: u64) -> Vec<VideoSample> {
    let sampler = SceneSampler {
        height: 32,
        width: 32,
        frames: 4,
        size_range: [8.0, 12.0],
        ..SceneSampler::default()
    };
    (0..n).map(|i| sampler.sample(500 + i).unwrap().1).collect()
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        t_train: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let mut model = tiny_model();
    let data = tiny_set(1);
    let window = data[0].window(0, 3);
    window_step(&mut model, &window, 7, &cfg(1)).unwrap();
    for prefix in ["enc.img", "enc.flow", "enc.meb1", "enc.meb2", "enc.fusion", "bank", "seg.self", "seg.cross", "dec."] {
        let norm: f64 = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.grad.as_ref().map_or(0.0, |g| g.iter().map(|v| v * v).sum()))
            .sum();
        assert!(norm > 0.0, "no gradient reached {prefix}");
    }
}

#[test]
fn initial_loss_is_near_uniform_predictor() {
    let mut model = tiny_model();
    let data = tiny_set(1);
    let window = data[0].window(0, 3);
    let c = TrainConfig {
        bootstrap_ratio: 1.0,
        ..cfg(1)
    };
    let l = window_step(&mut model, &window, 7, &c).unwrap();
    let per_frame = l.ce / 3.0;
    let uniform = 3f64.ln();
    assert!((per_frame - uniform).abs() < 0.2 * uniform, "{per_frame}");
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = tiny_set(4);
    let run = || {
        let mut model = tiny_model();
        let mut log = TrainLog::default();
        train(&mut model, &data, &[], &cfg(12), &mut log).unwrap();
        (model, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la.rows, lb.rows);
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.data(), y.data());
    }
    let first = la.rows[..3].iter().map(|r| r.total).sum::<f64>();
    let last = la.rows[9..].iter().map(|r| r.total).sum::<f64>();
    assert!(last < first, "{first} -> {last}");
    assert!(la.to_csv().starts_with("step,ce,dice,total,val_J,val_F\n"));
}

#[test]
fn detached_memory_and_ablation_flags_train() {
    let data = tiny_set(2);
    let mut model = tiny_model();
    let mut log = TrainLog::default();
    let c = TrainConfig {
        detach_memory: true,
        memory: MemoryFlags {
            objmem: ObjMemMode::FirstOnly,
            dense: false,
        },
        ..cfg(2)
    };
    train(&mut model, &data, &[], &c, &mut log).unwrap();
    assert_eq!(log.rows.len(), 2);
}

#[test]
fn absurd_learning_rate_reports_divergence() {
    let data = tiny_set(2);
    let mut model = tiny_model();
    let mut log = TrainLog::default();
    let c = TrainConfig { lr: 1e300, ..cfg(5) };
    match train(&mut model, &data, &[], &c, &mut log) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(model.params.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn invalid_configs_are_rejected() {
    let data = tiny_set(1);
    let mut model = tiny_model();
    let mut log = TrainLog::default();
    for c in [
        TrainConfig { t_train: 1, ..cfg(1) },
        TrainConfig { bootstrap_ratio: 0.0, ..cfg(1) },
        TrainConfig { t_train: 9, ..cfg(1) },
        TrainConfig { ema_decay: 1.0, ..cfg(1) },
        TrainConfig { ema_decay: -0.1, ..cfg(1) },
    ] {
        assert!(train(&mut model, &data, &[], &c, &mut log).is_err());
    }
}

fn values(model: &AbsModel) -> Vec<f64> {
    model.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn short_window_phase_matches_two_frame_training() {
    let data = tiny_set(3);
    let mut a = tiny_model();
    let mut b = tiny_model();
    let short = TrainConfig {
        short_window_steps: 3,
        ..cfg(3)
    };
    let two = TrainConfig { t_train: 2, ..cfg(3) };
    train(&mut a, &data, &[], &short, &mut TrainLog::default()).unwrap();
    train(&mut b, &data, &[], &two, &mut TrainLog::default()).unwrap();
    assert_eq!(values(&a), values(&b));

    let mut c = tiny_model();
    let mixed = TrainConfig {
        short_window_steps: 1,
        ..cfg(3)
    };
    train(&mut c, &data, &[], &mixed, &mut TrainLog::default()).unwrap();
    assert_ne!(values(&a), values(&c));
}

#[test]
fn averaged_weights_blend_start_and_end() {
    let data = tiny_set(2);
    let start = values(&tiny_model());
    let mut last = tiny_model();
    train(&mut last, &data, &[], &cfg(1), &mut TrainLog::default()).unwrap();
    let mut averaged = tiny_model();
    let d = 0.75;
    let c = TrainConfig { ema_decay: d, ..cfg(1) };
    train(&mut averaged, &data, &[], &c, &mut TrainLog::default()).unwrap();
    for ((s, l), a) in start.iter().zip(values(&last)).zip(values(&averaged)) {
        assert!((a - (d * s + (1.0 - d) * l)).abs() <= 1e-12);
    }
}
