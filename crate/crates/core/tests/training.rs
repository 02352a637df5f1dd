use cmta::config::{SynthConfig, TrainConfig};
use cmta::parallel::Execution;
use cmta::synthetic::gen_clips;
use cmta::trainer::{epoch_log_csv, train};

fn clips(n: usize, seed: u64) -> Vec<cmta::embeddings::EmbeddingClip> {
    let cfg = SynthConfig {
        n_clips: n,
        seed,
        ..SynthConfig::default()
    };
    gen_clips(&cfg, Execution::Parallel).unwrap()
}

#[test]
fn overfits_a_small_set() {
    let data = clips(16, 21);
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 32,
        lr: 1e-3,
        hidden: 16,
        model_dim: 16,
        layers: 1,
        heads: 2,
        val_metric: cmta::config::ValMetric::Loss,
        ..TrainConfig::default()
    };
    let mut first_below = None;
    let out = train::<f32>(&cfg, &data, &data[..4], |e| {
        if e.train_loss < 0.05 && first_below.is_none() {
            first_below = Some(e.epoch);
        }
    })
    .unwrap();
    // One optimizer step per epoch.
    let step = first_below.unwrap_or_else(|| panic!("final loss {}", out.log.last().unwrap().train_loss));
    assert!(step <= 500);
}

#[test]
fn f64_single_threaded_runs_are_bit_identical() {
    let (tr, va) = (clips(24, 3), clips(6, 4));
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        lr: 1e-3,
        hidden: 8,
        model_dim: 8,
        layers: 2,
        heads: 2,
        dropout: 0.1,
        execution: Execution::Sequential,
        ..TrainConfig::default()
    };
    let a = train::<f64>(&cfg, &tr, &va, |_| {}).unwrap();
    let b = train::<f64>(&cfg, &tr, &va, |_| {}).unwrap();
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(epoch_log_csv(&a.log), epoch_log_csv(&b.log));
    for (x, y) in a.best.model.store.tensors().iter().zip(b.best.model.store.tensors()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn parallel_matches_sequential_bitwise() {
    let (tr, va) = (clips(40, 5), clips(6, 6));
    let mut cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        hidden: 8,
        model_dim: 8,
        layers: 1,
        heads: 2,
        execution: Execution::Sequential,
        ..TrainConfig::default()
    };
    let a = train::<f32>(&cfg, &tr, &va, |_| {}).unwrap();
    cfg.execution = Execution::Parallel;
    let b = train::<f32>(&cfg, &tr, &va, |_| {}).unwrap();
    // The embedded configs differ in `execution`; everything learned must not.
    assert_eq!(a.best.model, b.best.model);
    assert_eq!(a.best.adam, b.best.adam);
    assert_eq!(epoch_log_csv(&a.log), epoch_log_csv(&b.log));
}

#[test]
fn learning_rate_log_is_a_power_of_half() {
    let (tr, va) = (clips(8, 7), clips(4, 8));
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        hidden: 4,
        model_dim: 4,
        layers: 1,
        heads: 1,
        lr_patience: 1,
        ..TrainConfig::default()
    };
    let out = train::<f32>(&cfg, &tr, &va, |_| {}).unwrap();
    let mut prev = cfg.lr;
    for e in &out.log {
        let k = (cfg.lr / e.lr).log2().round() as i32;
        assert_eq!(e.lr, cfg.lr * 0.5f64.powi(k));
        assert!(e.lr <= prev);
        prev = e.lr;
    }
}
