//! Epoch loop: shuffling, per-epoch clip resampling, mini-batch Adam,
//! validation-driven plateau scheduling and best-checkpoint selection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, ValMetric};
use crate::embeddings::{sample_clip, EmbeddingClip, Label};
use crate::encoder::Dropout;
use crate::error::{CmtaError, Result};
use crate::metrics::{accuracy, auc, ScoredPrediction, ACC_THRESHOLD};
use crate::model::{dropout_rng, Model};
use crate::optim::{AdamState, PlateauScheduler};
use crate::parallel::{self, chunked_fold, Execution};
use crate::tensor::{c, Real, Tensor};

/// Clips per gradient partial sum. Fixed so the reduction order never
/// depends on the thread count.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,lr\n");
    for e in log {
        let _ = writeln!(out, "{},{:.9},{:.9},{:e}", e.epoch, e.train_loss, e.val_metric, e.lr);
    }
    out
}

pub struct TrainOutcome<F> {
    /// Snapshot taken at the epoch with the best validation metric.
    pub best: Checkpoint<F>,
    pub log: Vec<EpochLog>,
}

/// How a fixed-length window is chosen from each clip at scoring time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSampling {
    /// Start at `⌊(N − T)/2⌋`.
    Center,
    /// Uniform random start from a seeded stream per clip.
    Random { seed: u64 },
}

fn window(clip: &EmbeddingClip, len: usize, sampling: EvalSampling, index: usize) -> Result<EmbeddingClip> {
    match sampling {
        EvalSampling::Center => clip.center_clip(len),
        EvalSampling::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            sample_clip(clip, len, &mut rng)
        }
    }
}

/// Scores every clip with the fake-class probability, in input order.
pub fn score_clips<F: Real>(
    model: &Model<F>,
    clips: &[EmbeddingClip],
    sampling: EvalSampling,
    exec: Execution,
) -> Result<Vec<ScoredPrediction>> {
    let len = model.config.clip_len;
    parallel::map_range(clips.len(), exec, |i| {
        let w = window(&clips[i], len, sampling, i)?;
        let (_, p_fake) = model.predict(&w)?;
        Ok(ScoredPrediction::new(clips[i].clip_id.clone(), p_fake.to_f64(), clips[i].label))
    })
    .into_iter()
    .collect()
}

/// Pre-head feature vector of every clip, in input order.
pub fn clip_features<F: Real>(
    model: &Model<F>,
    clips: &[EmbeddingClip],
    sampling: EvalSampling,
    exec: Execution,
) -> Result<Vec<Vec<F>>> {
    let len = model.config.clip_len;
    parallel::map_range(clips.len(), exec, |i| model.features(&window(&clips[i], len, sampling, i)?))
        .into_iter()
        .collect()
}

/// Validation metric on center windows. For [`ValMetric::Loss`] this is the
/// mean BCE; everything else is higher-is-better.
pub fn validation_metric<F: Real>(
    model: &Model<F>,
    clips: &[EmbeddingClip],
    metric: ValMetric,
    exec: Execution,
) -> Result<f64> {
    match metric {
        ValMetric::Auc => auc(&score_clips(model, clips, EvalSampling::Center, exec)?),
        ValMetric::Acc => accuracy(&score_clips(model, clips, EvalSampling::Center, exec)?, ACC_THRESHOLD),
        ValMetric::Loss => {
            let len = model.config.clip_len;
            let losses = parallel::map(clips, exec, |c| Ok(model.loss(&c.center_clip(len)?)?.to_f64()));
            let losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
            Ok(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }
}

fn check_dims(clips: &[EmbeddingClip], d_v: usize, d_e: usize, what: &str) -> Result<()> {
    match clips.iter().find(|c| c.visual_dim() != d_v || c.textual_dim() != d_e) {
        Some(c) => Err(CmtaError::config(format!(
            "{what} clip `{}` has d_v={}, d_e={}; expected d_v={d_v}, d_e={d_e}",
            c.clip_id,
            c.visual_dim(),
            c.textual_dim()
        ))),
        None => Ok(()),
    }
}

/// Mean loss and mean gradient over one batch.
pub fn batch_gradient<F: Real>(
    model: &Model<F>,
    batch: &[(usize, EmbeddingClip)],
    dropout: f64,
    seed: u64,
    step: u64,
    exec: Execution,
) -> Result<(f64, Vec<Tensor<F>>)> {
    type Acc<F> = Result<(F, Vec<Tensor<F>>)>;
    let init = || -> Acc<F> { Ok((F::zero(), model.store.zeros_like())) };
    let (loss, mut grads) = chunked_fold(
        batch,
        GRAD_CHUNK,
        exec,
        init,
        |acc, (index, clip)| {
            let (mut loss, mut grads) = acc?;
            let l = if dropout > 0.0 {
                let mut rng = dropout_rng(seed, step, *index as u64);
                let mut d = Dropout { rate: dropout, rng: &mut rng };
                model.loss_and_grad(clip, &mut grads, Some(&mut d))?
            } else {
                model.loss_and_grad(clip, &mut grads, None)?
            };
            loss = loss + l;
            Ok((loss, grads))
        },
        |a, b| {
            let (la, mut ga) = a?;
            let (lb, gb) = b?;
            for (x, y) in ga.iter_mut().zip(&gb) {
                x.add_assign(y);
            }
            Ok((la + lb, ga))
        },
    )?;
    let inv = F::one() / c::<F>(batch.len() as f64);
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok((loss.to_f64() / batch.len() as f64, grads))
}

/// Trains from scratch. `on_epoch` sees each log row as it is produced.
pub fn train<F: Real>(
    config: &TrainConfig,
    train_clips: &[EmbeddingClip],
    val_clips: &[EmbeddingClip],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    let first = train_clips
        .first()
        .ok_or_else(|| CmtaError::config("training set is empty"))?;
    if val_clips.is_empty() {
        return Err(CmtaError::config("validation set is empty"));
    }
    let classes = |cs: &[EmbeddingClip]| {
        let fake = cs.iter().filter(|c| c.label == Label::Fake).count();
        (cs.len() - fake, fake)
    };
    let (real, fake) = classes(train_clips);
    if real == 0 || fake == 0 {
        return Err(CmtaError::config(format!(
            "training data must contain both classes ({real} real, {fake} fake)"
        )));
    }
    if config.val_metric == ValMetric::Auc {
        let (vr, vf) = classes(val_clips);
        if vr == 0 || vf == 0 {
            return Err(CmtaError::config("validation AUC needs both classes in the validation set"));
        }
    }
    let (d_v, d_e) = (first.visual_dim(), first.textual_dim());
    check_dims(train_clips, d_v, d_e, "training")?;
    check_dims(val_clips, d_v, d_e, "validation")?;

    let exec = config.execution;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: Model<F> = Model::init(config.model_config(d_v, d_e), &mut rng)?;
    let mut adam = AdamState::new(&model.store);
    let mut scheduler = PlateauScheduler::new(config.lr, config.lr_factor, config.lr_patience, config.lr_threshold)?;

    let frozen: Option<Vec<EmbeddingClip>> = if config.freeze_clips {
        Some(
            train_clips
                .iter()
                .map(|c| sample_clip(c, config.clip_len, &mut rng))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let higher_is_better = config.val_metric != ValMetric::Loss;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint<F>> = None;
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        let lr = scheduler.lr;
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        order.shuffle(&mut rng);
        let windows: Vec<(usize, EmbeddingClip)> = order
            .iter()
            .map(|&i| {
                let w = match &frozen {
                    Some(f) => f[i].clone(),
                    None => sample_clip(&train_clips[i], config.clip_len, &mut rng)?,
                };
                Ok((i, w))
            })
            .collect::<Result<_>>()?;

        let mut loss_sum = 0.0;
        for batch in windows.chunks(config.batch_size) {
            let (loss, grads) = batch_gradient(&model, batch, config.dropout, config.seed, step, exec)?;
            adam.step(&mut model.store, &grads, lr)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / windows.len() as f64;

        let val_metric = validation_metric(&model, val_clips, config.val_metric, exec)?;
        scheduler.step(if higher_is_better { val_metric } else { -val_metric });

        let row = EpochLog {
            epoch,
            train_loss,
            val_metric,
            lr,
        };
        on_epoch(&row);
        log.push(row);

        let improved = match &best {
            None => true,
            Some(b) if higher_is_better => val_metric > b.best_metric,
            Some(b) => val_metric < b.best_metric,
        };
        if improved {
            best = Some(Checkpoint {
                train_config: config.clone(),
                model: model.clone(),
                adam: adam.clone(),
                scheduler: scheduler.clone(),
                epoch: epoch as u32,
                best_metric: val_metric,
            });
        }
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;
    use crate::synthetic::gen_clips;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            clip_len: 8,
            hidden: 8,
            model_dim: 8,
            layers: 1,
            heads: 2,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> Vec<EmbeddingClip> {
        gen_clips(
            &SynthConfig {
                n_clips: n,
                seed,
                ..SynthConfig::default()
            },
            Execution::Parallel,
        )
        .unwrap()
    }

    #[test]
    fn single_class_rejected() {
        let clips: Vec<_> = data(10, 1).into_iter().filter(|c| c.label == Label::Real).collect();
        let err = train::<f32>(&tiny_config(), &clips, &clips, |_| {}).err().unwrap();
        assert!(matches!(err, CmtaError::Config(_)));
    }

    #[test]
    fn deterministic_and_best_matches_log() {
        let (tr, va) = (data(24, 1), data(8, 2));
        let a = train::<f32>(&tiny_config(), &tr, &va, |_| {}).unwrap();
        let b = train::<f32>(&tiny_config(), &tr, &va, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
        let max = a.log.iter().map(|e| e.val_metric).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best.best_metric, max);
        assert_eq!(a.log.len(), 3);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let (tr, va) = (data(20, 3), data(6, 4));
        let mut cfg = tiny_config();
        cfg.execution = Execution::Sequential;
        let a = train::<f32>(&cfg, &tr, &va, |_| {}).unwrap();
        cfg.execution = Execution::Parallel;
        let b = train::<f32>(&cfg, &tr, &va, |_| {}).unwrap();
        assert_eq!(a.best.model.store, b.best.model.store);
    }

    #[test]
    fn loss_metric_and_dropout_run() {
        let (tr, va) = (data(12, 5), data(4, 6));
        let mut cfg = tiny_config();
        cfg.val_metric = ValMetric::Loss;
        cfg.dropout = 0.1;
        cfg.freeze_clips = true;
        let out = train::<f32>(&cfg, &tr, &va, |_| {}).unwrap();
        let min = out.log.iter().map(|e| e.val_metric).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.best_metric, min);
    }

    #[test]
    fn log_csv_header() {
        let csv = epoch_log_csv(&[EpochLog {
            epoch: 1,
            train_loss: 0.5,
            val_metric: 0.75,
            lr: 1e-4,
        }]);
        assert!(csv.starts_with("epoch,train_loss,val_metric,lr\n1,0.500000000,0.750000000,1e-4"));
    }
}
