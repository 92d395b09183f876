//! Training loops: joint unsupervised training over triplets, pose
//! fine-tuning with reweighted heatmap gradients, action fine-tuning, and
//! checkpoint persistence.

mod action;
mod checkpoint;
mod pose;

pub use action::{finetune_action, ActionOutcome, ActionTrainConfig};
pub use checkpoint::{fingerprint, Checkpoint, HistoryRecord, MPCK_MAGIC, MPCK_VERSION};
pub use pose::{
    crop_figure, finetune_pose, pose_target_heatmaps, reweighted_euclidean_grad, FigureCrop,
    PoseOutcome, PoseTrainConfig,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::nets::{JointModel, NetError};
use crate::sampler::{BatchConfig, SamplerError, TripletSampler};
use crate::tensor::{sgd_momentum_step, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    CheckpointFormat { path: String, reason: String },
    #[error("checkpoint fingerprint {found:#018x} does not match the model's {expected:#018x}; {diff}")]
    FingerprintMismatch {
        expected: u64,
        found: u64,
        diff: String,
    },
    #[error("clip `{0}` has no joint annotations")]
    MissingAnnotations(String),
    #[error("clip `{clip}` has label {label}, but the model has {classes} classes")]
    LabelOutOfRange {
        clip: String,
        label: usize,
        classes: usize,
    },
    #[error("clip `{0}` has no action label")]
    MissingLabel(String),
    #[error("not enough clips: {0}")]
    NotEnoughClips(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

/// Unsupervised training configuration. The learning-rate schedule is an
/// ordered list of (rate, iteration count) segments.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch: BatchConfig,
    pub schedule: Vec<(f32, usize)>,
    pub momentum: f32,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub validation_fraction: f32,
    /// Held-out evaluation set size, counted in positives (each positive
    /// brings `negatives_per_positive` negatives).
    pub eval_positives: usize,
}

impl TrainConfig {
    /// Desk-scale preset: 24-sample batches (8 positives at 1:2),
    /// 2000 iterations at 1e-2 then 1000 at 1e-3, momentum 0.9.
    pub fn mini() -> TrainConfig {
        TrainConfig {
            batch: BatchConfig {
                positives: 8,
                negatives_per_positive: 2,
                frame_gap: 4,
                patch_size: 64,
                p_flip: 0.5,
                p_reverse: 0.5,
            },
            schedule: vec![(1e-2, 2000), (1e-3, 1000)],
            momentum: 0.9,
            seed: 0,
            checkpoint_interval: 250,
            validation_fraction: 0.2,
            eval_positives: 100,
        }
    }

    /// Full-scale preset: 128 appearance pairs per batch, 75k iterations at
    /// 1e-3 then 25k at 1e-4, momentum 0.9. Kept for reference; not runnable
    /// at desk scale.
    pub fn paper() -> TrainConfig {
        TrainConfig {
            batch: BatchConfig {
                positives: 128,
                negatives_per_positive: 2,
                frame_gap: 12,
                patch_size: 224,
                p_flip: 0.5,
                p_reverse: 0.5,
            },
            schedule: vec![(1e-3, 75_000), (1e-4, 25_000)],
            momentum: 0.9,
            seed: 0,
            checkpoint_interval: 1000,
            validation_fraction: 0.2,
            eval_positives: 500,
        }
    }

    pub fn preset(name: &str) -> Option<TrainConfig> {
        match name {
            "mini" => Some(TrainConfig::mini()),
            "paper" => Some(TrainConfig::paper()),
            _ => None,
        }
    }
}

/// Deterministic held-out split: clip ids ranked by FNV-1a hash, the top
/// `fraction` (at least one, leaving at least two for training when
/// possible) held out.
pub fn split_clips(corpus: &Corpus, fraction: f32) -> (Vec<String>, Vec<String>) {
    let mut ranked: Vec<(u64, String)> = corpus
        .clip_ids()
        .map(|id| (checkpoint::fingerprint(id), id.to_string()))
        .collect();
    ranked.sort();
    let n = ranked.len();
    let mut heldout = ((n as f32 * fraction).round() as usize).clamp(1, n.saturating_sub(1));
    if n >= 4 {
        // cross-clip negatives need at least two clips on each side
        heldout = heldout.clamp(2, n - 2);
    }
    let held: Vec<String> = ranked[..heldout].iter().map(|(_, id)| id.clone()).collect();
    let train: Vec<String> = ranked[heldout..].iter().map(|(_, id)| id.clone()).collect();
    (train, held)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRecord>,
    pub final_val_acc: f32,
    pub train_clips: Vec<String>,
    pub heldout_clips: Vec<String>,
    /// Set when training aborted on diverging loss; the checkpoint then
    /// holds the last good parameters.
    pub aborted: Option<String>,
}

/// Train the joint three-stream model on the surrogate binary task.
/// Held-out clips are disjoint from training clips; binary accuracy on a
/// fixed held-out sample set is recorded every checkpoint interval.
pub fn train_unsupervised(
    corpus: &Corpus,
    model: &mut JointModel,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&HistoryRecord),
) -> Result<TrainOutcome> {
    let (train_ids, held_ids) = split_clips(corpus, cfg.validation_fraction);
    if train_ids.len() < 2 || held_ids.len() < 2 {
        return Err(TrainerError::NotEnoughClips(format!(
            "{} training and {} held-out clips; cross-clip negatives need two of each",
            train_ids.len(),
            held_ids.len()
        )));
    }
    let mut train_sampler = TripletSampler::new(corpus, &train_ids);
    let mut held_sampler = TripletSampler::new(corpus, &held_ids);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6576616c);

    // fixed evaluation set; no augmentation so the estimate is stable
    let eval_cfg = BatchConfig {
        positives: cfg.eval_positives.max(1),
        p_flip: 0.0,
        p_reverse: 0.0,
        ..cfg.batch
    };
    let eval_batch = held_sampler.make_batch(&eval_cfg, &mut eval_rng)?;

    let total_iters: usize = cfg.schedule.iter().map(|(_, n)| n).sum();
    let fp = fingerprint(&model.arch_string());
    let mut history = Vec::new();
    let mut last_good = Checkpoint::from_params(fp, &model.params, Vec::new());
    let mut final_val = eval_binary_accuracy(model, &eval_batch)?;
    let mut nan_streak = 0usize;
    let mut loss_window: Vec<f32> = Vec::new();
    let mut iter = 0usize;

    for &(lr, steps) in &cfg.schedule {
        for _ in 0..steps {
            iter += 1;
            let batch = train_sampler.make_batch(&cfg.batch, &mut rng)?;
            let mut tape = Tape::new();
            let scores = model.forward_samples(&mut tape, &batch.samples)?;
            let loss_node = tape.softmax_cross_entropy(scores, &batch.labels())?;
            let loss = tape.value(loss_node).data()[0];
            if !loss.is_finite() {
                nan_streak += 1;
                if nan_streak >= 3 {
                    let mut ck = last_good.clone();
                    ck.history = history.clone();
                    return Ok(TrainOutcome {
                        checkpoint: ck,
                        history,
                        final_val_acc: final_val,
                        train_clips: train_ids,
                        heldout_clips: held_ids,
                        aborted: Some(format!(
                            "loss diverged at iteration {iter} (3 consecutive non-finite values)"
                        )),
                    });
                }
                continue;
            }
            nan_streak = 0;
            loss_window.push(loss);
            tape.backward(loss_node, &mut model.params)?;
            sgd_momentum_step(&mut model.params, lr, cfg.momentum)?;

            if iter % cfg.checkpoint_interval == 0 || iter == total_iters {
                final_val = eval_binary_accuracy(model, &eval_batch)?;
                let mean_loss = loss_window.iter().sum::<f32>() / loss_window.len().max(1) as f32;
                loss_window.clear();
                let rec = HistoryRecord {
                    iteration: iter as u32,
                    loss: mean_loss,
                    val_acc: final_val,
                };
                on_record(&rec);
                history.push(rec);
                last_good = Checkpoint::from_params(fp, &model.params, Vec::new());
            }
        }
    }
    let checkpoint = Checkpoint::from_params(fp, &model.params, history.clone());
    Ok(TrainOutcome {
        checkpoint,
        history,
        final_val_acc: final_val,
        train_clips: train_ids,
        heldout_clips: held_ids,
        aborted: None,
    })
}

/// Fraction of correctly classified samples, evaluated in bounded chunks.
pub fn eval_binary_accuracy(model: &JointModel, batch: &crate::sampler::Batch) -> Result<f32> {
    let mut correct = 0usize;
    for chunk in batch.samples.chunks(48) {
        let preds = model.predict(chunk)?;
        correct += preds
            .iter()
            .zip(chunk.iter())
            .filter(|(p, s)| **p == s.label)
            .count();
    }
    Ok(correct as f32 / batch.samples.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenerateConfig};
    use crate::flow::FlowParams;
    use crate::nets::ArchConfig;

    fn tiny_corpus() -> (tempfile::TempDir, Corpus) {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = generate_corpus(
            dir.path(),
            &GenerateConfig {
                num_clips: 6,
                frames_per_clip: 8,
                ..GenerateConfig::default()
            },
            21,
        )
        .unwrap();
        corpus
            .precompute_flows(
                &FlowParams {
                    iterations: 20,
                    pyramid_levels: 2,
                    ..FlowParams::default()
                },
                1,
            )
            .unwrap();
        (dir, corpus)
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (_dir, corpus) = tiny_corpus();
        let (train1, held1) = split_clips(&corpus, 0.2);
        let (train2, held2) = split_clips(&corpus, 0.2);
        assert_eq!(train1, train2);
        assert_eq!(held1, held2);
        assert!(!held1.is_empty());
        assert!(train1.len() >= 2);
        for id in &held1 {
            assert!(!train1.contains(id), "{id} in both splits");
        }
        assert_eq!(train1.len() + held1.len(), corpus.clips().len());
    }

    #[test]
    fn schedule_fidelity_exact_step_count() {
        let (_dir, corpus) = tiny_corpus();
        let mut model = JointModel::new(&ArchConfig::vggm_mini(), 8, 1).unwrap();
        let cfg = TrainConfig {
            schedule: vec![(1e-3, 4), (1e-4, 3)],
            checkpoint_interval: 2,
            eval_positives: 4,
            batch: BatchConfig {
                positives: 2,
                ..BatchConfig::default()
            },
            ..TrainConfig::mini()
        };
        let mut records = 0;
        let outcome = train_unsupervised(&corpus, &mut model, &cfg, |_| records += 1).unwrap();
        assert!(outcome.aborted.is_none());
        // records at iterations 2, 4, 6, and the final 7
        assert_eq!(records, 4);
        assert_eq!(
            outcome.history.last().unwrap().iteration,
            7,
            "exactly sum-of-schedule steps were taken"
        );
        assert_eq!(outcome.checkpoint.history.len(), outcome.history.len());
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let (_dir, corpus) = tiny_corpus();
        let mut model = JointModel::new(&ArchConfig::vggm_mini(), 8, 2).unwrap();
        // a cataststrophic learning rate reliably overflows f32 activations
        let cfg = TrainConfig {
            schedule: vec![(1e20, 50)],
            checkpoint_interval: 1000,
            eval_positives: 2,
            batch: BatchConfig {
                positives: 2,
                ..BatchConfig::default()
            },
            ..TrainConfig::mini()
        };
        let outcome = train_unsupervised(&corpus, &mut model, &cfg, |_| {}).unwrap();
        assert!(outcome.aborted.is_some(), "diverging run must abort");
        let ck = &outcome.checkpoint;
        assert!(
            ck.tensors.iter().all(|(_, t)| t.is_finite()),
            "retained checkpoint holds the last good (finite) parameters"
        );
    }
}
