//! Action fine-tuning: softmax classification of random single-frame crops,
//! with optional trunk freezing (train only the last two FC layers) and a
//! training-clip cap for the small-sample regime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, GrayImage};
use crate::nets::{build_action_net, ActionNet, ArchConfig};
use crate::tensor::{sgd_momentum_step, ParamSet, Tape, Tensor};

use super::{fingerprint, split_clips, Checkpoint, HistoryRecord, Result, TrainerError};

#[derive(Debug, Clone)]
pub struct ActionTrainConfig {
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub freeze_trunk: bool,
    pub schedule: Vec<(f32, usize)>,
    pub momentum: f32,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Keep only this many training clips (the small-training-set regime).
    pub train_clip_limit: Option<usize>,
    pub seed: u64,
    pub validation_fraction: f32,
    pub eval_interval: usize,
}

impl ActionTrainConfig {
    pub fn mini() -> ActionTrainConfig {
        ActionTrainConfig {
            num_classes: 4,
            hidden_dim: 64,
            freeze_trunk: false,
            schedule: vec![(5e-3, 400), (1e-3, 100)],
            momentum: 0.9,
            batch_size: 16,
            crop_size: 64,
            train_clip_limit: None,
            seed: 0,
            validation_fraction: 0.2,
            eval_interval: 50,
        }
    }

    /// Full-scale reference: batch 256, 14k iterations at 1e-3 then 6k at
    /// 1e-4, hidden width 2048.
    pub fn paper(num_classes: usize) -> ActionTrainConfig {
        ActionTrainConfig {
            num_classes,
            hidden_dim: 2048,
            freeze_trunk: false,
            schedule: vec![(1e-3, 14_000), (1e-4, 6_000)],
            momentum: 0.9,
            batch_size: 256,
            crop_size: 224,
            train_clip_limit: None,
            seed: 0,
            validation_fraction: 0.2,
            eval_interval: 1000,
        }
    }
}

#[derive(Debug)]
pub struct ActionOutcome {
    pub net: ActionNet,
    pub history: Vec<HistoryRecord>,
    pub train_clips: Vec<String>,
    pub test_clips: Vec<String>,
}

impl ActionOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(
            fingerprint(&self.net.arch_string()),
            &self.net.params,
            self.history.clone(),
        )
    }
}

/// Train the action head (and, unless frozen, the trunk) on random crops of
/// labeled clips. Train/test clips are split disjointly before applying the
/// optional training-clip cap. The recorded val_acc is center-crop frame
/// accuracy on the held-out clips.
pub fn finetune_action(
    corpus: &Corpus,
    arch: &ArchConfig,
    init: Option<&ParamSet>,
    cfg: &ActionTrainConfig,
    mut on_record: impl FnMut(&HistoryRecord),
) -> Result<ActionOutcome> {
    let (mut train_ids, test_ids) = split_clips(corpus, cfg.validation_fraction);
    if let Some(limit) = cfg.train_clip_limit {
        train_ids.truncate(limit.max(1));
    }
    // label validation up front
    for id in train_ids.iter().chain(&test_ids) {
        let meta = corpus.meta(id)?;
        match meta.label {
            None => return Err(TrainerError::MissingLabel(id.clone())),
            Some(l) if l >= cfg.num_classes => {
                return Err(TrainerError::LabelOutOfRange {
                    clip: id.clone(),
                    label: l,
                    classes: cfg.num_classes,
                })
            }
            Some(_) => {}
        }
    }

    let train_frames = load_frames(corpus, &train_ids)?;
    let test_frames = load_frames(corpus, &test_ids)?;
    let mut net = build_action_net(
        arch,
        init,
        cfg.num_classes,
        cfg.hidden_dim,
        cfg.freeze_trunk,
        cfg.seed ^ 0x616374,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut iter = 0usize;
    let total: usize = cfg.schedule.iter().map(|(_, n)| n).sum();
    let s = cfg.crop_size;

    for &(lr, steps) in &cfg.schedule {
        for _ in 0..steps {
            iter += 1;
            let n = cfg.batch_size.min(train_frames.len().max(1));
            let mut data = Vec::with_capacity(n * s * s);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let (frame, label) = &train_frames[rng.random_range(0..train_frames.len())];
                let x0 = rng.random_range(0..=frame.width - s);
                let y0 = rng.random_range(0..=frame.height - s);
                let crop = frame.crop(x0, y0, s);
                data.extend(crop.pixels.iter().map(|&p| p as f32 / 255.0));
                labels.push(*label);
            }
            let crops = Tensor::from_vec(&[n, 1, s, s], data)?;

            let mut tape = Tape::new();
            let scores = net.forward(&mut tape, crops)?;
            let loss_node = tape.softmax_cross_entropy(scores, &labels)?;
            let loss = tape.value(loss_node).data()[0];
            tape.backward(loss_node, &mut net.params)?;
            sgd_momentum_step(&mut net.params, lr, cfg.momentum)?;

            if iter % cfg.eval_interval == 0 || iter == total {
                let rec = HistoryRecord {
                    iteration: iter as u32,
                    loss,
                    val_acc: center_crop_accuracy(&net, &test_frames, s)?,
                };
                on_record(&rec);
                history.push(rec);
            }
        }
    }
    Ok(ActionOutcome {
        net,
        history,
        train_clips: train_ids,
        test_clips: test_ids,
    })
}

type LabeledFrames = Vec<(GrayImage, usize)>;

fn load_frames(corpus: &Corpus, ids: &[String]) -> Result<LabeledFrames> {
    let mut out = Vec::new();
    for id in ids {
        let clip = corpus.load_clip(id)?;
        let label = clip.label.ok_or_else(|| TrainerError::MissingLabel(id.clone()))?;
        for f in 0..clip.frame_count {
            out.push((clip.frame(f)?, label));
        }
    }
    Ok(out)
}

/// Frame-level accuracy with a single center crop.
fn center_crop_accuracy(net: &ActionNet, frames: &LabeledFrames, s: usize) -> Result<f32> {
    if frames.is_empty() {
        return Ok(f32::NAN);
    }
    let mut correct = 0usize;
    for chunk in frames.chunks(32) {
        let mut data = Vec::with_capacity(chunk.len() * s * s);
        for (frame, _) in chunk {
            let crop = frame.crop((frame.width - s) / 2, (frame.height - s) / 2, s);
            data.extend(crop.pixels.iter().map(|&p| p as f32 / 255.0));
        }
        let scores = net.scores(Tensor::from_vec(&[chunk.len(), 1, s, s], data)?)?;
        for (n, (_, label)) in chunk.iter().enumerate() {
            let row = &scores.data()[n * net.num_classes..(n + 1) * net.num_classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            correct += (pred == *label) as usize;
        }
    }
    Ok(correct as f32 / frames.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenerateConfig};
    use crate::flow::FlowParams;

    fn labeled_corpus() -> (tempfile::TempDir, Corpus) {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = generate_corpus(
            dir.path(),
            &GenerateConfig {
                num_clips: 8,
                frames_per_clip: 6,
                ..GenerateConfig::default()
            },
            31,
        )
        .unwrap();
        corpus
            .precompute_flows(
                &FlowParams {
                    iterations: 5,
                    pyramid_levels: 2,
                    ..FlowParams::default()
                },
                1,
            )
            .unwrap();
        (dir, corpus)
    }

    #[test]
    fn label_out_of_range_is_a_data_error() {
        let (_dir, corpus) = labeled_corpus();
        let cfg = ActionTrainConfig {
            num_classes: 2, // corpus has labels 0..=3
            schedule: vec![(1e-3, 1)],
            ..ActionTrainConfig::mini()
        };
        let err = finetune_action(&corpus, &crate::nets::ArchConfig::vggm_mini(), None, &cfg, |_| {})
            .unwrap_err();
        assert!(matches!(err, TrainerError::LabelOutOfRange { .. }), "{err}");
    }

    #[test]
    fn freeze_trunk_updates_only_the_head() {
        let (_dir, corpus) = labeled_corpus();
        let arch = crate::nets::ArchConfig::vggm_mini();
        let cfg = ActionTrainConfig {
            freeze_trunk: true,
            schedule: vec![(1e-2, 3)],
            batch_size: 4,
            eval_interval: 100,
            ..ActionTrainConfig::mini()
        };
        let before = build_action_net(&arch, None, 4, 64, true, cfg.seed ^ 0x616374).unwrap();
        let outcome = finetune_action(&corpus, &arch, None, &cfg, |_| {}).unwrap();
        // trunk identical, head moved, trunk grads never populated
        for name in ["conv1.w", "conv3.w", "fc6.w"] {
            assert_eq!(
                before.params.tensor(name).unwrap().data(),
                outcome.net.params.tensor(name).unwrap().data(),
                "{name} should be untouched"
            );
            assert!(
                outcome.net.params.tensor(name).unwrap().grad().is_none()
                    || outcome
                        .net
                        .params
                        .tensor(name)
                        .unwrap()
                        .grad()
                        .unwrap()
                        .iter()
                        .all(|&g| g == 0.0),
                "{name} gradient should stay zero"
            );
        }
        assert_ne!(
            before.params.tensor("fc8.w").unwrap().data(),
            outcome.net.params.tensor("fc8.w").unwrap().data(),
            "head weights should move"
        );
    }

    #[test]
    fn train_clip_limit_caps_training_clips() {
        let (_dir, corpus) = labeled_corpus();
        let cfg = ActionTrainConfig {
            train_clip_limit: Some(3),
            schedule: vec![(1e-3, 2)],
            batch_size: 4,
            ..ActionTrainConfig::mini()
        };
        let outcome =
            finetune_action(&corpus, &crate::nets::ArchConfig::vggm_mini(), None, &cfg, |_| {})
                .unwrap();
        assert_eq!(outcome.train_clips.len(), 3);
        for id in &outcome.train_clips {
            assert!(!outcome.test_clips.contains(id), "splits overlap at {id}");
        }
    }
}
