//! Triplet construction: (patch A at frame n, patch A' at frame n+gap, flow
//! block T), labeled by whether the block explains the appearance change.
//!
//! Positives take all three elements from the same clip, frames exactly
//! `frame_gap` apart, at one spatial crop. Negatives keep the appearance
//! pair and substitute a flow block from a different clip; same-clip
//! negatives are never produced (repetitive actions would make them false
//! negatives).

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, GrayImage};
use crate::flow::FlowField;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("no clip has at least {0} frames with precomputed flows")]
    NoEligibleClip(usize),
    #[error("clip `{0}` is missing flow files")]
    MissingFlows(String),
    #[error("cross-video negatives need at least two clips")]
    SingleClip,
    #[error("patch size {patch} exceeds frame size {frame}")]
    PatchTooLarge { patch: usize, frame: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// Where a triplet's pieces came from. The label contract is
/// label == 1 iff appearance_clip == flow_clip and frame_n == frame_k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub appearance_clip: String,
    pub frame_n: usize,
    pub appearance_crop: (usize, usize),
    pub flow_clip: String,
    pub frame_k: usize,
    pub flow_crop: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct TripletSample {
    /// [1, P, P] grayscale patch, values in [0,1].
    pub patch_a: Tensor,
    /// Same crop, `frame_gap` frames later.
    pub patch_b: Tensor,
    /// [2*gap, P, P] interleaved (u, v) planes, pixels per frame.
    pub flow_block: Tensor,
    /// 1 = matching, 0 = mismatched.
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<TripletSample>,
    pub positives: usize,
    pub negatives_per_positive: usize,
}

impl Batch {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchConfig {
    pub positives: usize,
    pub negatives_per_positive: usize,
    pub frame_gap: usize,
    pub patch_size: usize,
    pub p_flip: f32,
    pub p_reverse: f32,
}

impl Default for BatchConfig {
    fn default() -> BatchConfig {
        BatchConfig {
            positives: 8,
            negatives_per_positive: 2,
            frame_gap: 4,
            patch_size: 64,
            p_flip: 0.5,
            p_reverse: 0.5,
        }
    }
}

struct CachedClip {
    frames: Vec<GrayImage>,
    flows: Vec<FlowField>,
}

/// Draws triplets from a set of clips, caching decoded frames and flows.
pub struct TripletSampler {
    corpus: Corpus,
    clip_ids: Vec<String>,
    cache: HashMap<String, CachedClip>,
}

impl TripletSampler {
    /// Restrict sampling to `clip_ids` (pass every id for the whole corpus).
    pub fn new(corpus: &Corpus, clip_ids: &[String]) -> TripletSampler {
        TripletSampler {
            corpus: corpus.clone(),
            clip_ids: clip_ids.to_vec(),
            cache: HashMap::new(),
        }
    }

    pub fn clip_ids(&self) -> &[String] {
        &self.clip_ids
    }

    fn eligible(&self, frame_gap: usize) -> Vec<usize> {
        self.clip_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| {
                self.corpus
                    .meta(id)
                    .map(|m| m.frame_count > frame_gap)
                    .unwrap_or(false)
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn cached(&mut self, id: &str) -> Result<&CachedClip> {
        if !self.cache.contains_key(id) {
            let clip = self.corpus.load_clip(id)?;
            let frames = (0..clip.frame_count)
                .map(|i| clip.frame(i))
                .collect::<crate::corpus::Result<Vec<_>>>()?;
            if clip.flow_count() + 1 < clip.frame_count {
                return Err(SamplerError::MissingFlows(id.to_string()));
            }
            let flows = (0..clip.frame_count - 1)
                .map(|i| clip.flow(i))
                .collect::<crate::corpus::Result<Vec<_>>>()?;
            self.cache
                .insert(id.to_string(), CachedClip { frames, flows });
        }
        Ok(&self.cache[id])
    }

    /// A label-1 triplet: random eligible clip, random start frame, random
    /// crop shared by both patches and the flow block.
    pub fn sample_positive(
        &mut self,
        frame_gap: usize,
        patch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TripletSample> {
        let eligible = self.eligible(frame_gap);
        if eligible.is_empty() {
            return Err(SamplerError::NoEligibleClip(frame_gap + 1));
        }
        let clip_id = self.clip_ids[eligible[rng.random_range(0..eligible.len())]].clone();
        let meta = self.corpus.meta(&clip_id)?.clone();
        if patch_size > meta.width || patch_size > meta.height {
            return Err(SamplerError::PatchTooLarge {
                patch: patch_size,
                frame: meta.width.min(meta.height),
            });
        }
        let n = rng.random_range(0..=meta.frame_count - 1 - frame_gap);
        let x0 = rng.random_range(0..=meta.width - patch_size);
        let y0 = rng.random_range(0..=meta.height - patch_size);

        let clip = self.cached(&clip_id)?;
        let patch_a = patch_tensor(&clip.frames[n], x0, y0, patch_size);
        let patch_b = patch_tensor(&clip.frames[n + frame_gap], x0, y0, patch_size);
        let flow_block = block_tensor(&clip.flows[n..n + frame_gap], x0, y0, patch_size);
        Ok(TripletSample {
            patch_a,
            patch_b,
            flow_block,
            label: 1,
            provenance: Provenance {
                appearance_clip: clip_id.clone(),
                frame_n: n,
                appearance_crop: (x0, y0),
                flow_clip: clip_id,
                frame_k: n,
                flow_crop: (x0, y0),
            },
        })
    }

    /// A label-0 triplet: the positive's appearance pair with a flow block
    /// cropped at a fresh random location from a different clip.
    pub fn sample_negative(
        &mut self,
        positive: &TripletSample,
        rng: &mut ChaCha8Rng,
    ) -> Result<TripletSample> {
        let frame_gap = positive.flow_block.shape()[0] / 2;
        let patch_size = positive.patch_a.shape()[1];
        let eligible: Vec<usize> = self
            .eligible(frame_gap)
            .into_iter()
            .filter(|&i| self.clip_ids[i] != positive.provenance.appearance_clip)
            .collect();
        if eligible.is_empty() {
            return Err(SamplerError::SingleClip);
        }
        let clip_id = self.clip_ids[eligible[rng.random_range(0..eligible.len())]].clone();
        let meta = self.corpus.meta(&clip_id)?.clone();
        let k = rng.random_range(0..=meta.frame_count - 1 - frame_gap);
        let x0 = rng.random_range(0..=meta.width - patch_size);
        let y0 = rng.random_range(0..=meta.height - patch_size);
        let clip = self.cached(&clip_id)?;
        let flow_block = block_tensor(&clip.flows[k..k + frame_gap], x0, y0, patch_size);
        Ok(TripletSample {
            patch_a: positive.patch_a.clone(),
            patch_b: positive.patch_b.clone(),
            flow_block,
            label: 0,
            provenance: Provenance {
                appearance_clip: positive.provenance.appearance_clip.clone(),
                frame_n: positive.provenance.frame_n,
                appearance_crop: positive.provenance.appearance_crop,
                flow_clip: clip_id,
                frame_k: k,
                flow_crop: (x0, y0),
            },
        })
    }

    /// A full batch: `positives` positives (each augmented), then
    /// `negatives_per_positive` negatives per positive built by borrowing
    /// flow blocks from other positives in the same batch; a draw whose
    /// source clip collides with the appearance clip is re-drawn, falling
    /// back to a fresh cross-clip sample when the batch offers no donor.
    pub fn make_batch(&mut self, cfg: &BatchConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut positives = Vec::with_capacity(cfg.positives);
        for _ in 0..cfg.positives {
            let sample = self.sample_positive(cfg.frame_gap, cfg.patch_size, rng)?;
            positives.push(augment(&sample, rng, cfg.p_flip, cfg.p_reverse));
        }
        let mut samples = Vec::with_capacity(cfg.positives * (1 + cfg.negatives_per_positive));
        for i in 0..cfg.positives {
            samples.push(positives[i].clone());
            for _ in 0..cfg.negatives_per_positive {
                let donor = (0..100)
                    .map(|_| rng.random_range(0..cfg.positives))
                    .find(|&q| {
                        q != i
                            && positives[q].provenance.flow_clip
                                != positives[i].provenance.appearance_clip
                    });
                let negative = match donor {
                    Some(q) => {
                        let p = &positives[i];
                        let d = &positives[q];
                        TripletSample {
                            patch_a: p.patch_a.clone(),
                            patch_b: p.patch_b.clone(),
                            flow_block: d.flow_block.clone(),
                            label: 0,
                            provenance: Provenance {
                                appearance_clip: p.provenance.appearance_clip.clone(),
                                frame_n: p.provenance.frame_n,
                                appearance_crop: p.provenance.appearance_crop,
                                flow_clip: d.provenance.flow_clip.clone(),
                                frame_k: d.provenance.frame_k,
                                flow_crop: d.provenance.flow_crop,
                            },
                        }
                    }
                    None => self.sample_negative(&positives[i], rng)?,
                };
                samples.push(negative);
            }
        }
        Ok(Batch {
            samples,
            positives: cfg.positives,
            negatives_per_positive: cfg.negatives_per_positive,
        })
    }
}

fn patch_tensor(frame: &GrayImage, x0: usize, y0: usize, size: usize) -> Tensor {
    let crop = frame.crop(x0, y0, size);
    let data = crop.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::from_vec(&[1, size, size], data).expect("crop size arithmetic")
}

fn block_tensor(flows: &[FlowField], x0: usize, y0: usize, size: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * flows.len() * size * size);
    for f in flows {
        let c = f.crop(x0, y0, size);
        data.extend_from_slice(&c.u);
        data.extend_from_slice(&c.v);
    }
    Tensor::from_vec(&[2 * flows.len(), size, size], data).expect("block size arithmetic")
}

/// With probability `p_flip`, horizontally flip both patches and every flow
/// field; with probability `p_reverse`, swap the patches and reverse+negate
/// the block. The label is preserved: both transforms map matching triplets
/// to matching triplets.
pub fn augment(
    sample: &TripletSample,
    rng: &mut ChaCha8Rng,
    p_flip: f32,
    p_reverse: f32,
) -> TripletSample {
    let mut out = sample.clone();
    if rng.random_range(0.0..1.0) < p_flip {
        out = flip_sample(&out);
    }
    if rng.random_range(0.0..1.0) < p_reverse {
        out = reverse_sample(&out);
    }
    out
}

pub fn flip_sample(sample: &TripletSample) -> TripletSample {
    TripletSample {
        patch_a: flip_patch(&sample.patch_a),
        patch_b: flip_patch(&sample.patch_b),
        flow_block: flip_block(&sample.flow_block),
        label: sample.label,
        provenance: sample.provenance.clone(),
    }
}

pub fn reverse_sample(sample: &TripletSample) -> TripletSample {
    TripletSample {
        patch_a: sample.patch_b.clone(),
        patch_b: sample.patch_a.clone(),
        flow_block: reverse_block(&sample.flow_block),
        label: sample.label,
        provenance: sample.provenance.clone(),
    }
}

fn flip_patch(t: &Tensor) -> Tensor {
    let &[c, h, w] = t.shape() else {
        panic!("patch tensors are [C, H, W]")
    };
    let mut data = Vec::with_capacity(t.numel());
    for ci in 0..c {
        for y in 0..h {
            let row = &t.data()[(ci * h + y) * w..(ci * h + y + 1) * w];
            data.extend(row.iter().rev());
        }
    }
    Tensor::from_vec(t.shape(), data).unwrap()
}

/// Mirrors every plane; u planes (even channels) also flip sign.
fn flip_block(t: &Tensor) -> Tensor {
    let &[c, h, w] = t.shape() else {
        panic!("flow blocks are [2*gap, H, W]")
    };
    let mut data = Vec::with_capacity(t.numel());
    for ci in 0..c {
        let sign = if ci % 2 == 0 { -1.0f32 } else { 1.0 };
        for y in 0..h {
            let row = &t.data()[(ci * h + y) * w..(ci * h + y + 1) * w];
            data.extend(row.iter().rev().map(|&v| sign * v));
        }
    }
    Tensor::from_vec(t.shape(), data).unwrap()
}

/// Reverses the field order (channel pairs) and negates every value.
fn reverse_block(t: &Tensor) -> Tensor {
    let &[c, h, w] = t.shape() else {
        panic!("flow blocks are [2*gap, H, W]")
    };
    let gap = c / 2;
    let plane = h * w;
    let mut data = Vec::with_capacity(t.numel());
    for f in (0..gap).rev() {
        for uv in 0..2 {
            let at = (2 * f + uv) * plane;
            data.extend(t.data()[at..at + plane].iter().map(|&v| -v));
        }
    }
    Tensor::from_vec(t.shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenerateConfig};
    use crate::flow::{hflip_flow, reverse_flow_block, FlowBlock, FlowParams};
    use rand::SeedableRng;

    fn test_corpus(num_clips: usize, seed: u64) -> (tempfile::TempDir, Corpus) {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = generate_corpus(
            dir.path(),
            &GenerateConfig {
                num_clips,
                frames_per_clip: 10,
                ..GenerateConfig::default()
            },
            seed,
        )
        .unwrap();
        corpus
            .precompute_flows(
                &FlowParams {
                    iterations: 20,
                    ..FlowParams::default()
                },
                1,
            )
            .unwrap();
        (dir, corpus)
    }

    fn sampler_for(corpus: &Corpus) -> TripletSampler {
        let ids: Vec<String> = corpus.clip_ids().map(String::from).collect();
        TripletSampler::new(corpus, &ids)
    }

    #[test]
    fn positive_contract() {
        let (_dir, corpus) = test_corpus(3, 2);
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sampler.sample_positive(4, 64, &mut rng).unwrap();
        assert_eq!(s.label, 1);
        assert_eq!(s.flow_block.shape(), &[8, 64, 64]);
        assert_eq!(s.patch_a.shape(), &[1, 64, 64]);
        assert_eq!(s.provenance.appearance_clip, s.provenance.flow_clip);
        assert_eq!(s.provenance.frame_n, s.provenance.frame_k);
        assert_eq!(s.provenance.appearance_crop, s.provenance.flow_crop);
        assert!(s.patch_a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gap_of_twelve_gives_24_channels() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = generate_corpus(
            dir.path(),
            &GenerateConfig {
                num_clips: 2,
                frames_per_clip: 14,
                ..GenerateConfig::default()
            },
            9,
        )
        .unwrap();
        corpus
            .precompute_flows(
                &FlowParams {
                    iterations: 10,
                    pyramid_levels: 2,
                    ..FlowParams::default()
                },
                1,
            )
            .unwrap();
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sampler.sample_positive(12, 64, &mut rng).unwrap();
        assert_eq!(s.flow_block.shape()[0], 24);
    }

    #[test]
    fn negative_keeps_appearance_and_crosses_clips() {
        let (_dir, corpus) = test_corpus(3, 4);
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = sampler.sample_positive(4, 64, &mut rng).unwrap();
        for _ in 0..50 {
            let neg = sampler.sample_negative(&pos, &mut rng).unwrap();
            assert_eq!(neg.label, 0);
            assert_ne!(neg.provenance.flow_clip, neg.provenance.appearance_clip);
            assert_eq!(neg.patch_a.data(), pos.patch_a.data());
            assert_eq!(neg.patch_b.data(), pos.patch_b.data());
        }
    }

    #[test]
    fn two_clip_corpus_always_uses_the_other_clip() {
        let (_dir, corpus) = test_corpus(2, 6);
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pos = sampler.sample_positive(4, 64, &mut rng).unwrap();
        let other: Vec<String> = corpus
            .clip_ids()
            .filter(|id| *id != pos.provenance.appearance_clip)
            .map(String::from)
            .collect();
        for _ in 0..20 {
            let neg = sampler.sample_negative(&pos, &mut rng).unwrap();
            assert_eq!(neg.provenance.flow_clip, other[0]);
        }
    }

    #[test]
    fn single_clip_cannot_satisfy_the_constraint() {
        let (_dir, corpus) = test_corpus(1, 7);
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pos = sampler.sample_positive(4, 64, &mut rng).unwrap();
        assert!(matches!(
            sampler.sample_negative(&pos, &mut rng),
            Err(SamplerError::SingleClip)
        ));
    }

    #[test]
    fn flip_twice_is_identity_and_matches_the_flow_module() {
        let (_dir, corpus) = test_corpus(2, 8);
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = sampler.sample_positive(2, 32, &mut rng).unwrap();
        let twice = flip_sample(&flip_sample(&s));
        assert_eq!(twice.patch_a.data(), s.patch_a.data());
        assert_eq!(twice.flow_block.data(), s.flow_block.data());

        // tensor-level flip agrees with flow::hflip_flow on a block
        let field = crate::flow::FlowField {
            width: 4,
            height: 3,
            u: (0..12).map(|i| i as f32 - 5.0).collect(),
            v: (0..12).map(|i| (i as f32).cos()).collect(),
        };
        let block = FlowBlock::new(vec![field.clone()]);
        let via_module = FlowBlock::new(vec![hflip_flow(&field)]).to_channels();
        let via_tensor = flip_block(&Tensor::from_vec(&[2, 3, 4], block.to_channels()).unwrap());
        assert_eq!(via_tensor.data(), &via_module[..]);
    }

    #[test]
    fn reverse_on_a_positive_swaps_patches_and_negates() {
        let (_dir, corpus) = test_corpus(2, 9);
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sampler.sample_positive(3, 32, &mut rng).unwrap();
        let rev = reverse_sample(&s);
        assert_eq!(rev.label, 1);
        assert_eq!(rev.patch_a.data(), s.patch_b.data());
        assert_eq!(rev.patch_b.data(), s.patch_a.data());
        assert_eq!(reverse_sample(&rev).flow_block.data(), s.flow_block.data());

        // agrees with flow::reverse_flow_block
        let fields: Vec<_> = (0..3)
            .map(|k| crate::flow::FlowField {
                width: 2,
                height: 2,
                u: vec![k as f32 + 0.5; 4],
                v: vec![-(k as f32); 4],
            })
            .collect();
        let block = FlowBlock::new(fields);
        let via_module = reverse_flow_block(&block).to_channels();
        let via_tensor = reverse_block(&Tensor::from_vec(&[6, 2, 2], block.to_channels()).unwrap());
        assert_eq!(via_tensor.data(), &via_module[..]);
    }

    #[test]
    fn augment_with_zero_probabilities_is_identity() {
        let (_dir, corpus) = test_corpus(2, 10);
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = sampler.sample_positive(2, 32, &mut rng).unwrap();
        let a = augment(&s, &mut rng, 0.0, 0.0);
        assert_eq!(a.patch_a.data(), s.patch_a.data());
        assert_eq!(a.flow_block.data(), s.flow_block.data());
    }

    #[test]
    fn batch_composition_and_constraints() {
        let (_dir, corpus) = test_corpus(4, 11);
        let mut sampler = sampler_for(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = BatchConfig {
            positives: 4,
            negatives_per_positive: 2,
            frame_gap: 4,
            patch_size: 64,
            p_flip: 0.5,
            p_reverse: 0.5,
        };
        let batch = sampler.make_batch(&cfg, &mut rng).unwrap();
        assert_eq!(batch.samples.len(), 12);
        assert_eq!(batch.labels().iter().filter(|&&l| l == 1).count(), 4);
        for s in &batch.samples {
            let matching = s.provenance.appearance_clip == s.provenance.flow_clip
                && s.provenance.frame_n == s.provenance.frame_k;
            assert_eq!(s.label == 1, matching, "label soundness");
            if s.label == 0 {
                assert_ne!(s.provenance.flow_clip, s.provenance.appearance_clip);
            }
        }
    }

    #[test]
    fn batches_are_deterministic_under_a_fixed_seed() {
        let (_dir, corpus) = test_corpus(3, 12);
        let cfg = BatchConfig::default();
        let run = |corpus: &Corpus| {
            let mut sampler = sampler_for(corpus);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let b = sampler.make_batch(&cfg, &mut rng).unwrap();
            b.samples
                .iter()
                .flat_map(|s| s.flow_block.data().to_vec())
                .collect::<Vec<f32>>()
        };
        assert_eq!(run(&corpus), run(&corpus));
    }
}
