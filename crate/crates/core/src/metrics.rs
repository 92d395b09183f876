//! Evaluation: heatmap decoding, Strict PCP, PDJ, binary surrogate
//! accuracy, the averaged multi-crop action test protocol, and the
//! nearest-neighbor pose probe over appearance features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Corpus, VideoClip};
use crate::nets::{ActionNet, JointModel, NetError};
use crate::sampler::Batch;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Limb definitions and normalization constants for pose metrics.
#[derive(Debug, Clone)]
pub struct SkeletonEval {
    /// (group name, joint a, joint b); left/right instances share a group.
    pub limbs: Vec<(String, usize, usize)>,
    /// Torso reference pair for PDJ normalization (left shoulder, right hip).
    pub torso_pair: (usize, usize),
    /// Strict PCP fraction of limb length.
    pub pcp_alpha: f32,
    /// PDJ thresholds, ascending.
    pub pdj_thresholds: Vec<f32>,
}

impl SkeletonEval {
    /// The reported limb groups: upper and lower arms, both sides.
    pub fn arms_default() -> SkeletonEval {
        use crate::corpus::skeleton::*;
        SkeletonEval {
            limbs: vec![
                ("upper_arms".into(), L_SHOULDER, L_ELBOW),
                ("upper_arms".into(), R_SHOULDER, R_ELBOW),
                ("lower_arms".into(), L_ELBOW, L_WRIST),
                ("lower_arms".into(), R_ELBOW, R_WRIST),
            ],
            torso_pair: (L_SHOULDER, R_HIP),
            pcp_alpha: 0.5,
            pdj_thresholds: vec![0.1, 0.2, 0.3, 0.4],
        }
    }
}

/// Unweighted centroid of the `top_k` highest-valued pixels; ties at the
/// cutoff break by row-major pixel order. Returns (x, y).
pub fn decode_heatmap(map: &[f32], side: usize, top_k: usize) -> (f32, f32) {
    assert!(side * side >= top_k && top_k > 0, "top_k exceeds map size");
    assert_eq!(map.len(), side * side);
    let mut order: Vec<usize> = (0..map.len()).collect();
    // stable sort by descending value keeps row-major order among ties
    order.sort_by(|&a, &b| map[b].partial_cmp(&map[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    for &i in order.iter().take(top_k) {
        sx += (i % side) as f64;
        sy += (i / side) as f64;
    }
    ((sx / top_k as f64) as f32, (sy / top_k as f64) as f32)
}

fn dist(a: (f32, f32), b: (f32, f32)) -> f32 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Per-limb Strict PCP verdicts for one frame: a limb is correct iff BOTH
/// endpoint errors are within alpha times the ground-truth limb length.
/// `None` marks a degenerate (zero-length) ground-truth limb.
pub fn strict_pcp(
    pred: &[(f32, f32)],
    gt: &[(f32, f32)],
    skel: &SkeletonEval,
) -> Vec<(String, Option<bool>)> {
    assert_eq!(pred.len(), gt.len(), "prediction/ground-truth point counts");
    skel.limbs
        .iter()
        .map(|(group, a, b)| {
            let len = dist(gt[*a], gt[*b]);
            if len <= f32::EPSILON {
                return (group.clone(), None);
            }
            let ok = dist(pred[*a], gt[*a]) <= skel.pcp_alpha * len
                && dist(pred[*b], gt[*b]) <= skel.pcp_alpha * len;
            (group.clone(), Some(ok))
        })
        .collect()
}

/// Dataset-level Strict PCP: limb instances accumulate into their group;
/// degenerate limbs are skipped and tallied.
#[derive(Debug, Default, Clone)]
pub struct PcpAccumulator {
    counts: Vec<(String, usize, usize)>,
    pub degenerate: usize,
}

impl PcpAccumulator {
    pub fn add(&mut self, pred: &[(f32, f32)], gt: &[(f32, f32)], skel: &SkeletonEval) {
        for (group, verdict) in strict_pcp(pred, gt, skel) {
            match verdict {
                None => self.degenerate += 1,
                Some(ok) => {
                    if let Some(entry) = self.counts.iter_mut().find(|(g, _, _)| *g == group) {
                        entry.1 += ok as usize;
                        entry.2 += 1;
                    } else {
                        self.counts.push((group, ok as usize, 1));
                    }
                }
            }
        }
    }

    /// (group, correct fraction) in first-seen group order.
    pub fn accuracy(&self) -> Vec<(String, f32)> {
        self.counts
            .iter()
            .map(|(g, ok, total)| (g.clone(), *ok as f32 / (*total).max(1) as f32))
            .collect()
    }
}

/// Per-joint, per-threshold detections for one frame: joint j is detected
/// at threshold t iff its error is within t times the ground-truth torso
/// diameter. `None` when the torso diameter is zero (frame skipped).
pub fn pdj(
    pred: &[(f32, f32)],
    gt: &[(f32, f32)],
    skel: &SkeletonEval,
    thresholds: &[f32],
) -> Option<Vec<Vec<bool>>> {
    assert_eq!(pred.len(), gt.len());
    let torso = dist(gt[skel.torso_pair.0], gt[skel.torso_pair.1]);
    if torso <= f32::EPSILON {
        return None;
    }
    Some(
        (0..pred.len())
            .map(|j| {
                let err = dist(pred[j], gt[j]);
                thresholds.iter().map(|t| err <= t * torso).collect()
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct PdjAccumulator {
    pub thresholds: Vec<f32>,
    detected: Vec<Vec<usize>>,
    pub frames: usize,
    pub skipped: usize,
}

impl PdjAccumulator {
    pub fn new(num_joints: usize, thresholds: &[f32]) -> PdjAccumulator {
        PdjAccumulator {
            thresholds: thresholds.to_vec(),
            detected: vec![vec![0; thresholds.len()]; num_joints],
            frames: 0,
            skipped: 0,
        }
    }

    pub fn add(&mut self, pred: &[(f32, f32)], gt: &[(f32, f32)], skel: &SkeletonEval) {
        match pdj(pred, gt, skel, &self.thresholds) {
            None => self.skipped += 1,
            Some(table) => {
                self.frames += 1;
                for (j, row) in table.iter().enumerate() {
                    for (t, hit) in row.iter().enumerate() {
                        self.detected[j][t] += *hit as usize;
                    }
                }
            }
        }
    }

    /// Detection rate per joint per threshold.
    pub fn rates(&self) -> Vec<Vec<f32>> {
        self.detected
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&d| d as f32 / self.frames.max(1) as f32)
                    .collect()
            })
            .collect()
    }

    /// Mean detection rate over all joints at one threshold index.
    pub fn mean_rate(&self, t_idx: usize) -> f32 {
        let rates = self.rates();
        rates.iter().map(|r| r[t_idx]).sum::<f32>() / rates.len().max(1) as f32
    }
}

/// Argmax-vs-label accuracy of the joint model over evaluation batches.
pub fn binary_accuracy(model: &JointModel, batches: &[Batch]) -> Result<f32> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in batches {
        for chunk in batch.samples.chunks(48) {
            let preds = model.predict(chunk)?;
            correct += preds
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.label)
                .count();
            total += chunk.len();
        }
    }
    if total == 0 {
        return Err(MetricsError::Invalid("no evaluation samples".into()));
    }
    Ok(correct as f32 / total as f32)
}

/// The multi-crop action test protocol.
#[derive(Debug, Clone, Copy)]
pub struct ActionEvalProtocol {
    /// Frames sampled uniformly across the clip (repeats when shorter).
    pub num_frames: usize,
    /// Four corners plus center when true; center only when false.
    pub corner_crops: bool,
    /// Also evaluate the horizontal flip of every crop.
    pub flips: bool,
    pub crop_size: usize,
}

impl ActionEvalProtocol {
    pub fn default_25_frame(crop_size: usize) -> ActionEvalProtocol {
        ActionEvalProtocol {
            num_frames: 25,
            corner_crops: true,
            flips: true,
            crop_size,
        }
    }

    pub fn samples_per_video(&self) -> usize {
        self.num_frames * if self.corner_crops { 5 } else { 1 } * if self.flips { 2 } else { 1 }
    }
}

#[derive(Debug, Clone)]
pub struct ActionPrediction {
    pub class: usize,
    pub mean_scores: Vec<f32>,
    /// Network evaluations issued (one per crop sample).
    pub forward_passes: usize,
}

/// Average the class scores of every protocol sample and return the argmax.
pub fn eval_action_video(
    net: &ActionNet,
    clip: &VideoClip,
    protocol: &ActionEvalProtocol,
) -> Result<ActionPrediction> {
    if clip.frame_count == 0 {
        return Err(MetricsError::Invalid(format!("clip `{}` is empty", clip.id)));
    }
    let s = protocol.crop_size;
    if s > clip.width || s > clip.height {
        return Err(MetricsError::Invalid(format!(
            "crop {s} exceeds the {}x{} frame",
            clip.width, clip.height
        )));
    }
    let mut sum_scores = vec![0.0f64; net.num_classes];
    let mut forward_passes = 0usize;
    for i in 0..protocol.num_frames {
        let frame_idx = i * clip.frame_count / protocol.num_frames;
        let frame = clip.frame(frame_idx)?;
        let mut origins = vec![((clip.width - s) / 2, (clip.height - s) / 2)];
        if protocol.corner_crops {
            origins.extend_from_slice(&[
                (0, 0),
                (clip.width - s, 0),
                (0, clip.height - s),
                (clip.width - s, clip.height - s),
            ]);
        }
        let mut crops = Vec::new();
        for &(x0, y0) in &origins {
            let crop = frame.crop(x0, y0, s);
            if protocol.flips {
                crops.push(crop.hflip());
            }
            crops.push(crop);
        }
        let mut data = Vec::with_capacity(crops.len() * s * s);
        for c in &crops {
            data.extend(c.pixels.iter().map(|&p| p as f32 / 255.0));
        }
        let batch = Tensor::from_vec(&[crops.len(), 1, s, s], data)?;
        let scores = net.scores(batch)?;
        forward_passes += crops.len();
        for n in 0..crops.len() {
            let row = &scores.data()[n * net.num_classes..(n + 1) * net.num_classes];
            // softmax per sample so averaging weighs samples equally
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (k, e) in exps.iter().enumerate() {
                sum_scores[k] += e / z;
            }
        }
    }
    let mean_scores: Vec<f32> = sum_scores
        .iter()
        .map(|&v| (v / forward_passes as f64) as f32)
        .collect();
    let class = mean_scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(ActionPrediction {
        class,
        mean_scores,
        forward_passes,
    })
}

#[derive(Debug, Clone)]
pub struct NnProbeReport {
    pub queries: usize,
    pub mean_neighbor_dist: f32,
    pub mean_random_dist: f32,
    /// One-sided sign-flip permutation p-value for
    /// "neighbor distance < random-pair distance".
    pub p_value: f32,
}

/// FC6 nearest-neighbor pose probe: for random annotated query frames,
/// retrieve the closest frame (Euclidean distance in appearance-feature
/// space) among frames of OTHER clips, then compare the mean per-joint
/// distance of the retrieved layout against a randomly drawn candidate.
/// Joint layouts are centered and scaled by the torso diameter first.
pub fn nn_probe(
    model: &JointModel,
    corpus: &Corpus,
    clip_ids: &[String],
    num_queries: usize,
    skel: &SkeletonEval,
    rng: &mut ChaCha8Rng,
) -> Result<NnProbeReport> {
    // pool: every 2nd frame of every annotated probe clip
    let mut pool: Vec<(usize, Vec<f32>, [(f32, f32); 9])> = Vec::new();
    let input = model.cfg.input_size;
    for (clip_no, id) in clip_ids.iter().enumerate() {
        let clip = corpus.load_clip(id)?;
        let Some(joints) = clip.joints.as_ref() else {
            return Err(MetricsError::Invalid(format!(
                "probe clip `{id}` has no joint annotations"
            )));
        };
        for f in (0..clip.frame_count).step_by(2) {
            let frame = clip.frame(f)?.resize(input, input);
            let data: Vec<f32> = frame.pixels.iter().map(|&p| p as f32 / 255.0).collect();
            let tensor = Tensor::from_vec(&[1, 1, input, input], data)?;
            let feat = model.appearance_features(tensor)?;
            pool.push((clip_no, feat.data().to_vec(), joints[f]));
        }
    }
    if pool.len() < 4 {
        return Err(MetricsError::Invalid("probe pool too small".into()));
    }

    let layout_dist = |a: &[(f32, f32); 9], b: &[(f32, f32); 9]| -> f32 {
        let norm = |j: &[(f32, f32); 9]| -> Vec<(f32, f32)> {
            let cx = j.iter().map(|p| p.0).sum::<f32>() / 9.0;
            let cy = j.iter().map(|p| p.1).sum::<f32>() / 9.0;
            let torso = dist(j[skel.torso_pair.0], j[skel.torso_pair.1]).max(1e-6);
            j.iter().map(|p| ((p.0 - cx) / torso, (p.1 - cy) / torso)).collect()
        };
        let na = norm(a);
        let nb = norm(b);
        na.iter().zip(&nb).map(|(p, q)| dist(*p, *q)).sum::<f32>() / 9.0
    };

    let mut diffs = Vec::with_capacity(num_queries);
    let mut sum_nn = 0.0f64;
    let mut sum_rand = 0.0f64;
    for _ in 0..num_queries {
        let qi = rng.random_range(0..pool.len());
        let (q_clip, q_feat, q_joints) = &pool[qi];
        let candidates: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].0 != *q_clip).collect();
        if candidates.is_empty() {
            return Err(MetricsError::Invalid(
                "every candidate shares the query clip".into(),
            ));
        }
        let nearest = candidates
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = feat_dist(q_feat, &pool[a].1);
                let db = feat_dist(q_feat, &pool[b].1);
                da.partial_cmp(&db).unwrap()
            })
            .expect("nonempty candidates");
        let random = candidates[rng.random_range(0..candidates.len())];
        let d_nn = layout_dist(q_joints, &pool[nearest].2);
        let d_rand = layout_dist(q_joints, &pool[random].2);
        sum_nn += d_nn as f64;
        sum_rand += d_rand as f64;
        diffs.push(d_rand - d_nn);
    }

    // sign-flip permutation test on the paired differences
    let observed = diffs.iter().sum::<f32>() / diffs.len() as f32;
    let permutations = 2000;
    let mut at_least = 1usize;
    for _ in 0..permutations {
        let stat = diffs
            .iter()
            .map(|&d| if rng.random::<bool>() { d } else { -d })
            .sum::<f32>()
            / diffs.len() as f32;
        if stat >= observed {
            at_least += 1;
        }
    }
    Ok(NnProbeReport {
        queries: num_queries,
        mean_neighbor_dist: (sum_nn / num_queries as f64) as f32,
        mean_random_dist: (sum_rand / num_queries as f64) as f32,
        p_value: at_least as f32 / (permutations + 1) as f32,
    })
}

fn feat_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_centered_bump() {
        let side = 60;
        let mut map = vec![0.0f32; side * side];
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f32 - 30.0).powi(2) + (y as f32 - 30.0).powi(2);
                map[y * side + x] = (-d2 / 8.0).exp();
            }
        }
        let (x, y) = decode_heatmap(&map, side, 20);
        assert!((x - 30.0).abs() < 0.5 && (y - 30.0).abs() < 0.5, "({x}, {y})");
    }

    #[test]
    fn decode_uniform_map_uses_row_major_tie_break() {
        let map = vec![1.0f32; 36];
        let (x, y) = decode_heatmap(&map, 6, 20);
        // first 20 pixels row-major: rows 0..2 full (18 px) plus (0,3),(1,3)
        let xs: f32 = (0..20).map(|i| (i % 6) as f32).sum::<f32>() / 20.0;
        let ys: f32 = (0..20).map(|i| (i / 6) as f32).sum::<f32>() / 20.0;
        assert_eq!((x, y), (xs, ys));
    }

    #[test]
    fn decode_block_centroid() {
        // top-20 pixels form a 4x5 block at rows 10..=13, cols 20..=24
        let side = 30;
        let mut map = vec![0.0f32; side * side];
        for y in 10..14 {
            for x in 20..25 {
                map[y * side + x] = 5.0 + (y + x) as f32 * 0.01;
            }
        }
        let (x, y) = decode_heatmap(&map, side, 20);
        assert!((x - 22.0).abs() < 1e-5, "x = {x}");
        assert!((y - 11.5).abs() < 1e-5, "y = {y}");
    }

    #[test]
    fn decode_ignores_values_outside_the_top_k() {
        let side = 10;
        let mut map: Vec<f32> = (0..100).map(|i| -(i as f32)).collect();
        let (x1, y1) = decode_heatmap(&map, side, 5);
        // permute everything below the cutoff
        map[50..].reverse();
        let (x2, y2) = decode_heatmap(&map, side, 5);
        assert_eq!((x1, y1), (x2, y2));
    }

    fn square_skel() -> SkeletonEval {
        SkeletonEval {
            limbs: vec![("limb".into(), 0, 1)],
            torso_pair: (0, 1),
            pcp_alpha: 0.5,
            pdj_thresholds: vec![0.1, 0.2, 0.3, 0.4],
        }
    }

    #[test]
    fn strict_pcp_threshold_arithmetic() {
        let skel = square_skel();
        let gt = [(0.0, 0.0), (10.0, 0.0)];
        // both endpoints off by 4 <= 5: correct
        let ok = strict_pcp(&[(0.0, 4.0), (10.0, 4.0)], &gt, &skel);
        assert_eq!(ok[0].1, Some(true));
        // one endpoint off by 6 > 5: incorrect even though the other passes
        let bad = strict_pcp(&[(0.0, 6.0), (10.0, 0.0)], &gt, &skel);
        assert_eq!(bad[0].1, Some(false));
        // exact prediction
        let exact = strict_pcp(&gt, &gt, &skel);
        assert_eq!(exact[0].1, Some(true));
    }

    #[test]
    fn strict_pcp_degenerate_limb_is_tallied() {
        let skel = square_skel();
        let gt = [(3.0, 3.0), (3.0, 3.0)];
        let mut acc = PcpAccumulator::default();
        acc.add(&[(0.0, 0.0), (1.0, 1.0)], &gt, &skel);
        assert_eq!(acc.degenerate, 1);
        assert!(acc.accuracy().is_empty());
    }

    #[test]
    fn pdj_threshold_arithmetic() {
        let skel = square_skel();
        // torso diameter 100; joint 0 exact, joint 1 off by 25
        let gt = [(0.0, 0.0), (100.0, 0.0)];
        let pred = [(0.0, 0.0), (125.0, 0.0)];
        let table = pdj(&pred, &gt, &skel, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(table[0], vec![true, true, true, true]);
        assert_eq!(table[1], vec![false, false, true, true]);
    }

    #[test]
    fn pdj_rates_monotone_in_threshold() {
        let skel = square_skel();
        let mut acc = PdjAccumulator::new(2, &[0.1, 0.2, 0.3, 0.4]);
        for k in 0..50 {
            let gt = [(0.0, 0.0), (50.0 + k as f32, 0.0)];
            let pred = [(k as f32 * 0.7, 1.0), (40.0, k as f32)];
            acc.add(&pred, &gt, &skel);
        }
        for rates in acc.rates() {
            for pair in rates.windows(2) {
                assert!(pair[0] <= pair[1], "monotonicity violated: {rates:?}");
            }
        }
    }

    #[test]
    fn pdj_invariant_to_joint_translation_and_scale() {
        let skel = square_skel();
        let gt = [(5.0, 5.0), (45.0, 35.0)];
        let pred = [(9.0, 5.0), (50.0, 30.0)];
        let base = pdj(&pred, &gt, &skel, &skel.pdj_thresholds).unwrap();
        let shift = |pts: &[(f32, f32); 2], dx: f32, dy: f32, s: f32| {
            [
                ((pts[0].0 + dx) * s, (pts[0].1 + dy) * s),
                ((pts[1].0 + dx) * s, (pts[1].1 + dy) * s),
            ]
        };
        let gt2 = shift(&gt, 13.0, -7.0, 3.0);
        let pred2 = shift(&pred, 13.0, -7.0, 3.0);
        assert_eq!(base, pdj(&pred2, &gt2, &skel, &skel.pdj_thresholds).unwrap());
    }

    #[test]
    fn protocol_sample_counts() {
        let p = ActionEvalProtocol::default_25_frame(64);
        assert_eq!(p.samples_per_video(), 250);
        let center_only = ActionEvalProtocol {
            corner_crops: false,
            flips: false,
            ..p
        };
        assert_eq!(center_only.samples_per_video(), 25);
    }
}
