//! Checkpoint file: magic "MPCK", version u16, architecture fingerprint,
//! named parameter tensors, then training history after a "HIST" marker.
//! All multi-byte values little-endian; round-trips are bitwise.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{ParamSet, Tensor};

use super::{Result, TrainerError};

pub const MPCK_MAGIC: &[u8; 4] = b"MPCK";
pub const MPCK_VERSION: u16 = 1;
const HIST_MARKER: &[u8; 4] = b"HIST";

/// FNV-1a hash of a serialized architecture description.
pub fn fingerprint(arch_string: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in arch_string.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub iteration: u32,
    pub loss: f32,
    pub val_acc: f32,
}

/// Named-parameter snapshot plus training history.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u16,
    pub fingerprint: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub history: Vec<HistoryRecord>,
}

impl Checkpoint {
    pub fn from_params(
        fingerprint: u64,
        params: &ParamSet,
        history: Vec<HistoryRecord>,
    ) -> Checkpoint {
        Checkpoint {
            version: MPCK_VERSION,
            fingerprint,
            tensors: params
                .iter()
                .map(|(name, p)| {
                    let mut t = p.value.clone();
                    t.clear_grad();
                    (name.clone(), t)
                })
                .collect(),
            history,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| TrainerError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = Vec::new();
        out.extend_from_slice(MPCK_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(HIST_MARKER);
        for rec in &self.history {
            out.extend_from_slice(&rec.iteration.to_le_bytes());
            out.extend_from_slice(&rec.loss.to_le_bytes());
            out.extend_from_slice(&rec.val_acc.to_le_bytes());
        }
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(&out).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let io_err = |source| TrainerError::Io {
            path: path.display().to_string(),
            source,
        };
        let bad = |reason: &str| TrainerError::CheckpointFormat {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(bad("truncated file"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MPCK_MAGIC {
            return Err(bad("missing MPCK magic"));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != MPCK_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let fp = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor =
                Tensor::from_vec(&shape, data).map_err(|e| bad(&format!("tensor {name}: {e}")))?;
            tensors.push((name, tensor));
        }
        if take(&mut pos, 4)? != HIST_MARKER {
            return Err(bad("missing HIST marker"));
        }
        let rest = bytes.len() - pos;
        if rest % 12 != 0 {
            return Err(bad("history record stream is truncated"));
        }
        let mut history = Vec::with_capacity(rest / 12);
        for _ in 0..rest / 12 {
            history.push(HistoryRecord {
                iteration: u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()),
                loss: f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()),
                val_acc: f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()),
            });
        }
        Ok(Checkpoint {
            version,
            fingerprint: fp,
            tensors,
            history,
        })
    }

    /// Install the checkpoint values into a parameter set whose architecture
    /// fingerprint must match; on mismatch, refuses with a diff of layer
    /// shapes between the checkpoint and the destination.
    pub fn apply_to(&self, params: &mut ParamSet, expected_fingerprint: u64) -> Result<()> {
        if self.fingerprint != expected_fingerprint {
            return Err(TrainerError::FingerprintMismatch {
                expected: expected_fingerprint,
                found: self.fingerprint,
                diff: self.shape_diff(params),
            });
        }
        for (name, tensor) in &self.tensors {
            let dst = params
                .get_mut(name)
                .map_err(|e| TrainerError::Tensor(e))?;
            if dst.value.shape() != tensor.shape() {
                return Err(TrainerError::FingerprintMismatch {
                    expected: expected_fingerprint,
                    found: self.fingerprint,
                    diff: self.shape_diff(params),
                });
            }
            dst.value = tensor.clone();
            dst.value.clear_grad();
        }
        Ok(())
    }

    fn shape_diff(&self, params: &ParamSet) -> String {
        let mut lines = Vec::new();
        for (name, tensor) in &self.tensors {
            match params.get(name) {
                Ok(p) if p.value.shape() == tensor.shape() => {}
                Ok(p) => lines.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    tensor.shape(),
                    p.value.shape()
                )),
                Err(_) => lines.push(format!("{name}: only in checkpoint {:?}", tensor.shape())),
            }
        }
        for name in params.names() {
            if !self.tensors.iter().any(|(n, _)| n == name) {
                lines.push(format!("{name}: only in model"));
            }
        }
        if lines.is_empty() {
            "identical layer shapes (fingerprints differ on metadata)".into()
        } else {
            lines.join("; ")
        }
    }

    /// Parameter values as a fresh ParamSet (zero velocities, no grads).
    pub fn to_param_set(&self) -> ParamSet {
        let mut params = ParamSet::new();
        for (name, tensor) in &self.tensors {
            params.insert(name, tensor.clone());
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        params.init_layer(
            "conv1",
            &crate::tensor::LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 1,
            },
            &mut rng,
        );
        params.init_layer(
            "fc6",
            &crate::tensor::LayerSpec::FullyConnected { in_dim: 12, out_dim: 4 },
            &mut rng,
        );
        Checkpoint::from_params(
            fingerprint("test-arch"),
            &params,
            vec![
                HistoryRecord { iteration: 10, loss: 1.25, val_acc: 0.5 },
                HistoryRecord { iteration: 20, loss: 0.75, val_acc: 0.75 },
            ],
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mpck");
        let p2 = dir.path().join("b.mpck");
        let ck = sample_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.history, ck.history);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "bitwise parameter round-trip");
        }
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mpck");
        sample_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(TrainerError::CheckpointFormat { .. })
        ));
    }

    #[test]
    fn fingerprint_mismatch_refuses_with_shape_diff() {
        let ck = sample_checkpoint();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut other = ParamSet::new();
        other.init_layer(
            "conv1",
            &crate::tensor::LayerSpec::Conv2d {
                in_channels: 8,
                out_channels: 3,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 1,
            },
            &mut rng,
        );
        let err = ck.apply_to(&mut other, fingerprint("other-arch")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv1.w"), "{msg}");
        assert!(msg.contains("checkpoint [3, 2, 3, 3]"), "{msg}");
        assert!(msg.contains("only in checkpoint") || msg.contains("fc6"), "{msg}");
    }

    #[test]
    fn history_survives_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.mpck");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.history.len(), 2);
        assert_eq!(loaded.history[1].iteration, 20);
        assert_eq!(loaded.history[1].val_acc, 0.75);
    }
}
