//! Training checkpoints.
//!
//! Layout (little-endian): `"MSDK"`, version `u16`, `u32` length plus JSON
//! header (config, progress counters, mask metadata, metrics log), `u32`
//! tensor count, then per tensor: name length `u16`, name, dtype tag `u8`
//! (0 = f64, 1 = u8), rank `u8`, `rank` × `u64` dims, row-major payload;
//! then a `u32`-length RNG blob (32-byte seed, `u64` stream, `u128` word
//! position) and a trailing SHA-256 of every preceding byte.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta::{EpochRecord, TrainConfig, TrainState};
use crate::model::ParamStore;
use crate::optim::AdagradState;
use crate::prune::{MaskScope, PruneMask};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSDK";
pub const CHECKPOINT_VERSION: u16 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    entity_count: usize,
    relation_count: usize,
    epoch: usize,
    global_step: u64,
    mask_gamma: f64,
    mask_scope: MaskScope,
    mask_refreshed_at: u64,
    adagrad_epsilon: f64,
    separate_student: bool,
    metrics: Vec<EpochRecord>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dtype: u8, rows: usize, cols: usize, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(2);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn f64_bytes(t: &Array2<f64>) -> Vec<u8> {
    t.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let st = &ck.state;
    let header = Header {
        config: ck.config.clone(),
        entity_count: st.teacher.entity_count(),
        relation_count: st.teacher.relation_count(),
        epoch: st.epoch,
        global_step: st.global_step,
        mask_gamma: st.mask.gamma,
        mask_scope: st.mask.scope,
        mask_refreshed_at: st.mask.refreshed_at,
        adagrad_epsilon: st.optimizer.epsilon,
        separate_student: st.student.is_some(),
        metrics: st.metrics.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let names = st.teacher.tensor_names();
    let groups = 4 + usize::from(st.student.is_some());
    out.extend_from_slice(&((groups * names.len()) as u32).to_le_bytes());
    let f64_group = |prefix: &str, ts: &[Array2<f64>], out: &mut Vec<u8>| {
        for (name, t) in names.iter().zip(ts) {
            put_tensor(
                out,
                &format!("{prefix}/{name}"),
                DTYPE_F64,
                t.nrows(),
                t.ncols(),
                &f64_bytes(t),
            );
        }
    };
    f64_group("teacher", st.teacher.tensors(), &mut out);
    if let Some(s) = &st.student {
        f64_group("student", s.tensors(), &mut out);
    }
    f64_group("adagrad_student", &st.optimizer.student, &mut out);
    f64_group("adagrad_teacher", &st.optimizer.teacher, &mut out);
    for ((name, bits), t) in names.iter().zip(st.mask.bits()).zip(st.teacher.tensors()) {
        let payload: Vec<u8> = bits.iter().map(|&b| u8::from(b)).collect();
        put_tensor(
            &mut out,
            &format!("mask/{name}"),
            DTYPE_U8,
            t.nrows(),
            t.ncols(),
            &payload,
        );
    }

    let mut rng = Vec::with_capacity(56);
    rng.extend_from_slice(&st.quiz_rng.get_seed());
    rng.extend_from_slice(&st.quiz_rng.get_stream().to_le_bytes());
    rng.extend_from_slice(&st.quiz_rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&(rng.len() as u32).to_le_bytes());
    out.extend_from_slice(&rng);

    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    // write-then-rename so an interrupted save keeps the previous file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(corrupt("truncated checkpoint"));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct RawTensor<'a> {
    name: &'a str,
    dtype: u8,
    rows: usize,
    cols: usize,
    payload: &'a [u8],
}

fn read_tensor<'a>(r: &mut Reader<'a>) -> Result<RawTensor<'a>> {
    let n = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
    let dtype = r.u8()?;
    let width = match dtype {
        DTYPE_F64 => 8,
        DTYPE_U8 => 1,
        other => return Err(corrupt(format!("unknown dtype tag {other} for '{name}'"))),
    };
    if r.u8()? != 2 {
        return Err(corrupt(format!("tensor '{name}' is not two-dimensional")));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|x| x.checked_mul(width))
        .ok_or_else(|| corrupt(format!("tensor '{name}' is too large")))?;
    let payload = r.take(len)?;
    Ok(RawTensor {
        name,
        dtype,
        rows,
        cols,
        payload,
    })
}

fn to_f64(t: &RawTensor<'_>) -> Result<Array2<f64>> {
    if t.dtype != DTYPE_F64 {
        return Err(corrupt(format!("tensor '{}' should be f64", t.name)));
    }
    let v = t
        .payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((t.rows, t.cols), v).map_err(|e| corrupt(e.to_string()))
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < 6 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    if buf.len() < 6 + 32 {
        return Err(corrupt("truncated checkpoint"));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(corrupt("checksum mismatch (file corrupt or truncated)"));
    }
    let mut r = Reader { buf: body, pos: 6 };
    let json_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len)?).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let cfg = &header.config;
    let layout = cfg.backbone.layout(cfg.dim, header.entity_count, header.relation_count);

    let count = r.u32()? as usize;
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        raw.push(read_tensor(&mut r)?);
    }
    let group = |prefix: &str| -> Result<Vec<Array2<f64>>> {
        layout
            .iter()
            .map(|spec| {
                let name = format!("{prefix}/{}", spec.name);
                let t = raw
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| corrupt(format!("missing tensor '{name}'")))?;
                if (t.rows, t.cols) != (spec.rows, spec.cols) {
                    return Err(corrupt(format!("tensor '{name}' has the wrong shape")));
                }
                to_f64(t)
            })
            .collect()
    };
    let store = |ts| ParamStore::from_tensors(cfg.backbone, cfg.dim, header.entity_count, header.relation_count, ts);
    let teacher = store(group("teacher")?)?;
    let student = if header.separate_student {
        Some(store(group("student")?)?)
    } else {
        None
    };
    let optimizer = AdagradState {
        student: group("adagrad_student")?,
        teacher: group("adagrad_teacher")?,
        epsilon: header.adagrad_epsilon,
    };
    let mut bits = Vec::with_capacity(layout.len());
    for spec in &layout {
        let name = format!("mask/{}", spec.name);
        let t = raw
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| corrupt(format!("missing tensor '{name}'")))?;
        if t.dtype != DTYPE_U8 || (t.rows, t.cols) != (spec.rows, spec.cols) {
            return Err(corrupt(format!("tensor '{name}' has the wrong type or shape")));
        }
        let b: Result<Vec<bool>> = t
            .payload
            .iter()
            .map(|&x| match x {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(corrupt(format!("mask '{name}' holds a value other than 0 or 1"))),
            })
            .collect();
        bits.push(b?);
    }
    let mut mask = PruneMask::from_bits(bits, header.mask_gamma, header.mask_scope);
    mask.refreshed_at = header.mask_refreshed_at;

    let rng_len = r.u32()? as usize;
    if rng_len != 56 {
        return Err(corrupt("bad RNG state length"));
    }
    let blob = r.take(rng_len)?;
    let mut quiz_rng = ChaCha8Rng::from_seed(blob[..32].try_into().expect("32 bytes"));
    quiz_rng.set_stream(u64::from_le_bytes(blob[32..40].try_into().expect("8 bytes")));
    quiz_rng.set_word_pos(u128::from_le_bytes(blob[40..56].try_into().expect("16 bytes")));
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after the RNG state"));
    }

    Ok(Checkpoint {
        config: header.config,
        state: TrainState {
            teacher,
            student,
            mask,
            optimizer,
            epoch: header.epoch,
            global_step: header.global_step,
            quiz_rng,
            metrics: header.metrics,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{StudentStorage, TrainState};
    use rand::Rng;

    fn sample(separate: bool) -> Checkpoint {
        let config = TrainConfig {
            dim: 3,
            init_scale: 0.3,
            gamma: 0.5,
            student_storage: if separate {
                StudentStorage::Separate
            } else {
                StudentStorage::Shared
            },
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&config, 5, 2).unwrap();
        state.optimizer.teacher[0][[1, 2]] = 0.25;
        state.epoch = 3;
        state.global_step = 17;
        let _: u32 = state.quiz_rng.random();
        Checkpoint { config, state }
    }

    #[test]
    fn round_trip_is_bitwise() {
        for separate in [false, true] {
            let ck = sample(separate);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.msdk");
            save_checkpoint(&path, &ck).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, ck);
            assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
        }
    }

    #[test]
    fn metric_floats_survive_reencoding() {
        use crate::meta::{EpochRecord, EvalSummary};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut ck = sample(false);
        for epoch in 1..=20 {
            let mut x = || rng.random::<f64>() * 7.0;
            let losses = |v: f64| [("ce".to_string(), v), ("total".to_string(), v / 3.0)].into();
            let summary = EvalSummary {
                mrr: x(),
                hits1: 1.0 / 3.0,
                hits3: 0.1 + 0.2,
                hits10: x(),
            };
            ck.state.metrics.push(EpochRecord {
                epoch,
                steps: 3,
                student_loss: losses(x()),
                teacher_loss: losses(x()),
                quiz_ce: Some(x()),
                meta_skipped: 0,
                valid_teacher: Some(summary.clone()),
                valid_student: Some(summary),
                sparsity: x(),
                effective_params: 7,
                mask_flips: 1,
            });
        }
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rng_continues_identically() {
        let ck = sample(false);
        let mut back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        let mut orig = ck.state.quiz_rng.clone();
        for _ in 0..10 {
            assert_eq!(orig.random::<u64>(), back.state.quiz_rng.random::<u64>());
        }
    }

    #[test]
    fn truncation_and_corruption_are_reported() {
        let bytes = encode_checkpoint(&sample(false)).unwrap();
        for cut in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        let err = decode_checkpoint(&flipped).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_checkpoint(&sample(false)).unwrap();
        bytes[4] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }
}
