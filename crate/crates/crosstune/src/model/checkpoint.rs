//! Checkpoint file: fixed header, then every tensor as little-endian
//! 64-bit floats in a fixed order, then the adapter stack. The vocab hash
//! ties a checkpoint to the tokenizer it was trained with; loading under a
//! different vocabulary is a caller-level error the hash makes detectable.

use std::fs;
use std::path::Path;

use super::math::Mat;
use super::{AdapterTarget, LoraAdapter, ModelError, ModelParams};

const MAGIC: &[u8; 4] = b"CTM1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adapters: Vec<LoraAdapter>,
    pub vocab_hash: u64,
    pub seed: u64,
}

fn target_code(t: AdapterTarget) -> u8 {
    match t {
        AdapterTarget::Query => 0,
        AdapterTarget::Key => 1,
        AdapterTarget::Value => 2,
        AdapterTarget::Output => 3,
    }
}

fn target_from_code(code: u8) -> Option<AdapterTarget> {
    match code {
        0 => Some(AdapterTarget::Query),
        1 => Some(AdapterTarget::Key),
        2 => Some(AdapterTarget::Value),
        3 => Some(AdapterTarget::Output),
        _ => None,
    }
}

fn push_mat(out: &mut Vec<u8>, mat: &Mat) {
    for v in mat.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let err = |message: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    if !ckpt.params.is_finite() {
        return Err(err("refusing to save non-finite parameters".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.params.vocab_size() as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.params.d() as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.params.n_classes() as u32).to_le_bytes());
    out.extend_from_slice(&ckpt.vocab_hash.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    for mat in ckpt.params.mats() {
        push_mat(&mut out, mat);
    }
    out.extend_from_slice(&(ckpt.adapters.len() as u32).to_le_bytes());
    for ad in &ckpt.adapters {
        out.push(target_code(ad.target));
        out.extend_from_slice(&(ad.rank as u32).to_le_bytes());
        out.extend_from_slice(&ad.alpha.to_le_bytes());
        out.extend_from_slice(&ad.dropout_p.to_le_bytes());
        push_mat(&mut out, &ad.a);
        push_mat(&mut out, &ad.b);
    }
    fs::write(path, out).map_err(|e| err(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let err = |message: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    let raw = fs::read(path).map_err(|e| err(e.to_string()))?;
    let mut pos = 0usize;

    fn take<'a>(raw: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], String> {
        let end = pos.checked_add(n).filter(|&e| e <= raw.len());
        match end {
            Some(end) => {
                let slice = &raw[*pos..end];
                *pos = end;
                Ok(slice)
            }
            None => Err(format!("truncated at byte {pos} (wanted {n} more)")),
        }
    }
    macro_rules! read_u32 {
        () => {
            u32::from_le_bytes(take(&raw, &mut pos, 4).map_err(&err)?.try_into().unwrap())
        };
    }
    macro_rules! read_u64 {
        () => {
            u64::from_le_bytes(take(&raw, &mut pos, 8).map_err(&err)?.try_into().unwrap())
        };
    }
    macro_rules! read_f64 {
        () => {
            f64::from_le_bytes(take(&raw, &mut pos, 8).map_err(&err)?.try_into().unwrap())
        };
    }

    let magic = take(&raw, &mut pos, 4).map_err(&err)?;
    if magic != MAGIC {
        return Err(err(format!("bad magic {magic:02x?}")));
    }
    let version = read_u32!();
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let vocab_size = read_u32!() as usize;
    let d = read_u32!() as usize;
    let n_classes = read_u32!() as usize;
    if vocab_size == 0 || d < 2 || n_classes < 2 {
        return Err(err(format!(
            "degenerate dims vocab={vocab_size} d={d} classes={n_classes}"
        )));
    }
    let vocab_hash = read_u64!();
    let seed = read_u64!();

    let mut read_mat = |rows: usize, cols: usize| -> Result<Mat, ModelError> {
        let mut mat = Mat::zeros(rows, cols);
        for v in mat.values_mut() {
            *v = f64::from_le_bytes(take(&raw, &mut pos, 8).map_err(&err)?.try_into().unwrap());
        }
        Ok(mat)
    };

    let params = ModelParams {
        emb: read_mat(vocab_size, d)?,
        w_q: read_mat(d, d)?,
        w_k: read_mat(d, d)?,
        w_v: read_mat(d, d)?,
        w_o: read_mat(d, d)?,
        head_w: read_mat(d, n_classes)?,
        head_b: read_mat(1, n_classes)?,
    };
    drop(read_mat);

    let n_adapters = read_u32!() as usize;
    let mut adapters = Vec::with_capacity(n_adapters);
    for i in 0..n_adapters {
        let code = take(&raw, &mut pos, 1).map_err(&err)?[0];
        let target = target_from_code(code)
            .ok_or_else(|| err(format!("adapter {i}: unknown target code {code}")))?;
        let rank = read_u32!() as usize;
        if rank == 0 {
            return Err(err(format!("adapter {i}: rank 0")));
        }
        let alpha = read_f64!();
        let dropout_p = read_f64!();
        if !(alpha.is_finite() && alpha > 0.0) || !(0.0..1.0).contains(&dropout_p) {
            return Err(err(format!(
                "adapter {i}: bad alpha {alpha} or dropout {dropout_p}"
            )));
        }
        let mut read_mat = |rows: usize, cols: usize| -> Result<Mat, ModelError> {
            let mut mat = Mat::zeros(rows, cols);
            for v in mat.values_mut() {
                *v = f64::from_le_bytes(
                    take(&raw, &mut pos, 8).map_err(&err)?.try_into().unwrap(),
                );
            }
            Ok(mat)
        };
        adapters.push(LoraAdapter {
            target,
            a: read_mat(rank, d)?,
            b: read_mat(d, rank)?,
            rank,
            alpha,
            dropout_p,
        });
    }

    if pos != raw.len() {
        return Err(err(format!("{} trailing bytes", raw.len() - pos)));
    }
    let ckpt = Checkpoint {
        params,
        adapters,
        vocab_hash,
        seed,
    };
    if !ckpt.params.is_finite() || ckpt.adapters.iter().any(|a| !(a.a.is_finite() && a.b.is_finite()))
    {
        return Err(err("non-finite tensor entries".into()));
    }
    Ok(ckpt)
}
