//! Binary checkpoints of model parameters and, optionally, optimizer state.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "STLSTMCK" | u32 version (1)
//! u8 variant (0 lstm, 1 st-lstm, 2 st-clstm) | u8 ablation bits (T1,T2,D1,D2 = bits 0..3)
//! u8 constraint target (0 interval, 1 input) | u8 flags
//!     flags: bit0 exclude_visited, bit1 log1p, bit2 clip_dt present,
//!            bit3 clip_dd present, bit4 bptt_cap present, bit5 optimizer present
//! u64 n_i | u64 n_c | u64 vocab | f64 clip_dt | f64 clip_dd | u64 bptt_cap
//! u64 epochs completed | u64 training seed
//! u32 tensor count, then per tensor:
//!     u16 name length | name (utf-8) | u8 ndim | ndim × u64 dims | numel × f64
//! if flags bit5:
//!     u64 step | f64 lr | f64 beta1 | f64 beta2 | f64 eps
//!     per tensor, in the same order: numel × f64 first moment, numel × f64 second moment
//! ```
//!
//! Absent optional fields are written as zero.

use std::fs;
use std::path::Path;

use crate::cells::{ConstraintTarget, GateAblation, Variant};
use crate::data::{ByteReader, IntervalScaling};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numkit::{ParamSet, Shape};
use crate::optim::{AdamConfig, AdamState};

const MAGIC: &[u8; 8] = b"STLSTMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub epochs_completed: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let s = &c.scaling;
        let mut flags = 0u8;
        flags |= c.exclude_visited as u8;
        flags |= (s.log1p as u8) << 1;
        flags |= (s.clip_dt.is_some() as u8) << 2;
        flags |= (s.clip_dd.is_some() as u8) << 3;
        flags |= (c.bptt_cap.is_some() as u8) << 4;
        flags |= (self.optimizer.is_some() as u8) << 5;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&[c.variant.tag(), c.ablation.bits(), c.constraint_target.tag(), flags]);
        for v in [c.n_i as u64, c.n_c as u64, c.vocab as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.clip_dt.unwrap_or(0.0).to_le_bytes());
        out.extend_from_slice(&s.clip_dd.unwrap_or(0.0).to_le_bytes());
        out.extend_from_slice(&(c.bptt_cap.unwrap_or(0) as u64).to_le_bytes());
        out.extend_from_slice(&self.epochs_completed.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());

        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            let dims = t.shape.dims();
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&opt.t.to_le_bytes());
            let AdamConfig { lr, beta1, beta2, eps } = opt.config;
            for v in [lr, beta1, beta2, eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for (m, v) in opt.m.iter().zip(&opt.v) {
                for x in m.iter().chain(v) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            path: origin.to_path_buf(),
            msg,
        };
        let truncated = || fmt("truncated checkpoint".into());
        let mut r = ByteReader::new(bytes);
        if r.take(8) != Some(MAGIC.as_slice()) {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let head = r.take(4).ok_or_else(truncated)?;
        let variant = Variant::from_tag(head[0]).ok_or_else(|| fmt(format!("unknown variant tag {}", head[0])))?;
        if head[1] > 0b1111 {
            return Err(fmt(format!("invalid ablation bits {:#x}", head[1])));
        }
        let ablation = GateAblation::from_bits(head[1]);
        let constraint_target =
            ConstraintTarget::from_tag(head[2]).ok_or_else(|| fmt(format!("unknown constraint tag {}", head[2])))?;
        let flags = head[3];
        let n_i = r.u64().ok_or_else(truncated)? as usize;
        let n_c = r.u64().ok_or_else(truncated)? as usize;
        let vocab = r.u64().ok_or_else(truncated)? as usize;
        let clip_dt = r.f64().ok_or_else(truncated)?;
        let clip_dd = r.f64().ok_or_else(truncated)?;
        let bptt_cap = r.u64().ok_or_else(truncated)? as usize;
        let epochs_completed = r.u64().ok_or_else(truncated)?;
        let seed = r.u64().ok_or_else(truncated)?;
        let bit = |k: u8| flags & (1 << k) != 0;
        let config = ModelConfig {
            variant,
            n_i,
            n_c,
            vocab,
            ablation,
            bptt_cap: bit(4).then_some(bptt_cap),
            constraint_target,
            scaling: IntervalScaling {
                clip_dt: bit(2).then_some(clip_dt),
                clip_dd: bit(3).then_some(clip_dd),
                log1p: bit(1),
            },
            exclude_visited: bit(0),
        };
        config.validate().map_err(|e| fmt(e.to_string()))?;

        let mut params = ModelParams::zeros(&config);
        let n = r.u32().ok_or_else(truncated)? as usize;
        let mut slots = params.tensors_mut();
        if n != slots.len() {
            return Err(fmt(format!(
                "{} tensors stored, {} expected for {variant}",
                n,
                slots.len()
            )));
        }
        let mut sizes = Vec::with_capacity(n);
        for slot in slots.iter_mut() {
            let len = r.u16().ok_or_else(truncated)? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
                .map_err(|_| fmt("tensor name is not utf-8".into()))?;
            if name != slot.name {
                return Err(fmt(format!("tensor `{name}` found where `{}` expected", slot.name)));
            }
            let ndim = r.u8().ok_or_else(truncated)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64().ok_or_else(truncated)? as usize);
            }
            let shape = match dims[..] {
                [n] => Shape::Vector(n),
                [a, b] => Shape::Matrix(a, b),
                _ => return Err(fmt(format!("tensor `{name}` has {ndim} dimensions"))),
            };
            if shape != slot.shape {
                return Err(fmt(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    shape.dims(),
                    slot.shape.dims()
                )));
            }
            for v in slot.data.iter_mut() {
                *v = r.f64().ok_or_else(truncated)?;
            }
            sizes.push(slot.data.len());
        }
        drop(slots);

        let optimizer = if bit(5) {
            let t = r.u64().ok_or_else(truncated)?;
            let mut h = [0.0; 4];
            for x in h.iter_mut() {
                *x = r.f64().ok_or_else(truncated)?;
            }
            let mut state = AdamState::new(
                &params,
                AdamConfig {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                },
            );
            state.t = t;
            for (k, &size) in sizes.iter().enumerate() {
                for j in 0..size {
                    state.m[k][j] = r.f64().ok_or_else(truncated)?;
                }
                for j in 0..size {
                    state.v[k][j] = r.f64().ok_or_else(truncated)?;
                }
            }
            Some(state)
        } else {
            None
        };
        if !r.is_empty() {
            return Err(fmt("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            epochs_completed,
            seed,
        })
    }

    /// Writes through a temporary file and rename, so a crash never leaves
    /// a half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
