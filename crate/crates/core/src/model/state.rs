//! Exact model snapshots and their binary container.
//!
//! Container layout: the 8-byte magic `TTASTATE`, a little-endian `u64`
//! header length, a UTF-8 JSON header (architecture signature, dtype,
//! normalization mode, section table and content hash), then the raw
//! little-endian `f64` arrays in section order.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdaptableModel, NormMode, NormStats, ParamGroup};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TTASTATE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

/// Ordered list of (name, shape, group) plus normalization layer widths.
/// Two models are restore-compatible iff their signatures are equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSignature {
    pub num_classes: usize,
    pub params: Vec<SignatureEntry>,
    pub norm_channels: Vec<usize>,
}

/// A full copy of parameters, normalization state and optimizer slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    signature: ArchitectureSignature,
    mode: NormMode,
    params: Vec<Vec<f64>>,
    norm: Vec<NormStats>,
    slots: Vec<Vec<f64>>,
    hash: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct Header {
    signature: ArchitectureSignature,
    dtype: String,
    mode: NormMode,
    slot_lengths: Vec<usize>,
    hash: String,
}

impl ModelState {
    pub(crate) fn capture(model: &AdaptableModel) -> Self {
        let mut state = Self {
            signature: model.signature(),
            mode: model.mode,
            params: model.params.iter().map(|p| p.value.clone()).collect(),
            norm: model.norm.clone(),
            slots: model.slots.clone(),
            hash: [0; 32],
        };
        state.hash = state.compute_hash();
        state
    }

    pub(crate) fn apply(&self, model: &mut AdaptableModel) -> Result<()> {
        let sig = model.signature();
        if sig != self.signature {
            return Err(Error::ArchitectureMismatch(describe_mismatch(&sig, &self.signature)));
        }
        for (p, v) in model.params.iter_mut().zip(&self.params) {
            p.value.clone_from(v);
        }
        model.norm.clone_from(&self.norm);
        model.slots.clone_from(&self.slots);
        model.mode = self.mode;
        Ok(())
    }

    pub fn signature(&self) -> &ArchitectureSignature {
        &self.signature
    }

    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn hash_hex(&self) -> String {
        to_hex(&self.hash)
    }

    fn arrays(&self) -> impl Iterator<Item = &[f64]> {
        self.params
            .iter()
            .map(Vec::as_slice)
            .chain(self.norm.iter().flat_map(|n| [n.mean.as_slice(), n.var.as_slice()]))
            .chain(self.slots.iter().map(Vec::as_slice))
    }

    fn compute_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.signature).expect("signature serializes"));
        h.update([match self.mode {
            NormMode::UseRunning => 0u8,
            NormMode::UseBatch => 1u8,
        }]);
        for a in self.arrays() {
            h.update((a.len() as u64).to_le_bytes());
            for x in a {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            signature: self.signature.clone(),
            dtype: "F64".into(),
            mode: self.mode,
            slot_lengths: self.slots.iter().map(Vec::len).collect(),
            hash: self.hash_hex(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.arrays().map(<[f64]>::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in self.arrays() {
            for x in a {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::StateFormat(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fail("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(hlen).ok_or_else(|| fail("header length overflow"))?;
        if bytes.len() < body_start {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        if header.dtype != "F64" {
            return Err(Error::StateFormat(format!("unsupported dtype {}", header.dtype)));
        }
        let mut cursor = body_start;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            let end = cursor + 8 * n;
            if end > bytes.len() {
                return Err(fail("truncated array data"));
            }
            let v = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            Ok(v)
        };
        let sig = &header.signature;
        let params = sig
            .params
            .iter()
            .map(|e| read(e.shape.iter().product()))
            .collect::<Result<Vec<_>>>()?;
        let norm = sig
            .norm_channels
            .iter()
            .map(|&c| {
                Ok(NormStats {
                    mean: read(c)?,
                    var: read(c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if header.slot_lengths.len() != params.len() {
            return Err(fail("slot table does not match parameter list"));
        }
        let slots = header
            .slot_lengths
            .iter()
            .map(|&n| read(n))
            .collect::<Result<Vec<_>>>()?;
        if cursor != bytes.len() {
            return Err(fail("trailing bytes after arrays"));
        }
        let mut state = Self {
            signature: header.signature,
            mode: header.mode,
            params,
            norm,
            slots,
            hash: [0; 32],
        };
        state.hash = state.compute_hash();
        if state.hash_hex() != header.hash {
            return Err(fail("content hash does not match header"));
        }
        Ok(state)
    }
}

fn describe_mismatch(model: &ArchitectureSignature, state: &ArchitectureSignature) -> String {
    if model.num_classes != state.num_classes {
        return format!(
            "model has {} classes, state has {}",
            model.num_classes, state.num_classes
        );
    }
    if model.params.len() != state.params.len() {
        return format!(
            "model has {} parameter arrays, state has {}",
            model.params.len(),
            state.params.len()
        );
    }
    for (a, b) in model.params.iter().zip(&state.params) {
        if a != b {
            return format!("parameter {} {:?} vs state {} {:?}", a.name, a.shape, b.name, b.shape);
        }
    }
    "normalization layers differ".into()
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
