//! Named parameter storage.
//!
//! Model weights live in a flat, registration-ordered store. The order is
//! deterministic for a given architecture, which makes checkpoint
//! serialization byte-stable and lets the optimizer address parameters by
//! dense index. Freezing (for the frozen-encoder training protocol) flips a
//! per-tensor `trainable` flag; frozen tensors receive no optimizer update.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// Dense handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One named weight tensor.
#[derive(Debug, Clone)]
pub struct ParamTensor<S> {
    pub name: String,
    pub value: ArrayD<S>,
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    tensors: Vec<ParamTensor<S>>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Register a tensor under a unique dotted name.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.tensors.push(ParamTensor {
            name,
            value,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.tensors[id.0].value
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor<S> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.tensors[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Iterate tensors in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
    }

    /// Mark every tensor whose name starts with `prefix` (non-)trainable.
    /// Returns how many tensors matched.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for t in &mut self.tensors {
            if t.name.starts_with(prefix) {
                t.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Copy the values of every tensor whose name starts with `prefix` from
    /// `src` (matched by full name). Errors if shapes differ or a matching
    /// tensor is missing on either side.
    pub fn copy_values_by_prefix(&mut self, src: &ParamStore<S>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for t in &mut self.tensors {
            if !t.name.starts_with(prefix) {
                continue;
            }
            let sid = src.by_name.get(&t.name).ok_or_else(|| {
                Error::Incompatible(format!("source checkpoint lacks parameter {}", t.name))
            })?;
            let sv = &src.tensors[*sid].value;
            if sv.shape() != t.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {} shape mismatch: {:?} vs {:?}",
                    t.name,
                    t.value.shape(),
                    sv.shape()
                )));
            }
            t.value.assign(sv);
            n += 1;
        }
        Ok(n)
    }

    /// Order-sensitive bitwise digest over the tensors whose names start
    /// with `prefix` (FNV-1a over the IEEE bit patterns). Two stores agree
    /// on this digest iff the covered values are bit-identical.
    pub fn bit_digest(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            for byte in v.to_be_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for t in &self.tensors {
            if !t.name.starts_with(prefix) {
                continue;
            }
            for &v in t.value.iter() {
                mix(v.to_f64().to_bits());
            }
        }
        h
    }

    /// Total number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}
