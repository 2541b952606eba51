use std::sync::Arc;

use crate::error::{invalid, shape_err, Result};
use crate::numcore::Tensor;

/// Per-layer keys and values of every processed decoder position.
///
/// Each layer holds `[len × d_model]` tensors; with heads laid out as
/// contiguous `d_head` chunks this is the `[len × n_heads × d_head]` layout.
/// The cross-attention projections of the encoder output are computed once
/// per stream and shared between clones.
#[derive(Clone, Debug)]
pub struct KVCache {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    len: usize,
    cross: Arc<Vec<(Tensor, Tensor)>>,
}

impl KVCache {
    pub(crate) fn new(n_layers: usize, d_model: usize, cross: Vec<(Tensor, Tensor)>) -> Self {
        let empty = || Tensor::zeros(vec![0, d_model]);
        Self {
            keys: (0..n_layers).map(|_| empty()).collect(),
            values: (0..n_layers).map(|_| empty()).collect(),
            len: 0,
            cross: Arc::new(cross),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> &Tensor {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Tensor {
        &self.values[layer]
    }

    pub(crate) fn cross(&self, layer: usize) -> (&Tensor, &Tensor) {
        let (k, v) = &self.cross[layer];
        (k, v)
    }

    /// Keeps the first `n` positions in every layer.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n > self.len {
            return invalid(format!("truncate to {n} beyond cached length {}", self.len));
        }
        for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
            t.truncate_rows(n);
        }
        self.len = n;
        Ok(())
    }

    /// Appends the same number of new positions to every layer.
    pub(crate) fn append(&mut self, new: Vec<(Tensor, Tensor)>) -> Result<()> {
        if new.len() != self.keys.len() {
            return shape_err(format!(
                "{} layers appended to a {}-layer cache",
                new.len(),
                self.keys.len()
            ));
        }
        let p = new[0].0.rows();
        if new.iter().any(|(k, v)| k.rows() != p || v.rows() != p) {
            return shape_err("uneven append across layers");
        }
        for (l, (k, v)) in new.into_iter().enumerate() {
            self.keys[l].append_rows(&k)?;
            self.values[l].append_rows(&v)?;
        }
        self.len += p;
        Ok(())
    }

    /// Bitwise equality of the cached self-attention state.
    pub fn same_state(&self, other: &KVCache) -> bool {
        self.len == other.len
            && self.keys.iter().zip(&other.keys).all(|(a, b)| bit_eq(a, b))
            && self.values.iter().zip(&other.values).all(|(a, b)| bit_eq(a, b))
    }

    #[doc(hidden)]
    pub fn keys_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.keys[layer]
    }
}

fn bit_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}
