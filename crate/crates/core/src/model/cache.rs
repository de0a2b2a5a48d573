use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Per-layer keys and values over the sequence, plus the length of the
/// frozen prefix.
///
/// Rows below `frozen_len` are never written once frozen; `frozen_len`
/// only grows.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Vec<Tensor2D>,
    values: Vec<Tensor2D>,
    frozen_len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self {
            keys: (0..n_layers).map(|_| Tensor2D::zeros(0, width)).collect(),
            values: (0..n_layers).map(|_| Tensor2D::zeros(0, width)).collect(),
            frozen_len: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// Rows currently held per layer.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Tensor2D::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frozen_len(&self) -> usize {
        self.frozen_len
    }

    pub fn keys(&self, layer: usize) -> &Tensor2D {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Tensor2D {
        &self.values[layer]
    }

    /// Advance the frozen prefix to `len`.
    pub fn freeze_to(&mut self, len: usize) -> Result<()> {
        if len < self.frozen_len {
            return Err(Error::contract(format!(
                "frozen prefix cannot shrink from {} to {}",
                self.frozen_len, len
            )));
        }
        if self.n_layers() > 0 && len > self.len() {
            return Err(Error::contract(format!(
                "cannot freeze {} rows, only {} computed",
                len,
                self.len()
            )));
        }
        self.frozen_len = len;
        Ok(())
    }

    pub(crate) fn ensure_rows(&mut self, rows: usize) {
        if rows > self.len() {
            for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
                t.resize_rows(rows);
            }
        }
    }

    /// Overwrite rows `[start, start + k.rows())` of one layer.
    pub(crate) fn write(&mut self, layer: usize, start: usize, k: &Tensor2D, v: &Tensor2D) {
        debug_assert!(start >= self.frozen_len);
        for r in 0..k.rows() {
            self.keys[layer].row_mut(start + r).copy_from_slice(k.row(r));
            self.values[layer].row_mut(start + r).copy_from_slice(v.row(r));
        }
    }

    /// True if rows `[0, upto)` of every layer are bit-identical in both caches.
    pub fn prefix_bits_equal(&self, other: &KvCache, upto: usize) -> bool {
        let bits = |t: &Tensor2D| -> Vec<u32> {
            t.data()[..upto * t.cols()].iter().map(|x| x.to_bits()).collect()
        };
        self.n_layers() == other.n_layers()
            && (0..self.n_layers()).all(|l| {
                bits(&self.keys[l]) == bits(&other.keys[l])
                    && bits(&self.values[l]) == bits(&other.values[l])
            })
    }
}
