use std::sync::Arc;

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

impl<F: Element> Tensor<F> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            Arc::clone(&self.data),
            &[self],
            |g, _| vec![Some(g.to_vec())],
        )
    }

    /// Gathers `out[i] = self[indices[i]]` (flat indices). Every index-based
    /// op (row selection, k-NN gather, flips, rotations) is built on this.
    pub fn take(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != indices.len() {
            return Err(Error::shape("take", &[indices.len()], shape));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.numel()) {
            return Err(Error::invalid(format!(
                "take: index {bad} out of range for {} elements",
                self.numel()
            )));
        }
        let out: Vec<F> = indices.iter().map(|&i| self.data[i]).collect();
        let n = self.numel();
        Tensor::from_op("take", shape.to_vec(), Arc::new(out), &[self], move |g, _| {
            let mut gx = vec![F::zero(); n];
            for (&i, &v) in indices.iter().zip(g) {
                gx[i] += v;
            }
            vec![Some(gx)]
        })
    }

    /// Per-row column gather on a matrix: `out[r, j] = self[r, cols[r][j]]`.
    pub fn gather_cols(&self, cols: &[Vec<usize>]) -> Result<Tensor<F>> {
        if self.ndim() != 2 || cols.len() != self.shape[0] {
            return Err(Error::shape("gather_cols", &self.shape, &[cols.len()]));
        }
        let k = cols.first().map_or(0, Vec::len);
        let n = self.shape[1];
        let mut idx = Vec::with_capacity(cols.len() * k);
        for (r, row) in cols.iter().enumerate() {
            if row.len() != k || row.iter().any(|&c| c >= n) {
                return Err(Error::invalid("gather_cols: ragged or out-of-range column list"));
            }
            idx.extend(row.iter().map(|&c| r * n + c));
        }
        self.take(idx, &[cols.len(), k])
    }

    /// Selects entries along axis 0.
    pub fn index_select(&self, rows: &[usize]) -> Result<Tensor<F>> {
        if self.ndim() == 0 {
            return Err(Error::shape("index_select", &self.shape, &[]));
        }
        let stride: usize = self.shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.shape[0]) {
            return Err(Error::invalid(format!("index_select: row {bad} out of range")));
        }
        let idx = rows
            .iter()
            .flat_map(|&r| (r * stride)..((r + 1) * stride))
            .collect();
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        self.take(idx, &shape)
    }

    /// Contiguous slice `[start, start + len)` along axis 0.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.index_select(&rows)
    }

    /// Column `col` of a matrix as a vector.
    pub fn column(&self, col: usize) -> Result<Tensor<F>> {
        if self.ndim() != 2 || col >= self.shape[1] {
            return Err(Error::shape("column", &self.shape, &[col]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        self.take((0..r).map(|i| i * c + col).collect(), &[r])
    }

    pub fn transpose2d(&self) -> Result<Tensor<F>> {
        if self.ndim() != 2 {
            return Err(Error::shape("transpose2d", &self.shape, &[]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let idx = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.take(idx, &[c, r])
    }

    /// Mirrors an NCHW tensor along the width axis.
    pub fn flip_w(&self) -> Result<Tensor<F>> {
        if self.ndim() != 4 {
            return Err(Error::shape("flip_w", &self.shape, &[]));
        }
        let w = self.shape[3];
        let idx = (0..self.numel())
            .map(|i| {
                let x = i % w;
                i - x + (w - 1 - x)
            })
            .collect();
        self.take(idx, &self.shape.clone())
    }

    /// Rotates square NCHW images by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rot90(&self, quarter_turns: usize) -> Result<Tensor<F>> {
        if self.ndim() != 4 || self.shape[2] != self.shape[3] {
            return Err(Error::shape("rot90", &self.shape, &[]));
        }
        let s = self.shape[2];
        let plane = s * s;
        let turns = quarter_turns % 4;
        let idx = (0..self.numel())
            .map(|i| {
                let base = i - i % plane;
                let (y, x) = ((i % plane) / s, i % s);
                // source pixel that lands on (y, x)
                let (sy, sx) = match turns {
                    0 => (y, x),
                    1 => (x, s - 1 - y),
                    2 => (s - 1 - y, s - 1 - x),
                    _ => (s - 1 - x, y),
                };
                base + sy * s + sx
            })
            .collect();
        self.take(idx, &self.shape.clone())
    }

    /// Concatenation along axis 0.
    pub fn concat(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape[1..] != tail {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let mut shape = first.shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let mut out = Vec::with_capacity(numel(&shape));
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            spans.push((out.len(), p.numel()));
            out.extend_from_slice(&p.data);
        }
        Tensor::from_op("concat", shape, Arc::new(out), parts, move |g, needs| {
            spans
                .iter()
                .zip(needs)
                .map(|(&(s, n), &need)| need.then(|| g[s..s + n].to_vec()))
                .collect()
        })
    }
}
