//! Dense kernels shared by every model, with exact matmul FLOP accounting.
//!
//! Storage is `f32`; matmul and softmax accumulate in `f64`. Only matmul
//! multiply-adds are counted (2 FLOPs each); elementwise work is free.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{})", self.rows, self.cols)
    }
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "tensor data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2D {
        Tensor2D {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor2D {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Tensor2D {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Grow (or shrink) to `rows`, zero-filling new rows.
    pub fn resize_rows(&mut self, rows: usize) {
        self.data.resize(rows * self.cols, 0.0);
        self.rows = rows;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Where a matmul's FLOPs are charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    QProj,
    KProj,
    VProj,
    /// `Q Kᵀ`
    Scores,
    /// attention probabilities × `V`
    Mix,
    OutProj,
    Ffn1,
    Ffn2,
    Head,
}

impl Site {
    pub const ALL: [Site; 9] = [
        Site::QProj,
        Site::KProj,
        Site::VProj,
        Site::Scores,
        Site::Mix,
        Site::OutProj,
        Site::Ffn1,
        Site::Ffn2,
        Site::Head,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::QProj => "q_proj",
            Site::KProj => "k_proj",
            Site::VProj => "v_proj",
            Site::Scores => "scores",
            Site::Mix => "mix",
            Site::OutProj => "out_proj",
            Site::Ffn1 => "ffn1",
            Site::Ffn2 => "ffn2",
            Site::Head => "head",
        }
    }
}

/// Per-site FLOP totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flops {
    by_site: [u64; 9],
}

impl Flops {
    pub fn get(&self, site: Site) -> u64 {
        self.by_site[site.index()]
    }

    pub fn record(&mut self, site: Site, n: u64) {
        self.by_site[site.index()] += n;
    }

    pub fn total(&self) -> u64 {
        self.by_site.iter().sum()
    }

    /// Sum of the four attention projections (Q, K, V, out).
    pub fn projections(&self) -> u64 {
        self.get(Site::QProj) + self.get(Site::KProj) + self.get(Site::VProj) + self.get(Site::OutProj)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, u64)> + '_ {
        Site::ALL.iter().map(move |&s| (s, self.get(s)))
    }
}

impl Add for Flops {
    type Output = Flops;
    fn add(mut self, rhs: Flops) -> Flops {
        self += rhs;
        self
    }
}

impl AddAssign for Flops {
    fn add_assign(&mut self, rhs: Flops) {
        for (a, b) in self.by_site.iter_mut().zip(rhs.by_site) {
            *a += b;
        }
    }
}

impl Sub for Flops {
    type Output = Flops;
    fn sub(mut self, rhs: Flops) -> Flops {
        for (a, b) in self.by_site.iter_mut().zip(rhs.by_site) {
            *a -= b;
        }
        self
    }
}

/// Matmul FLOP counter owned by one decode session.
#[derive(Debug, Clone, Default)]
pub struct FlopCounter {
    flops: Flops,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Flops {
        self.flops
    }

    pub fn total(&self) -> u64 {
        self.flops.total()
    }

    fn charge(&mut self, site: Site, m: usize, k: usize, n: usize) {
        self.flops.record(site, 2 * (m as u64) * (k as u64) * (n as u64));
    }
}

/// `a × b`, charging `2·m·k·n` FLOPs to `site`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D, flops: &mut FlopCounter, site: Site) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::config(format!(
            "matmul dimension mismatch: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2D::zeros(m, n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let a_row = a.row(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = a_ip as f64;
            let b_row = b.row(p);
            for (slot, &b_pj) in acc.iter_mut().zip(b_row) {
                *slot += a_ip * b_pj as f64;
            }
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    flops.charge(site, m, k, n);
    Ok(out)
}

/// Numerically stable softmax over one row.
pub fn softmax_row(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::config("softmax of an empty vector"));
    }
    let max = v.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| (e / sum) as f32).collect())
}

/// Softmax over `v[..len]`, zero for entries past `len` (causal rows).
pub(crate) fn softmax_prefix(v: &mut [f32], len: usize) {
    let max = v[..len].iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let mut sum = 0f64;
    let mut exps = Vec::with_capacity(len);
    for &x in &v[..len] {
        let e = (x as f64 - max).exp();
        sum += e;
        exps.push(e);
    }
    for (slot, e) in v[..len].iter_mut().zip(exps) {
        *slot = (e / sum) as f32;
    }
    v[len..].iter_mut().for_each(|x| *x = 0.0);
}

/// Index of the maximum; ties go to the lowest index.
///
/// Panics on an empty slice.
pub fn argmax(v: &[f32]) -> usize {
    assert!(!v.is_empty(), "argmax of an empty vector");
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, descending by value, ties by ascending index.
pub fn top_k(v: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::config(format!("top_k: k={} outside 1..={}", k, v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let cmp = |&a: &usize, &b: &usize| v[b].total_cmp(&v[a]).then(a.cmp(&b));
    if k < v.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

pub const RMS_EPS: f64 = 1e-6;

/// `v / sqrt(mean(v²) + ε) * gain`.
pub fn rms_norm(v: &[f32], gain: &[f32]) -> Result<Vec<f32>> {
    if v.len() != gain.len() {
        return Err(Error::config(format!(
            "rms_norm length mismatch: {} vs {}",
            v.len(),
            gain.len()
        )));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let mean_sq = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len() as f64;
    let scale = 1.0 / (mean_sq + RMS_EPS).sqrt();
    Ok(v
        .iter()
        .zip(gain)
        .map(|(&x, &g)| (x as f64 * scale * g as f64) as f32)
        .collect())
}

/// Row-wise [`rms_norm`].
pub(crate) fn rms_norm_rows(x: &Tensor2D, gain: &[f32]) -> Result<Tensor2D> {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let normed = rms_norm(x.row(i), gain)?;
        out.row_mut(i).copy_from_slice(&normed);
    }
    Ok(out)
}

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}
