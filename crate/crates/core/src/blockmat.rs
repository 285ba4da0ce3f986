//! Block matrices over cluster pairs with logarithmic decay norms.
//!
//! A [`BlockMatrix`] stores one dense complex block per cluster pair
//! `([a],[b])`; absent blocks are zero. The decay norms are
//!
//! ```text
//! |A|_β  = max_{a,b} (1+ln w_a)^β (1+ln w_b)^β ‖A_[a]^[b]‖
//! |A|_β+ = max_{a,b} (1+|w_a−w_b|) (1+ln w_a)^β (1+ln w_b)^β ‖A_[a]^[b]‖
//! ```
//!
//! with `‖·‖` the spectral norm. On a finite truncation the suprema are maxima
//! over retained pairs; every report carries the cutoff it was measured at.

use crate::basis::ClusterLayout;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

pub type C64 = Complex64;
pub type Block = DMatrix<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("block matrices live on different cluster layouts")]
    LayoutMismatch,
    #[error("vector has {got} entries, layout has {expected} modes")]
    SizeMismatch { expected: usize, got: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("auxiliary series exponent δ = {delta} must exceed 1")]
    DeltaNotSummable { delta: f64 },
    #[error("malformed block matrix data: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "BlockMatrixRepr", try_from = "BlockMatrixRepr")]
pub struct BlockMatrix {
    layout: Arc<ClusterLayout>,
    blocks: BTreeMap<(usize, usize), Block>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayNormReport {
    pub beta: f64,
    pub norm: f64,
    pub norm_plus: f64,
    pub argmax_pair: Option<(usize, usize)>,
    pub w_max: u32,
}

/// Per-mode coefficients `ξ_a` with the weighted norms `‖ξ‖_s² = Σ w_a^s |ξ_a|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceVector {
    layout: Arc<ClusterLayout>,
    pub values: DVector<C64>,
}

impl SequenceVector {
    pub fn new(layout: Arc<ClusterLayout>, values: DVector<C64>) -> Result<Self, BlockError> {
        if values.len() != layout.n_modes() {
            return Err(BlockError::SizeMismatch {
                expected: layout.n_modes(),
                got: values.len(),
            });
        }
        Ok(SequenceVector { layout, values })
    }

    pub fn zeros(layout: Arc<ClusterLayout>) -> Self {
        let n = layout.n_modes();
        SequenceVector {
            layout,
            values: DVector::zeros(n),
        }
    }

    pub fn layout(&self) -> &Arc<ClusterLayout> {
        &self.layout
    }

    pub fn norm(&self, s: f64) -> f64 {
        self.layout
            .mode_weights()
            .iter()
            .zip(self.values.iter())
            .map(|(w, v)| w.powf(s) * v.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn sub(&self, other: &SequenceVector) -> SequenceVector {
        SequenceVector {
            layout: self.layout.clone(),
            values: &self.values - &other.values,
        }
    }
}

impl BlockMatrix {
    pub fn zeros(layout: Arc<ClusterLayout>) -> Self {
        BlockMatrix {
            layout,
            blocks: BTreeMap::new(),
        }
    }

    pub fn identity(layout: Arc<ClusterLayout>) -> Self {
        let mut m = Self::zeros(layout.clone());
        for c in 0..layout.n_clusters() {
            let s = layout.sizes[c];
            m.blocks.insert((c, c), Block::identity(s, s));
        }
        m
    }

    /// `diag(λ_a)` with one value per cluster.
    pub fn cluster_diagonal(layout: Arc<ClusterLayout>, values: &[f64]) -> Self {
        assert_eq!(values.len(), layout.n_clusters());
        let mut m = Self::zeros(layout.clone());
        for (c, &v) in values.iter().enumerate() {
            let s = layout.sizes[c];
            m.insert(c, c, Block::identity(s, s) * C64::from(v));
        }
        m
    }

    /// The unperturbed oscillator `N₀ = diag(w_a)`.
    pub fn harmonic(layout: Arc<ClusterLayout>) -> Self {
        let w: Vec<f64> = (0..layout.n_clusters()).map(|c| layout.weight(c)).collect();
        Self::cluster_diagonal(layout, &w)
    }

    pub fn from_dense(layout: Arc<ClusterLayout>, dense: &Block) -> Self {
        assert_eq!(dense.nrows(), layout.n_modes());
        assert_eq!(dense.ncols(), layout.n_modes());
        let mut m = Self::zeros(layout.clone());
        for a in 0..layout.n_clusters() {
            for b in 0..layout.n_clusters() {
                let blk = dense
                    .view(
                        (layout.offsets[a], layout.offsets[b]),
                        (layout.sizes[a], layout.sizes[b]),
                    )
                    .into_owned();
                m.insert(a, b, blk);
            }
        }
        m
    }

    pub fn to_dense(&self) -> Block {
        let n = self.layout.n_modes();
        let mut out = Block::zeros(n, n);
        for (&(a, b), blk) in &self.blocks {
            out.view_mut(
                (self.layout.offsets[a], self.layout.offsets[b]),
                (blk.nrows(), blk.ncols()),
            )
            .copy_from(blk);
        }
        out
    }

    pub fn layout(&self) -> &Arc<ClusterLayout> {
        &self.layout
    }

    pub fn block(&self, a: usize, b: usize) -> Option<&Block> {
        self.blocks.get(&(a, b))
    }

    pub fn block_or_zero(&self, a: usize, b: usize) -> Block {
        self.block(a, b)
            .cloned()
            .unwrap_or_else(|| Block::zeros(self.layout.sizes[a], self.layout.sizes[b]))
    }

    /// Stores a block; exactly-zero blocks are elided.
    pub fn insert(&mut self, a: usize, b: usize, block: Block) {
        assert_eq!(
            (block.nrows(), block.ncols()),
            (self.layout.sizes[a], self.layout.sizes[b]),
            "block shape does not match clusters ({a}, {b})"
        );
        if block.iter().all(|z| *z == C64::from(0.0)) {
            self.blocks.remove(&(a, b));
        } else {
            self.blocks.insert((a, b), block);
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&(usize, usize), &Block)> {
        self.blocks.iter()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.is_empty()
    }

    fn check_layout(&self, other: &BlockMatrix) -> Result<(), BlockError> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(BlockError::LayoutMismatch)
        }
    }

    pub fn add(&self, other: &BlockMatrix) -> Result<BlockMatrix, BlockError> {
        self.axpy(C64::from(1.0), other)
    }

    pub fn sub(&self, other: &BlockMatrix) -> Result<BlockMatrix, BlockError> {
        self.axpy(C64::from(-1.0), other)
    }

    /// `self + alpha · other`.
    pub fn axpy(&self, alpha: C64, other: &BlockMatrix) -> Result<BlockMatrix, BlockError> {
        self.check_layout(other)?;
        let mut out = self.clone();
        for (&(a, b), blk) in &other.blocks {
            let sum = match out.blocks.get(&(a, b)) {
                Some(x) => x + blk * alpha,
                None => blk * alpha,
            };
            out.insert(a, b, sum);
        }
        Ok(out)
    }

    pub fn scale(&self, alpha: C64) -> BlockMatrix {
        let mut out = BlockMatrix::zeros(self.layout.clone());
        for (&(a, b), blk) in &self.blocks {
            out.insert(a, b, blk * alpha);
        }
        out
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> BlockMatrix {
        let mut out = BlockMatrix::zeros(self.layout.clone());
        for (&(a, b), blk) in &self.blocks {
            out.blocks.insert((b, a), blk.adjoint());
        }
        out
    }

    pub fn transpose(&self) -> BlockMatrix {
        let mut out = BlockMatrix::zeros(self.layout.clone());
        for (&(a, b), blk) in &self.blocks {
            out.blocks.insert((b, a), blk.transpose());
        }
        out
    }

    pub fn conj(&self) -> BlockMatrix {
        let mut out = BlockMatrix::zeros(self.layout.clone());
        for (&(a, b), blk) in &self.blocks {
            out.blocks.insert((a, b), blk.map(|z| z.conj()));
        }
        out
    }

    /// Keeps only the diagonal blocks `([a],[a])`.
    pub fn block_diagonal_part(&self) -> BlockMatrix {
        let mut out = BlockMatrix::zeros(self.layout.clone());
        for (&(a, b), blk) in &self.blocks {
            if a == b {
                out.blocks.insert((a, b), blk.clone());
            }
        }
        out
    }

    /// `½(A + A†)`.
    pub fn hermitian_part(&self) -> BlockMatrix {
        let adj = self.adjoint();
        self.add(&adj).expect("same layout").scale(C64::from(0.5))
    }

    pub fn block_norm(&self, a: usize, b: usize) -> f64 {
        self.block(a, b).map(spectral_norm).unwrap_or(0.0)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.blocks
            .values()
            .flat_map(|b| b.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .values()
            .all(|b| b.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        let pairs: Vec<(usize, usize)> = self.blocks.keys().copied().collect();
        pairs.into_iter().all(|(a, b)| {
            let ab = self.block_or_zero(a, b);
            let ba = self.block_or_zero(b, a);
            spectral_norm(&(ab - ba.adjoint())) <= tol
        })
    }

    pub fn is_block_diagonal(&self, tol: f64) -> bool {
        self.blocks
            .iter()
            .all(|(&(a, b), blk)| a == b || spectral_norm(blk) <= tol)
    }

    /// Hermitian block-diagonal matrices are the normal forms.
    pub fn is_normal_form(&self, tol: f64) -> bool {
        self.is_block_diagonal(tol) && self.is_hermitian(tol)
    }

    pub fn decay_norm(&self, beta: f64) -> DecayNormReport {
        let mut norm = 0.0;
        let mut norm_plus = 0.0;
        let mut argmax = None;
        for (&(a, b), blk) in &self.blocks {
            let v = self.layout.log_weight(a, beta) * self.layout.log_weight(b, beta) * spectral_norm(blk);
            if v > norm {
                norm = v;
                argmax = Some((a, b));
            }
            norm_plus = f64::max(norm_plus, v * (1.0 + self.layout.gap(a, b)));
        }
        DecayNormReport {
            beta,
            norm,
            norm_plus,
            argmax_pair: argmax,
            w_max: self.layout.w_max,
        }
    }

    pub fn decay_norm_plus(&self, beta: f64) -> f64 {
        self.decay_norm(beta).norm_plus
    }

    pub fn mul(&self, other: &BlockMatrix) -> Result<BlockMatrix, BlockError> {
        self.check_layout(other)?;
        let nc = self.layout.n_clusters();
        // rows of `self` and columns of `other` grouped by the inner cluster
        let mut by_inner: Vec<Vec<usize>> = vec![Vec::new(); nc];
        for &(c, b) in other.blocks.keys() {
            by_inner[c].push(b);
        }
        let rows: Vec<usize> = {
            let mut r: Vec<usize> = self.blocks.keys().map(|&(a, _)| a).collect();
            r.dedup();
            r
        };
        let products: Vec<((usize, usize), Block)> = rows
            .par_iter()
            .flat_map_iter(|&a| {
                let mut acc: BTreeMap<usize, Block> = BTreeMap::new();
                for (&(_, c), lhs) in self.blocks.range((a, 0)..(a + 1, 0)) {
                    for &b in &by_inner[c] {
                        let rhs = &other.blocks[&(c, b)];
                        acc.entry(b)
                            .and_modify(|m| m.gemm(C64::from(1.0), lhs, rhs, C64::from(1.0)))
                            .or_insert_with(|| lhs * rhs);
                    }
                }
                acc.into_iter().map(move |(b, m)| ((a, b), m))
            })
            .collect();
        let mut out = BlockMatrix::zeros(self.layout.clone());
        for ((a, b), m) in products {
            out.insert(a, b, m);
        }
        Ok(out)
    }

    /// `e^{scale · self}`; scaling and squaring with a Padé approximant.
    pub fn exp_scaled(&self, scale: C64) -> Result<BlockMatrix, BlockError> {
        if !self.is_finite() {
            return Err(BlockError::NonFinite);
        }
        let dense = self.to_dense() * scale;
        let e = dense.exp();
        if e.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(BlockError::NonFinite);
        }
        Ok(BlockMatrix::from_dense(self.layout.clone(), &e))
    }

    /// `e^{i t R}` for Hermitian `R`, through its eigendecomposition; the
    /// result is unitary to rounding.
    pub fn exp_i_hermitian(&self, t: f64) -> BlockMatrix {
        let e = expm_i_hermitian(&self.to_dense(), t);
        BlockMatrix::from_dense(self.layout.clone(), &e)
    }

    pub fn apply(&self, xi: &SequenceVector) -> Result<SequenceVector, BlockError> {
        if xi.values.len() != self.layout.n_modes() {
            return Err(BlockError::SizeMismatch {
                expected: self.layout.n_modes(),
                got: xi.values.len(),
            });
        }
        if *xi.layout != *self.layout {
            return Err(BlockError::LayoutMismatch);
        }
        let mut out = DVector::<C64>::zeros(self.layout.n_modes());
        for (&(a, b), blk) in &self.blocks {
            let (oa, ob) = (self.layout.offsets[a], self.layout.offsets[b]);
            let x = xi.values.rows(ob, blk.ncols());
            let mut y = out.rows_mut(oa, blk.nrows());
            y.gemv(C64::from(1.0), blk, &x, C64::from(1.0));
        }
        Ok(SequenceVector {
            layout: self.layout.clone(),
            values: out,
        })
    }

    /// Operator norm on `ℓ²_s`: `‖W^{s/2} A W^{-s/2}‖`.
    pub fn sobolev_operator_norm(&self, s: f64) -> f64 {
        weighted_operator_norm(&self.to_dense(), &self.layout.mode_weights(), s, -s)
    }

    /// Operator norm from `ℓ²_s` to `ℓ²_{-s}`: `‖W^{-s/2} A W^{-s/2}‖`.
    pub fn dual_operator_norm(&self, s: f64) -> f64 {
        weighted_operator_norm(&self.to_dense(), &self.layout.mode_weights(), -s, -s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        crate::io::block_matrix_to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BlockMatrix, BlockError> {
        crate::io::block_matrix_from_bytes(bytes)
    }

    pub(crate) fn from_parts(layout: Arc<ClusterLayout>, blocks: BTreeMap<(usize, usize), Block>) -> Self {
        BlockMatrix { layout, blocks }
    }
}

/// `‖W^{p/2} A W^{q/2}‖` for the diagonal weight matrix `W`.
pub fn weighted_operator_norm(a: &Block, weights: &[f64], p: f64, q: f64) -> f64 {
    let n = a.nrows();
    let mut m = a.clone();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= weights[i].powf(p / 2.0) * weights[j].powf(q / 2.0);
        }
    }
    spectral_norm(&m)
}

pub fn block_mul(a: &BlockMatrix, b: &BlockMatrix) -> Result<BlockMatrix, BlockError> {
    a.mul(b)
}

pub fn block_exp(r: &BlockMatrix, scale: C64) -> Result<BlockMatrix, BlockError> {
    r.exp_scaled(scale)
}

/// `[Q₁, Q₂] = Q₁Q₂ − Q₂Q₁`.
pub fn commutator(q1: &BlockMatrix, q2: &BlockMatrix) -> Result<BlockMatrix, BlockError> {
    q1.mul(q2)?.sub(&q2.mul(q1)?)
}

pub fn decay_norm(a: &BlockMatrix, beta: f64) -> DecayNormReport {
    a.decay_norm(beta)
}

pub fn decay_norm_plus(a: &BlockMatrix, beta: f64) -> f64 {
    a.decay_norm_plus(beta)
}

pub fn is_normal_form(q: &BlockMatrix, tol: f64) -> bool {
    q.is_normal_form(tol)
}

pub fn apply(a: &BlockMatrix, xi: &SequenceVector) -> Result<SequenceVector, BlockError> {
    a.apply(xi)
}

const SVD_LIMIT: usize = 512;

/// Largest singular value; dense SVD up to 512 rows/cols, power iteration above.
pub fn spectral_norm(m: &Block) -> f64 {
    match (m.nrows(), m.ncols()) {
        (0, _) | (_, 0) => 0.0,
        (1, 1) => m[(0, 0)].norm(),
        (r, c) if r.max(c) <= SVD_LIMIT => m
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .fold(0.0, f64::max),
        _ => power_iteration_norm(m, 1e-12),
    }
}

fn power_iteration_norm(m: &Block, tol: f64) -> f64 {
    let gram = m.adjoint() * m;
    let n = gram.nrows();
    let mut v = DVector::<C64>::from_fn(n, |i, _| C64::new(1.0 + (i % 7) as f64 * 0.1, 0.0));
    v /= C64::from(v.norm());
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = &gram * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw;
        v = w / C64::from(nw);
        if (next - lambda).abs() <= tol * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

/// Eigen-decomposition of a Hermitian matrix: eigenvalues ascending, columns of `U`.
pub fn hermitian_eigen(h: &Block) -> (Vec<f64>, Block) {
    let n = h.nrows();
    if n == 0 {
        return (Vec::new(), Block::zeros(0, 0));
    }
    let herm = (h + h.adjoint()) * C64::from(0.5);
    let se = herm.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap());
    let values = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut u = Block::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        u.set_column(k, &se.eigenvectors.column(i));
    }
    (values, u)
}

/// `e^{i t H}` for Hermitian `H`.
pub fn expm_i_hermitian(h: &Block, t: f64) -> Block {
    let (vals, u) = hermitian_eigen(h);
    let mut scaled = u.clone();
    for (j, &v) in vals.iter().enumerate() {
        let phase = C64::from_polar(1.0, t * v);
        scaled.column_mut(j).iter_mut().for_each(|z| *z *= phase);
    }
    scaled * u.adjoint()
}

/// Partial sum `Σ_{l=1}^{l_max} 1 / ((1 + ln l)^δ (1 + |l − j|))`.
pub fn auxiliary_series(delta: f64, j: u64, l_max: u64) -> Result<f64, BlockError> {
    if delta <= 1.0 {
        return Err(BlockError::DeltaNotSummable { delta });
    }
    let jf = j as f64;
    Ok((1..=l_max)
        .map(|l| {
            let lf = l as f64;
            1.0 / ((1.0 + lf.ln()).powf(delta) * (1.0 + (lf - jf).abs()))
        })
        .sum())
}

/// Constants of the structural inequalities for a given layout and β,
/// evaluated from the cluster sums that bound each product.
///
/// * `product`: `|AB|_β ≤ C |A|_β |B|_β+`
/// * `product_plus`: `|AB|_β+ ≤ C |A|_β+ |B|_β+`
/// * `dual`: `‖A‖_{ℓ²_s → ℓ²_{-s}} ≤ C |A|_β` for `s ≥ 1`
/// * `sobolev`: `‖A‖_{ℓ²_s} ≤ C |A|_β+` for `s ∈ [−1, 1]`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureConstants {
    pub beta: f64,
    pub w_max: u32,
    pub product: f64,
    pub product_plus: f64,
    pub dual: f64,
    pub sobolev: f64,
}

impl StructureConstants {
    pub fn max(&self) -> f64 {
        self.product.max(self.product_plus).max(self.dual).max(self.sobolev)
    }
}

pub fn structure_constants(layout: &ClusterLayout, beta: f64) -> StructureConstants {
    let nc = layout.n_clusters();
    let lw = |c: usize| (1.0 + layout.weight(c).ln()).powf(2.0 * beta);
    // sup_b Σ_c 1 / ((1+ln w_c)^{2β} (1+|w_c − w_b|))
    let aux = (0..nc)
        .map(|b| (0..nc).map(|c| 1.0 / (lw(c) * (1.0 + layout.gap(b, c)))).sum::<f64>())
        .fold(0.0, f64::max);
    let dual: f64 = (0..nc).map(|c| 1.0 / (lw(c) * layout.weight(c))).sum();
    // Schur test with weights (1+ln w)^{−β}; row and column sums are convex in
    // s, so the endpoints s = ±1 bound every s ∈ [−1, 1].
    let (mut row, mut col) = (0.0f64, 0.0f64);
    for s in [-1.0, 1.0] {
        let kernel = |a: usize, b: usize| (layout.weight(a) / layout.weight(b)).powf(s / 2.0) / (1.0 + layout.gap(a, b));
        for a in 0..nc {
            row = row.max((0..nc).map(|b| kernel(a, b) / lw(b)).sum::<f64>());
            col = col.max((0..nc).map(|b| kernel(b, a) / lw(b)).sum::<f64>());
        }
    }
    let sobolev = (row * col).sqrt();
    StructureConstants {
        beta,
        w_max: layout.w_max,
        product: aux,
        product_plus: 2.0 * aux,
        dual,
        sobolev,
    }
}

#[derive(Serialize, Deserialize)]
struct BlockMatrixRepr {
    layout: ClusterLayout,
    blocks: Vec<BlockRepr>,
}

#[derive(Serialize, Deserialize)]
struct BlockRepr {
    a: usize,
    b: usize,
    rows: usize,
    cols: usize,
    /// column-major real parts
    re: Vec<f64>,
    im: Vec<f64>,
}

impl From<BlockMatrix> for BlockMatrixRepr {
    fn from(m: BlockMatrix) -> Self {
        BlockMatrixRepr {
            layout: (*m.layout).clone(),
            blocks: m
                .blocks
                .iter()
                .map(|(&(a, b), blk)| BlockRepr {
                    a,
                    b,
                    rows: blk.nrows(),
                    cols: blk.ncols(),
                    re: blk.iter().map(|z| z.re).collect(),
                    im: blk.iter().map(|z| z.im).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<BlockMatrixRepr> for BlockMatrix {
    type Error = BlockError;

    fn try_from(r: BlockMatrixRepr) -> Result<Self, Self::Error> {
        let layout = Arc::new(r.layout);
        let mut blocks = BTreeMap::new();
        for b in r.blocks {
            if b.a >= layout.n_clusters() || b.b >= layout.n_clusters() {
                return Err(BlockError::Malformed(format!("cluster pair ({}, {}) out of range", b.a, b.b)));
            }
            if b.rows != layout.sizes[b.a] || b.cols != layout.sizes[b.b] {
                return Err(BlockError::Malformed(format!("block ({}, {}) has wrong shape", b.a, b.b)));
            }
            if b.re.len() != b.rows * b.cols || b.im.len() != b.rows * b.cols {
                return Err(BlockError::Malformed(format!("block ({}, {}) has wrong length", b.a, b.b)));
            }
            let data: Vec<C64> = b.re.iter().zip(&b.im).map(|(&re, &im)| C64::new(re, im)).collect();
            blocks.insert((b.a, b.b), Block::from_vec(b.rows, b.cols, data));
        }
        Ok(BlockMatrix { layout, blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::enumerate_modes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(d: usize, w: u32) -> Arc<ClusterLayout> {
        Arc::new(enumerate_modes(d, w).unwrap().layout())
    }

    fn random_block(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Block {
        Block::from_fn(r, c, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn random_matrix(rng: &mut ChaCha8Rng, l: &Arc<ClusterLayout>) -> BlockMatrix {
        let mut m = BlockMatrix::zeros(l.clone());
        for a in 0..l.n_clusters() {
            for b in 0..l.n_clusters() {
                m.insert(a, b, random_block(rng, l.sizes[a], l.sizes[b]));
            }
        }
        m
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        let l = layout(2, 8);
        let r = BlockMatrix::zeros(l).decay_norm(1.0);
        assert_eq!(r.norm, 0.0);
        assert_eq!(r.argmax_pair, None);
    }

    #[test]
    fn single_identity_block_norm() {
        let l = layout(2, 8);
        let mut m = BlockMatrix::zeros(l.clone());
        m.insert(2, 2, Block::identity(3, 3));
        let beta = 1.3;
        let expected = (1.0 + 6f64.ln()).powf(2.0 * beta);
        let r = m.decay_norm(beta);
        assert!((r.norm - expected).abs() < 1e-12);
        assert_eq!(r.argmax_pair, Some((2, 2)));
        // diagonal pair: plus-weight is one
        assert!((r.norm_plus - r.norm).abs() < 1e-12);
    }

    #[test]
    fn off_diagonal_block_picks_up_gap_weight() {
        let l = layout(1, 9);
        let mut m = BlockMatrix::zeros(l.clone());
        m.insert(0, 1, Block::from_element(1, 1, C64::new(0.5, 0.0)));
        let r = m.decay_norm(1.0);
        assert!((r.norm_plus - 3.0 * r.norm).abs() < 1e-14);
    }

    #[test]
    fn decay_norm_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = layout(2, 6);
        let m = random_matrix(&mut rng, &l);
        let dense = m.to_dense();
        let beta = 0.9;
        let mut best: f64 = 0.0;
        let mut best_plus: f64 = 0.0;
        for a in 0..l.n_clusters() {
            for b in 0..l.n_clusters() {
                let sub = dense
                    .view((l.offsets[a], l.offsets[b]), (l.sizes[a], l.sizes[b]))
                    .into_owned();
                // spectral norm through the largest eigenvalue of the Gram matrix
                let g = sub.adjoint() * &sub;
                let (ev, _) = hermitian_eigen(&g);
                let sn = ev.last().unwrap().max(0.0).sqrt();
                let v = l.log_weight(a, beta) * l.log_weight(b, beta) * sn;
                best = best.max(v);
                best_plus = best_plus.max(v * (1.0 + l.gap(a, b)));
            }
        }
        let r = m.decay_norm(beta);
        assert!((r.norm - best).abs() < 1e-10 * best);
        assert!((r.norm_plus - best_plus).abs() < 1e-10 * best_plus);
        assert!(r.norm <= r.norm_plus);
    }

    #[test]
    fn identity_is_neutral_and_disjoint_blocks_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = layout(2, 8);
        let a = random_matrix(&mut rng, &l);
        let id = BlockMatrix::identity(l.clone());
        let prod = a.mul(&id).unwrap();
        assert!((prod.to_dense() - a.to_dense()).norm() < 1e-13);

        let mut x = BlockMatrix::zeros(l.clone());
        x.insert(0, 1, random_block(&mut rng, 1, 2));
        let mut y = BlockMatrix::zeros(l.clone());
        y.insert(2, 3, random_block(&mut rng, 3, 4));
        assert!(x.mul(&y).unwrap().is_zero());
    }

    #[test]
    fn product_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = layout(2, 10);
        let a = random_matrix(&mut rng, &l);
        let b = random_matrix(&mut rng, &l);
        let ab = a.mul(&b).unwrap().to_dense();
        assert!((ab - a.to_dense() * b.to_dense()).norm() < 1e-11);
    }

    #[test]
    fn adjoint_of_product_reverses_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let l = layout(2, 8);
        let a = random_matrix(&mut rng, &l);
        let b = random_matrix(&mut rng, &l);
        let lhs = a.mul(&b).unwrap().adjoint();
        let rhs = b.adjoint().mul(&a.adjoint()).unwrap();
        assert!((lhs.to_dense() - rhs.to_dense()).norm() < 1e-12);
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let a = BlockMatrix::identity(layout(1, 5));
        let b = BlockMatrix::identity(layout(1, 7));
        assert_eq!(a.mul(&b).unwrap_err(), BlockError::LayoutMismatch);
        assert_eq!(commutator(&a, &b).unwrap_err(), BlockError::LayoutMismatch);
    }

    #[test]
    fn commutator_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let l = layout(2, 8);
        let a = random_matrix(&mut rng, &l);
        let b = random_matrix(&mut rng, &l);
        assert!(commutator(&a, &a).unwrap().max_abs() < 1e-12);
        let ab = commutator(&a, &b).unwrap();
        let ba = commutator(&b, &a).unwrap();
        assert!(ab.add(&ba).unwrap().max_abs() < 1e-12);

        // [N, S] with N block diagonal, blockwise
        let n = random_matrix(&mut rng, &l).block_diagonal_part();
        let s = random_matrix(&mut rng, &l);
        let c = commutator(&n, &s).unwrap();
        for x in 0..l.n_clusters() {
            for y in 0..l.n_clusters() {
                let expected = n.block_or_zero(x, x) * s.block_or_zero(x, y) - s.block_or_zero(x, y) * n.block_or_zero(y, y);
                assert!((c.block_or_zero(x, y) - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn exponential_of_zero_is_identity_and_hermitian_exponential_is_unitary() {
        let l = layout(2, 8);
        let z = BlockMatrix::zeros(l.clone());
        let e = z.exp_scaled(I).unwrap();
        assert!((e.to_dense() - Block::identity(l.n_modes(), l.n_modes())).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let h = random_matrix(&mut rng, &l).hermitian_part();
        for u in [h.exp_scaled(I).unwrap(), h.exp_i_hermitian(1.0)] {
            let ud = u.to_dense();
            let dev = (&ud * ud.adjoint() - Block::identity(l.n_modes(), l.n_modes())).norm();
            assert!(dev < 1e-11, "unitarity defect {dev}");
        }
        let diff = h.exp_scaled(I).unwrap().to_dense() - h.exp_i_hermitian(1.0).to_dense();
        assert!(diff.norm() < 1e-11);
    }

    #[test]
    fn exponential_rejects_non_finite_entries() {
        let l = layout(1, 5);
        let mut m = BlockMatrix::zeros(l);
        m.insert(0, 0, Block::from_element(1, 1, C64::new(f64::NAN, 0.0)));
        assert_eq!(m.exp_scaled(C64::from(1.0)).unwrap_err(), BlockError::NonFinite);
    }

    #[test]
    fn normal_form_predicate() {
        let l = layout(2, 8);
        let n0 = BlockMatrix::harmonic(l.clone());
        assert!(n0.is_normal_form(1e-13));
        let tol = 1e-6;
        let mut m = n0.clone();
        m.insert(0, 1, Block::from_element(1, 2, C64::new(2.0 * tol / 2f64.sqrt(), 0.0)));
        m.insert(1, 0, Block::from_element(2, 1, C64::new(2.0 * tol / 2f64.sqrt(), 0.0)));
        assert!(!m.is_normal_form(tol));
    }

    #[test]
    fn apply_identity_and_size_check() {
        let l = layout(2, 6);
        let xi = SequenceVector::new(
            l.clone(),
            DVector::from_fn(l.n_modes(), |i, _| C64::new(i as f64, 1.0)),
        )
        .unwrap();
        let id = BlockMatrix::identity(l.clone());
        assert_eq!(id.apply(&xi).unwrap(), xi);
        assert!(SequenceVector::new(l, DVector::zeros(2)).is_err());
    }

    #[test]
    fn block_diagonal_operator_bound_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let l = layout(2, 10);
        let q = random_matrix(&mut rng, &l).block_diagonal_part();
        let max_block = (0..l.n_clusters()).map(|c| q.block_norm(c, c)).fold(0.0, f64::max);
        for s in [-1.0, 0.0, 1.0, 2.5] {
            for _ in 0..20 {
                let xi = SequenceVector::new(
                    l.clone(),
                    DVector::from_fn(l.n_modes(), |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
                )
                .unwrap();
                let lhs = q.apply(&xi).unwrap().norm(s);
                assert!(lhs <= max_block * xi.norm(s) * (1.0 + 1e-12));
            }
            assert!((q.sobolev_operator_norm(s) - max_block).abs() < 1e-10 * max_block);
        }
    }

    #[test]
    fn auxiliary_series_basics() {
        assert_eq!(auxiliary_series(2.0, 1, 1).unwrap(), 1.0);
        let mut prev = 0.0;
        for l in [1, 2, 5, 50, 500] {
            let v = auxiliary_series(2.0, 7, l).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(matches!(auxiliary_series(1.0, 3, 10), Err(BlockError::DeltaNotSummable { .. })));
    }

    #[test]
    fn power_iteration_agrees_with_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let m = random_block(&mut rng, 40, 30);
        let svd = m.clone().svd(false, false).singular_values.max();
        assert!((power_iteration_norm(&m, 1e-14) - svd).abs() < 1e-8 * svd);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let l = layout(2, 6);
        let m = random_matrix(&mut rng, &l);
        let s = serde_json::to_string(&m).unwrap();
        let back: BlockMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back.to_dense(), m.to_dense());
    }
}
