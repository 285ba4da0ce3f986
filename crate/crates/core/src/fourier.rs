//! Matrices depending quasi-periodically on an angle `φ ∈ 𝕋ⁿ`, stored by
//! their Fourier coefficients `Q̂(k)`, `k ∈ ℤⁿ`.
//!
//! `Q(φ) = Σ_k Q̂(k) e^{ik·φ}`. Reality in the sense that `Q(φ)` is Hermitian
//! for real `φ` is the coefficient symmetry `Q̂(−k) = Q̂(k)†`.

use crate::basis::ClusterLayout;
use crate::blockmat::{spectral_norm, Block, BlockError, BlockMatrix, C64};
use crate::lattice::{l1_ball, l1_norm, negate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FourierError {
    #[error("|Im φ| = {im} outside the analyticity strip of width {sigma}")]
    StripViolation { im: f64, sigma: f64 },
    #[error("angle has {got} components, torus has dimension {expected}")]
    AngleDimension { expected: usize, got: usize },
    #[error(transparent)]
    Block(#[from] BlockError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "QpRepr", try_from = "QpRepr")]
pub struct QuasiPeriodicMatrix {
    layout: Arc<ClusterLayout>,
    torus_dim: usize,
    sigma: f64,
    coeffs: BTreeMap<Vec<i32>, BlockMatrix>,
}

impl QuasiPeriodicMatrix {
    pub fn zeros(layout: Arc<ClusterLayout>, torus_dim: usize, sigma: f64) -> Self {
        QuasiPeriodicMatrix {
            layout,
            torus_dim,
            sigma,
            coeffs: BTreeMap::new(),
        }
    }

    /// A `φ`-independent matrix.
    pub fn constant(m: BlockMatrix, torus_dim: usize, sigma: f64) -> Self {
        let mut q = Self::zeros(m.layout().clone(), torus_dim, sigma);
        q.set(vec![0; torus_dim], m);
        q
    }

    pub fn layout(&self) -> &Arc<ClusterLayout> {
        &self.layout
    }

    pub fn torus_dim(&self) -> usize {
        self.torus_dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn coefficient(&self, k: &[i32]) -> Option<&BlockMatrix> {
        self.coeffs.get(k)
    }

    pub fn coefficient_or_zero(&self, k: &[i32]) -> BlockMatrix {
        self.coeffs
            .get(k)
            .cloned()
            .unwrap_or_else(|| BlockMatrix::zeros(self.layout.clone()))
    }

    /// Stores `Q̂(k)`; zero coefficients are elided.
    pub fn set(&mut self, k: Vec<i32>, m: BlockMatrix) {
        assert_eq!(k.len(), self.torus_dim, "wavevector dimension");
        if m.is_zero() {
            self.coeffs.remove(&k);
        } else {
            self.coeffs.insert(k, m);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<i32>, &BlockMatrix)> {
        self.coeffs.iter()
    }

    pub fn n_coefficients(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Largest `|k|` among stored coefficients.
    pub fn max_order(&self) -> u32 {
        self.coeffs.keys().map(|k| l1_norm(k)).max().unwrap_or(0)
    }

    /// `Q(φ)` as a dense matrix for real `φ`.
    pub fn eval_dense(&self, phi: &[f64]) -> Result<Block, FourierError> {
        self.check_angle(phi.len())?;
        let n = self.layout.n_modes();
        let mut out = Block::zeros(n, n);
        for (k, m) in &self.coeffs {
            let phase = C64::from_polar(1.0, crate::lattice::dot(k, phi));
            accumulate(&mut out, m, phase);
        }
        Ok(out)
    }

    pub fn eval(&self, phi: &[f64]) -> Result<BlockMatrix, FourierError> {
        Ok(BlockMatrix::from_dense(self.layout.clone(), &self.eval_dense(phi)?))
    }

    /// `Q(φ)` at complex `φ` with `|Im φ_j| < σ`.
    pub fn eval_complex(&self, phi: &[C64]) -> Result<Block, FourierError> {
        self.check_angle(phi.len())?;
        if let Some(im) = phi.iter().map(|z| z.im.abs()).find(|&im| im >= self.sigma) {
            return Err(FourierError::StripViolation { im, sigma: self.sigma });
        }
        let n = self.layout.n_modes();
        let mut out = Block::zeros(n, n);
        for (k, m) in &self.coeffs {
            let arg: C64 = k.iter().zip(phi).map(|(&kj, &p)| p * kj as f64).sum();
            accumulate(&mut out, m, (arg * C64::new(0.0, 1.0)).exp());
        }
        Ok(out)
    }

    fn check_angle(&self, len: usize) -> Result<(), FourierError> {
        if len != self.torus_dim {
            return Err(FourierError::AngleDimension {
                expected: self.torus_dim,
                got: len,
            });
        }
        Ok(())
    }

    /// Coefficient-sum strip norm
    /// `max_{a,b} (1+ln w_a)^β (1+ln w_b)^β Σ_k ‖Q̂(k)_[a]^[b]‖ e^{|k|σ}`,
    /// an upper bound for the supremum over the strip `|Im φ| < σ`.
    pub fn strip_norm(&self, beta: f64, sigma: f64) -> f64 {
        self.strip_norm_impl(beta, sigma, false)
    }

    /// As [`strip_norm`](Self::strip_norm) with the extra weight `1+|w_a−w_b|`.
    pub fn strip_norm_plus(&self, beta: f64, sigma: f64) -> f64 {
        self.strip_norm_impl(beta, sigma, true)
    }

    fn strip_norm_impl(&self, beta: f64, sigma: f64, plus: bool) -> f64 {
        let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (k, m) in &self.coeffs {
            let damp = (l1_norm(k) as f64 * sigma).exp();
            for (&(a, b), blk) in m.blocks() {
                *sums.entry((a, b)).or_insert(0.0) += spectral_norm(blk) * damp;
            }
        }
        sums.into_iter()
            .map(|((a, b), s)| {
                let mut v = self.layout.log_weight(a, beta) * self.layout.log_weight(b, beta) * s;
                if plus {
                    v *= 1.0 + self.layout.gap(a, b);
                }
                v
            })
            .fold(0.0, f64::max)
    }

    /// `(Q_{|k|≤K}, Q_{|k|>K})`.
    pub fn split(&self, k_max: u32) -> (QuasiPeriodicMatrix, QuasiPeriodicMatrix) {
        let mut low = Self::zeros(self.layout.clone(), self.torus_dim, self.sigma);
        let mut high = low.clone();
        for (k, m) in &self.coeffs {
            if l1_norm(k) <= k_max {
                low.coeffs.insert(k.clone(), m.clone());
            } else {
                high.coeffs.insert(k.clone(), m.clone());
            }
        }
        (low, high)
    }

    /// `max_k |Q̂(−k) − Q̂(k)†|_0`, the defect of the reality symmetry.
    pub fn hermitian_defect(&self) -> f64 {
        let keys: Vec<&Vec<i32>> = self.coeffs.keys().collect();
        keys.into_iter()
            .map(|k| {
                let minus = self.coefficient_or_zero(&negate(k));
                let adj = self.coeffs[k].adjoint();
                minus.sub(&adj).map(|d| d.decay_norm(0.0).norm).unwrap_or(f64::INFINITY)
            })
            .fold(0.0, f64::max)
    }

    /// Projects onto the reality symmetry by averaging `Q̂(k)` with `Q̂(−k)†`.
    pub fn symmetrized(&self) -> QuasiPeriodicMatrix {
        let mut out = Self::zeros(self.layout.clone(), self.torus_dim, self.sigma);
        let mut keys: Vec<Vec<i32>> = self.coeffs.keys().cloned().collect();
        keys.extend(self.coeffs.keys().map(|k| negate(k)));
        keys.sort();
        keys.dedup();
        for k in keys {
            let a = self.coefficient_or_zero(&k);
            let b = self.coefficient_or_zero(&negate(&k)).adjoint();
            out.set(k, a.add(&b).expect("same layout").scale(C64::from(0.5)));
        }
        out
    }

    pub fn add(&self, other: &QuasiPeriodicMatrix) -> Result<QuasiPeriodicMatrix, FourierError> {
        self.axpy(C64::from(1.0), other)
    }

    pub fn sub(&self, other: &QuasiPeriodicMatrix) -> Result<QuasiPeriodicMatrix, FourierError> {
        self.axpy(C64::from(-1.0), other)
    }

    pub fn axpy(&self, alpha: C64, other: &QuasiPeriodicMatrix) -> Result<QuasiPeriodicMatrix, FourierError> {
        self.check_angle(other.torus_dim)?;
        let mut out = self.clone();
        for (k, m) in &other.coeffs {
            let sum = out.coefficient_or_zero(k).axpy(alpha, m)?;
            out.set(k.clone(), sum);
        }
        Ok(out)
    }

    pub fn scale(&self, alpha: C64) -> QuasiPeriodicMatrix {
        let mut out = Self::zeros(self.layout.clone(), self.torus_dim, self.sigma);
        for (k, m) in &self.coeffs {
            out.set(k.clone(), m.scale(alpha));
        }
        out
    }

    /// `Q(φ)ᵀ`, coefficientwise.
    pub fn transpose(&self) -> QuasiPeriodicMatrix {
        let mut out = Self::zeros(self.layout.clone(), self.torus_dim, self.sigma);
        for (k, m) in &self.coeffs {
            out.set(k.clone(), m.transpose());
        }
        out
    }

    /// `conj(Q(φ))` for real `φ`: `Q̂(k) ↦ conj(Q̂(−k))`.
    pub fn conj(&self) -> QuasiPeriodicMatrix {
        let mut out = Self::zeros(self.layout.clone(), self.torus_dim, self.sigma);
        for (k, m) in &self.coeffs {
            out.set(negate(k), m.conj());
        }
        out
    }

    /// Dense samples of `Q(φ)` on the uniform grid with `points` nodes per axis,
    /// ordered lexicographically with the last axis fastest.
    pub fn sample_grid(&self, points: usize) -> Vec<Block> {
        grid_angles(self.torus_dim, points)
            .par_iter()
            .map(|phi| self.eval_dense(phi).expect("angle dimension"))
            .collect()
    }

    /// Discrete Fourier coefficients `|k| ≤ k_max` of grid samples.
    pub fn from_grid(
        layout: Arc<ClusterLayout>,
        torus_dim: usize,
        sigma: f64,
        points: usize,
        samples: &[Block],
        k_max: u32,
    ) -> QuasiPeriodicMatrix {
        let angles = grid_angles(torus_dim, points);
        assert_eq!(angles.len(), samples.len());
        let norm = 1.0 / samples.len() as f64;
        let ks = l1_ball(torus_dim, k_max);
        let coeffs: Vec<(Vec<i32>, Block)> = ks
            .into_par_iter()
            .map(|k| {
                let n = layout.n_modes();
                let mut acc = Block::zeros(n, n);
                for (phi, s) in angles.iter().zip(samples) {
                    let phase = C64::from_polar(norm, -crate::lattice::dot(&k, phi));
                    acc.zip_apply(s, |a, b| *a += b * phase);
                }
                (k, acc)
            })
            .collect();
        let mut out = Self::zeros(layout.clone(), torus_dim, sigma);
        for (k, dense) in coeffs {
            out.set(k, BlockMatrix::from_dense(layout.clone(), &dense));
        }
        out
    }

    /// Drops blocks whose entries are all below `tol` in modulus.
    pub fn pruned(&self, tol: f64) -> QuasiPeriodicMatrix {
        let mut out = Self::zeros(self.layout.clone(), self.torus_dim, self.sigma);
        for (k, m) in &self.coeffs {
            let mut p = BlockMatrix::zeros(self.layout.clone());
            for (&(a, b), blk) in m.blocks() {
                if blk.iter().any(|z| z.norm() > tol) {
                    p.insert(a, b, blk.clone());
                }
            }
            out.set(k.clone(), p);
        }
        out
    }
}

fn accumulate(out: &mut Block, m: &BlockMatrix, phase: C64) {
    let layout = m.layout();
    for (&(a, b), blk) in m.blocks() {
        let mut view = out.view_mut((layout.offsets[a], layout.offsets[b]), (blk.nrows(), blk.ncols()));
        view.zip_apply(blk, |o, v| *o += v * phase);
    }
}

/// Uniform grid `φ_j = 2πj/points` on `𝕋ⁿ`, last axis fastest.
pub fn grid_angles(torus_dim: usize, points: usize) -> Vec<Vec<f64>> {
    let total = points.pow(torus_dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut phi = vec![0.0; torus_dim];
            for j in (0..torus_dim).rev() {
                phi[j] = 2.0 * PI * (idx % points) as f64 / points as f64;
                idx /= points;
            }
            phi
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct QpRepr {
    torus_dim: usize,
    sigma: f64,
    layout: ClusterLayout,
    coefficients: Vec<(Vec<i32>, BlockMatrix)>,
}

impl From<QuasiPeriodicMatrix> for QpRepr {
    fn from(q: QuasiPeriodicMatrix) -> Self {
        QpRepr {
            torus_dim: q.torus_dim,
            sigma: q.sigma,
            layout: (*q.layout).clone(),
            coefficients: q.coeffs.into_iter().collect(),
        }
    }
}

impl TryFrom<QpRepr> for QuasiPeriodicMatrix {
    type Error = BlockError;

    fn try_from(r: QpRepr) -> Result<Self, Self::Error> {
        let layout = Arc::new(r.layout);
        let mut coeffs = BTreeMap::new();
        for (k, m) in r.coefficients {
            if k.len() != r.torus_dim {
                return Err(BlockError::Malformed(format!("wavevector {k:?} has wrong dimension")));
            }
            if **m.layout() != *layout {
                return Err(BlockError::LayoutMismatch);
            }
            // share one layout allocation across coefficients
            let mut shared = BlockMatrix::zeros(layout.clone());
            for (&(a, b), blk) in m.blocks() {
                shared.insert(a, b, blk.clone());
            }
            coeffs.insert(k, shared);
        }
        Ok(QuasiPeriodicMatrix {
            layout,
            torus_dim: r.torus_dim,
            sigma: r.sigma,
            coeffs,
        })
    }
}
