//! Truncated Hermite basis of the d-dimensional harmonic oscillator.
//!
//! The spectrum of `-Δ + |x|²` on ℝ^d is `{d, d+2, d+4, …}`. A level `w`
//! is spanned by tensor products `φ_{i₁} ⊗ … ⊗ φ_{i_d}` whose one-dimensional
//! eigenvalues `2n+1` are odd and sum to `w`. Modes sharing a level form a
//! [`Cluster`]; every block matrix in this crate is indexed by cluster pairs.

use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, PI};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("empty basis: cutoff {w_max} is below the ground level {d}")]
    EmptyBasis { d: usize, w_max: u32 },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("point has dimension {got}, mode has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A Hermite mode `(j, l)`: eigenvalue `j` and degeneracy label `l` in `1..=d_j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeIndex {
    pub j: u32,
    pub l: u32,
    /// One-dimensional eigenvalues (odd, positive), one per axis, summing to `j`.
    pub multi_index: Vec<u32>,
}

impl ModeIndex {
    pub fn dimension(&self) -> usize {
        self.multi_index.len()
    }

    /// Hermite orders `n_k = (i_k - 1) / 2` of the one-dimensional factors.
    pub fn hermite_orders(&self) -> impl Iterator<Item = usize> + '_ {
        self.multi_index.iter().map(|&i| ((i - 1) / 2) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub w: u32,
    pub modes: Vec<ModeIndex>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.modes.len()
    }
}

/// Cluster sizes and weights only: the part of a basis that block matrices need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLayout {
    pub d: usize,
    pub w_max: u32,
    /// Eigenvalue `w` of each cluster, increasing.
    pub weights: Vec<u32>,
    pub sizes: Vec<usize>,
    /// Offset of each cluster in the flat mode ordering; `offsets[len]` is the mode count.
    pub offsets: Vec<usize>,
}

impl ClusterLayout {
    pub fn from_sizes(d: usize, weights: Vec<u32>, sizes: Vec<usize>) -> Self {
        assert_eq!(weights.len(), sizes.len());
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        let w_max = weights.last().copied().unwrap_or(0);
        ClusterLayout {
            d,
            w_max,
            weights,
            sizes,
            offsets,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.weights.len()
    }

    pub fn n_modes(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn weight(&self, cluster: usize) -> f64 {
        self.weights[cluster] as f64
    }

    /// `w` of every mode in flat order.
    pub fn mode_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_modes());
        for (c, &s) in self.sizes.iter().enumerate() {
            out.extend(std::iter::repeat(self.weights[c] as f64).take(s));
        }
        out
    }

    /// Logarithmic decay weight `(1 + ln w)^β` of a cluster.
    pub fn log_weight(&self, cluster: usize, beta: f64) -> f64 {
        (1.0 + self.weight(cluster).ln()).powf(beta)
    }

    pub fn gap(&self, a: usize, b: usize) -> f64 {
        (self.weight(a) - self.weight(b)).abs()
    }

    pub fn cluster_of_mode(&self, mode: usize) -> usize {
        match self.offsets.binary_search(&mode) {
            Ok(c) => c,
            Err(c) => c - 1,
        }
    }
}

/// The retained clusters `w ∈ {d, d+2, …, w_max}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisTruncation {
    pub d: usize,
    pub w_max: u32,
    pub clusters: Vec<Cluster>,
}

impl BasisTruncation {
    pub fn n_modes(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn modes(&self) -> impl Iterator<Item = &ModeIndex> {
        self.clusters.iter().flat_map(|c| c.modes.iter())
    }

    pub fn layout(&self) -> ClusterLayout {
        ClusterLayout::from_sizes(
            self.d,
            self.clusters.iter().map(|c| c.w).collect(),
            self.clusters.iter().map(Cluster::size).collect(),
        )
    }

    /// Largest one-dimensional Hermite order used by any retained mode.
    pub fn max_hermite_order(&self) -> usize {
        self.modes()
            .flat_map(|m| m.hermite_orders())
            .max()
            .unwrap_or(0)
    }
}

/// Enumerates all clusters with `w ≤ w_max`.
///
/// A cutoff of the wrong parity is rounded down to the nearest level.
pub fn enumerate_modes(d: usize, w_max: u32) -> Result<BasisTruncation, BasisError> {
    if d == 0 {
        return Err(BasisError::ZeroDimension);
    }
    if (w_max as usize) < d {
        return Err(BasisError::EmptyBasis { d, w_max });
    }
    let mut cutoff = w_max;
    if (cutoff as usize - d) % 2 == 1 {
        cutoff -= 1;
        log::info!("cutoff {w_max} has the wrong parity for d = {d}; using {cutoff}");
    }
    let mut clusters = Vec::new();
    let mut w = d as u32;
    while w <= cutoff {
        let mut tuples = Vec::new();
        let mut current = Vec::with_capacity(d);
        odd_compositions(w, d, &mut current, &mut tuples);
        tuples.sort();
        let modes = tuples
            .into_iter()
            .enumerate()
            .map(|(l, multi_index)| ModeIndex {
                j: w,
                l: l as u32 + 1,
                multi_index,
            })
            .collect();
        clusters.push(Cluster { w, modes });
        w += 2;
    }
    Ok(BasisTruncation {
        d,
        w_max: cutoff,
        clusters,
    })
}

fn odd_compositions(remaining: u32, parts: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if parts == 1 {
        if remaining % 2 == 1 {
            current.push(remaining);
            out.push(current.clone());
            current.pop();
        }
        return;
    }
    // each later part needs at least 1
    let max_first = remaining.saturating_sub(parts as u32 - 1);
    let mut first = 1;
    while first <= max_first {
        current.push(first);
        odd_compositions(remaining - first, parts - 1, current, out);
        current.pop();
        first += 2;
    }
}

const RESCALE_BITS: i32 = 512;

/// Values of the L²-normalised Hermite functions `φ_0(x), …, φ_{n_max}(x)`.
///
/// The three-term recurrence runs on a mantissa with a separate base-2
/// exponent, so neither the Gaussian factor nor the polynomial growth
/// overflows or underflows before the final rescaling.
pub fn hermite_table(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    // φ_0 = π^{-1/4} e^{-x²/2} = π^{-1/4} 2^{-x²/(2 ln 2)}
    let log2_gauss = -x * x / (2.0 * LN_2);
    let mut exp2 = log2_gauss.floor() as i64;
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25) * (log2_gauss - exp2 as f64).exp2();
    out[0] = ldexp(cur, exp2);
    for n in 0..n_max {
        let nf = n as f64;
        let next = (2.0 / (nf + 1.0)).sqrt() * x * cur - (nf / (nf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
        if cur.abs() > (RESCALE_BITS as f64).exp2() {
            let s = (-(RESCALE_BITS as f64)).exp2();
            cur *= s;
            prev *= s;
            exp2 += RESCALE_BITS as i64;
        }
        out[n + 1] = ldexp(cur, exp2);
    }
    out
}

/// The L²-normalised Hermite function of order `n` at `x`.
pub fn hermite_eval(n: usize, x: f64) -> f64 {
    *hermite_table(n, x).last().unwrap()
}

/// `m · 2^e` without spurious overflow in the scale factor.
fn ldexp(m: f64, e: i64) -> f64 {
    if m == 0.0 || e < -2200 {
        return 0.0;
    }
    let mut v = m;
    let mut e = e;
    while e < -1000 {
        v *= (-1000f64).exp2();
        e += 1000;
    }
    while e > 1000 {
        v *= 1000f64.exp2();
        e -= 1000;
    }
    v * (e as f64).exp2()
}

/// The tensor-product eigenfunction `Φ_{j,l}(x)`.
pub fn phi_eval(mode: &ModeIndex, x: &[f64]) -> Result<f64, BasisError> {
    if x.len() != mode.dimension() {
        return Err(BasisError::DimensionMismatch {
            expected: mode.dimension(),
            got: x.len(),
        });
    }
    Ok(mode
        .hermite_orders()
        .zip(x)
        .map(|(n, &xi)| hermite_eval(n, xi))
        .product())
}
