//! Non-resonance screening of frequency vectors.
//!
//! First Melnikov: `|k·ω − λ_a + λ_b| ≥ γ (1 + |w_a − w_b|)` for `0 < |k| ≤ K`.
//! Second Melnikov: `|k·ω − μ_j + μ_l| ≥ κ (1 + |w_a − w_b|)` for the perturbed
//! block eigenvalues `μ_j ∈ [a]`, `μ_l ∈ [b]`.

use crate::basis::ClusterLayout;
use crate::lattice::{dot, l1_ball, l1_norm};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MelnikovError {
    #[error("gap parameter must be positive, got {0}")]
    NonPositiveGap(f64),
    #[error("{got} frequencies given for a torus of dimension {expected}")]
    FrequencyDimension { expected: usize, got: usize },
    #[error("{got} eigenvalue lists given for {expected} clusters")]
    ClusterCount { expected: usize, got: usize },
}

/// Unperturbed frequencies `λ_a` indexed by cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum Frequencies {
    /// `λ_a = w_a`; divisors depend only on `(k, w_a − w_b)`.
    Harmonic,
    Values(Vec<f64>),
}

impl Frequencies {
    pub fn values(&self, layout: &ClusterLayout) -> Vec<f64> {
        match self {
            Frequencies::Harmonic => (0..layout.n_clusters()).map(|c| layout.weight(c)).collect(),
            Frequencies::Values(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divisor {
    pub k: Vec<i32>,
    pub a: usize,
    pub b: usize,
    /// Indices inside the clusters (second Melnikov only).
    pub j: Option<usize>,
    pub l: Option<usize>,
    /// `k·ω − λ_a + λ_b` (or with `μ`).
    pub value: f64,
    /// `|value| / (1 + |w_a − w_b|)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub omega: Vec<f64>,
    pub k_max: u32,
    pub gamma: Option<f64>,
    pub kappa: Option<f64>,
    pub pass: bool,
    pub worst_first: Option<Divisor>,
    pub worst_second: Option<Divisor>,
}

/// Largest `c₀` with `λ_a ≥ c₀` and `|λ_a − λ_b| ≥ c₀ |w_a − w_b|`.
pub fn check_h1(layout: &ClusterLayout, lambda: &[f64]) -> f64 {
    let mut c0 = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    for a in 0..lambda.len() {
        for b in a + 1..lambda.len() {
            let gap = layout.gap(a, b);
            if gap > 0.0 {
                c0 = c0.min((lambda[a] - lambda[b]).abs() / gap);
            }
        }
    }
    c0
}

fn worse(cur: &Option<Divisor>, cand: &Divisor) -> bool {
    cur.as_ref().is_none_or(|c| cand.ratio < c.ratio)
}

fn nonzero_ks(n: usize, k_max: u32) -> Vec<Vec<i32>> {
    l1_ball(n, k_max).into_iter().filter(|k| l1_norm(k) > 0).collect()
}

/// Smallest first-Melnikov divisor ratio over `0 < |k| ≤ K` and retained clusters.
pub fn worst_first_divisor(omega: &[f64], k_max: u32, layout: &ClusterLayout, lambda: &Frequencies) -> Option<Divisor> {
    let ks = nonzero_ks(omega.len(), k_max);
    let mut worst: Option<Divisor> = None;
    match lambda {
        Frequencies::Harmonic => {
            // difference set: w_a − w_b ranges over even integers in [−(W−d), W−d]
            let nc = layout.n_clusters();
            for k in &ks {
                let kw = dot(k, omega);
                for a in 0..nc {
                    let b = 0;
                    for (x, y) in [(a, b), (b, a)] {
                        let diff = layout.weight(x) - layout.weight(y);
                        let value = kw - diff;
                        let cand = Divisor {
                            k: k.clone(),
                            a: x,
                            b: y,
                            j: None,
                            l: None,
                            value,
                            ratio: value.abs() / (1.0 + diff.abs()),
                        };
                        if worse(&worst, &cand) {
                            worst = Some(cand);
                        }
                    }
                }
            }
        }
        Frequencies::Values(lam) => {
            for k in &ks {
                let kw = dot(k, omega);
                for a in 0..lam.len() {
                    for b in 0..lam.len() {
                        let value = kw - lam[a] + lam[b];
                        let cand = Divisor {
                            k: k.clone(),
                            a,
                            b,
                            j: None,
                            l: None,
                            value,
                            ratio: value.abs() / (1.0 + layout.gap(a, b)),
                        };
                        if worse(&worst, &cand) {
                            worst = Some(cand);
                        }
                    }
                }
            }
        }
    }
    worst
}

/// First Melnikov screen.
pub fn screen_omega(
    omega: &[f64],
    k_max: u32,
    gamma: f64,
    layout: &ClusterLayout,
    lambda: &Frequencies,
) -> Result<ScreenReport, MelnikovError> {
    if !(gamma > 0.0) {
        return Err(MelnikovError::NonPositiveGap(gamma));
    }
    let worst = worst_first_divisor(omega, k_max, layout, lambda);
    let pass = worst.as_ref().is_none_or(|d| d.ratio >= gamma);
    Ok(ScreenReport {
        omega: omega.to_vec(),
        k_max,
        gamma: Some(gamma),
        kappa: None,
        pass,
        worst_first: worst,
        worst_second: None,
    })
}

/// Smallest second-Melnikov divisor ratio over `|k| ≤ K`, all cluster pairs
/// and all eigenvalue pairs; `k = 0` enters only for `a ≠ b`.
pub fn worst_second_divisor(omega: &[f64], k_max: u32, layout: &ClusterLayout, mu: &[Vec<f64>]) -> Option<Divisor> {
    let ks = l1_ball(omega.len(), k_max);
    ks.par_iter()
        .filter_map(|k| {
            let kw = dot(k, omega);
            let zero = l1_norm(k) == 0;
            let mut worst: Option<Divisor> = None;
            for a in 0..mu.len() {
                for b in 0..mu.len() {
                    if zero && a == b {
                        continue;
                    }
                    let weight = 1.0 + layout.gap(a, b);
                    for (j, &mj) in mu[a].iter().enumerate() {
                        for (l, &ml) in mu[b].iter().enumerate() {
                            let value = kw - mj + ml;
                            let ratio = value.abs() / weight;
                            if worst.as_ref().is_none_or(|w| ratio < w.ratio) {
                                worst = Some(Divisor {
                                    k: k.clone(),
                                    a,
                                    b,
                                    j: Some(j),
                                    l: Some(l),
                                    value,
                                    ratio,
                                });
                            }
                        }
                    }
                }
            }
            worst
        })
        .reduce_with(|x, y| if y.ratio < x.ratio || (y.ratio == x.ratio && y.k < x.k) { y } else { x })
}

/// Second Melnikov screen against per-cluster eigenvalue lists.
pub fn screen_mu(
    omega: &[f64],
    k_max: u32,
    kappa: f64,
    layout: &ClusterLayout,
    mu: &[Vec<f64>],
) -> Result<ScreenReport, MelnikovError> {
    if !(kappa > 0.0) {
        return Err(MelnikovError::NonPositiveGap(kappa));
    }
    if mu.len() != layout.n_clusters() {
        return Err(MelnikovError::ClusterCount {
            expected: layout.n_clusters(),
            got: mu.len(),
        });
    }
    let worst = worst_second_divisor(omega, k_max, layout, mu);
    let pass = worst.as_ref().is_none_or(|d| d.ratio >= kappa);
    Ok(ScreenReport {
        omega: omega.to_vec(),
        k_max,
        gamma: None,
        kappa: Some(kappa),
        pass,
        worst_first: None,
        worst_second: worst,
    })
}

/// Growth exponents of the excluded measure together with the derived `α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub tau1: f64,
    pub tau2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha: f64,
}

impl Exponents {
    /// Values for `λ = w`: `τ₁ = n+1`, `τ₂ = 1`, hence `α = n+d+1`.
    pub fn harmonic(n: usize, d: usize) -> Self {
        let tau1 = n as f64 + 1.0;
        let tau2: f64 = 1.0;
        let alpha1 = tau1.max((n + d) as f64);
        let alpha2 = tau2.max(1.0);
        Exponents {
            tau1,
            tau2,
            alpha1,
            alpha2,
            alpha: alpha1 / alpha2 + 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub torus_dim: usize,
    pub points_per_axis: usize,
    pub k_max: u32,
    pub gamma: f64,
    pub excluded_fraction: f64,
    pub exponents: Exponents,
    /// `K^{τ₁} γ^{τ₂}`; multiply by a fitted constant for the bound.
    pub scale: f64,
    pub resolution_ok: bool,
}

impl MeasureEstimate {
    /// `excluded_fraction / (K^{τ₁} γ^{τ₂})`.
    pub fn normalized(&self) -> f64 {
        self.excluded_fraction / self.scale
    }
}

/// Default odd grid size per axis.
pub fn default_grid_points(torus_dim: usize) -> usize {
    if torus_dim == 1 {
        10_001
    } else {
        301
    }
}

/// Cell midpoints `2π(i + ½)/N` of a uniform grid on `[0, 2π)`.
pub fn grid_axis(points: usize) -> Vec<f64> {
    (0..points).map(|i| 2.0 * PI * (i as f64 + 0.5) / points as f64).collect()
}

/// Fraction of a uniform grid on `𝒟₀ = [0, 2π)ⁿ` failing the first Melnikov
/// screen for `λ = w`.
pub fn measure_estimate(
    torus_dim: usize,
    points_per_axis: usize,
    k_max: u32,
    gamma: f64,
    layout: &ClusterLayout,
) -> Result<MeasureEstimate, MelnikovError> {
    if !(gamma > 0.0) {
        return Err(MelnikovError::NonPositiveGap(gamma));
    }
    let spacing = 2.0 * PI / points_per_axis as f64;
    let resolution_ok = spacing <= gamma / (2.0 * k_max.max(1) as f64);
    if !resolution_ok {
        log::warn!(
            "grid spacing {spacing:.3e} is coarser than γ/(2K) = {:.3e}",
            gamma / (2.0 * k_max as f64)
        );
    }
    let excluded = if torus_dim == 1 {
        excluded_points_1d(points_per_axis, k_max, gamma, layout)
    } else {
        excluded_points_grid(torus_dim, points_per_axis, k_max, gamma, layout)
    };
    let total = (points_per_axis as f64).powi(torus_dim as i32);
    let exponents = Exponents::harmonic(torus_dim, layout.d);
    Ok(MeasureEstimate {
        torus_dim,
        points_per_axis,
        k_max,
        gamma,
        excluded_fraction: excluded as f64 / total,
        exponents,
        scale: (k_max as f64).powf(exponents.tau1) * gamma.powf(exponents.tau2),
        resolution_ok,
    })
}

fn difference_set(layout: &ClusterLayout) -> Vec<f64> {
    let top = layout.weight(layout.n_clusters() - 1) - layout.weight(0);
    let mut out = Vec::new();
    let mut v = -top;
    while v <= top + 0.5 {
        out.push(v);
        v += 2.0;
    }
    out
}

/// For `n = 1` the excluded set is a union of intervals
/// `|kω − Δ| < γ(1+|Δ|)`; grid points are counted inside the merged union.
fn excluded_points_1d(points: usize, k_max: u32, gamma: f64, layout: &ClusterLayout) -> usize {
    let two_pi = 2.0 * PI;
    let mut intervals = Vec::new();
    for k in 1..=k_max as i32 {
        for &delta in &difference_set(layout) {
            for sign in [1.0, -1.0] {
                // sign·k ω − Δ, with ω ∈ [0, 2π)
                let kf = sign * k as f64;
                let center = delta / kf;
                let half = gamma * (1.0 + delta.abs()) / k as f64;
                let (lo, hi) = (center - half, center + half);
                if hi > 0.0 && lo < two_pi {
                    intervals.push((lo.max(0.0), hi.min(two_pi)));
                }
            }
        }
    }
    intervals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (lo, hi) in intervals {
        match merged.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => merged.push((lo, hi)),
        }
    }
    // open intervals: count i with lo < 2π(i+½)/N < hi
    let n = points as f64;
    merged
        .iter()
        .map(|&(lo, hi)| {
            let first = (lo * n / two_pi - 0.5).floor() as i64 + 1;
            let last = (hi * n / two_pi - 0.5).ceil() as i64 - 1;
            let first = first.max(0);
            let last = last.min(points as i64 - 1);
            (last - first + 1).max(0) as usize
        })
        .sum()
}

fn excluded_points_grid(torus_dim: usize, points: usize, k_max: u32, gamma: f64, layout: &ClusterLayout) -> usize {
    let axis = grid_axis(points);
    let total = points.pow(torus_dim as u32);
    (0..total)
        .into_par_iter()
        .filter(|&idx| {
            let mut i = idx;
            let mut omega = vec![0.0; torus_dim];
            for j in (0..torus_dim).rev() {
                omega[j] = axis[i % points];
                i /= points;
            }
            let w = worst_first_divisor(&omega, k_max, layout, &Frequencies::Harmonic);
            w.is_some_and(|d| d.ratio < gamma)
        })
        .count()
}

/// Brute-force grid screening for `n = 1`; reference for the interval count.
pub fn excluded_fraction_brute_force(points: usize, k_max: u32, gamma: f64, layout: &ClusterLayout) -> f64 {
    let fails = grid_axis(points)
        .par_iter()
        .filter(|&&w| {
            worst_first_divisor(&[w], k_max, layout, &Frequencies::Harmonic).is_some_and(|d| d.ratio < gamma)
        })
        .count();
    fails as f64 / points as f64
}

/// Fraction of a midpoint grid on `[0, 1]` where `|f| ≤ κ`.
pub fn sublevel_measure<F: Fn(f64) -> f64 + Sync>(f: F, kappa: f64, points: usize) -> f64 {
    let hits = (0..points)
        .into_par_iter()
        .filter(|&i| f((i as f64 + 0.5) / points as f64).abs() <= kappa)
        .count();
    hits as f64 / points as f64
}
