//! The logarithmically decaying potential family and its matrix in the
//! Hermite basis.
//!
//! `V(x, φ) = A (1 + ln(1 + |x|²))^{−2ι} T(φ)` with `T` a real trigonometric
//! polynomial on `𝕋ⁿ`. Matrix elements `Q_a^b(φ) = ∫ V(x, φ) Φ_a Φ_b dx` are
//! computed by tensor quadrature. The default 1-D rule is trapezoidal: the
//! profile has complex singularities at distance ≈ 0.8 from the real axis,
//! which limits Gauss–Hermite convergence far more than it limits the
//! equispaced rule.

use crate::basis::{hermite_table, BasisError, BasisTruncation, ClusterLayout};
use crate::blockmat::{spectral_norm, Block, BlockError, BlockMatrix, C64};
use crate::fourier::{grid_angles, FourierError};
use crate::lattice::{l1_norm, negate};
use crate::quadrature::{GaussHermite, Trapezoid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

pub use crate::fourier::QuasiPeriodicMatrix;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("invalid potential: {0}")]
    InvalidSpec(String),
    #[error("quadrature not converged: orders {order} and {check_order} differ by {max_diff:.3e} at entry {entry:?}")]
    QuadratureNotConverged {
        order: usize,
        check_order: usize,
        max_diff: f64,
        entry: (usize, usize),
    },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse potential: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `A g_ι(|x|²) T(φ)`.
    #[default]
    Separable,
    /// `A g_ι(|x|²) cos(x₁) T(φ)`, assembled through the general route.
    CosX1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub k: Vec<i32>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub dimension: usize,
    pub iota: f64,
    pub amplitude: f64,
    pub torus_dim: usize,
    pub sigma: f64,
    pub fourier_coeffs: Vec<FourierTerm>,
    #[serde(default)]
    pub family: Family,
}

impl PotentialSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, PotentialError> {
        let spec: PotentialSpec = toml::from_str(s).map_err(|e| PotentialError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json_str(s: &str) -> Result<Self, PotentialError> {
        let spec: PotentialSpec = serde_json::from_str(s).map_err(|e| PotentialError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads TOML or JSON, chosen by extension.
    pub fn load(path: &Path) -> Result<Self, PotentialError> {
        let text = std::fs::read_to_string(path).map_err(|source| PotentialError::Io {
            path: path.display().to_string(),
            source,
        })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    /// `T(φ) = cos(φ_axis)`.
    pub fn cosine(dimension: usize, iota: f64, amplitude: f64, torus_dim: usize, axis: usize) -> Self {
        let mut k = vec![0; torus_dim];
        k[axis] = 1;
        let terms = vec![
            FourierTerm { k: k.clone(), re: 0.5, im: 0.0 },
            FourierTerm { k: negate(&k), re: 0.5, im: 0.0 },
        ];
        PotentialSpec {
            dimension,
            iota,
            amplitude,
            torus_dim,
            sigma: 1.0,
            fourier_coeffs: terms,
            family: Family::Separable,
        }
    }

    /// `T̂(k) = e^{−ρ|k|}` for all `|k| ≤ k_max`.
    pub fn exponential_harmonics(dimension: usize, iota: f64, amplitude: f64, torus_dim: usize, k_max: u32, rho: f64) -> Self {
        let terms = crate::lattice::l1_ball(torus_dim, k_max)
            .into_iter()
            .map(|k| {
                let re = (-rho * l1_norm(&k) as f64).exp();
                FourierTerm { k, re, im: 0.0 }
            })
            .collect();
        PotentialSpec {
            dimension,
            iota,
            amplitude,
            torus_dim,
            sigma: rho / 2.0,
            fourier_coeffs: terms,
            family: Family::Separable,
        }
    }

    pub fn validate(&self) -> Result<(), PotentialError> {
        let bad = |m: String| Err(PotentialError::InvalidSpec(m));
        if self.dimension == 0 {
            return bad("dimension must be positive".into());
        }
        if self.torus_dim == 0 {
            return bad("torus_dim must be positive".into());
        }
        if !(self.iota >= 0.0) {
            return bad(format!("iota = {} must be non-negative", self.iota));
        }
        if !self.amplitude.is_finite() {
            return bad("amplitude must be finite".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma = {} must be positive", self.sigma));
        }
        let t = self.t_hat_map();
        for (i, term) in self.fourier_coeffs.iter().enumerate() {
            if term.k.len() != self.torus_dim {
                return bad(format!("fourier_coeffs[{i}].k has {} components, expected {}", term.k.len(), self.torus_dim));
            }
            if !term.re.is_finite() || !term.im.is_finite() {
                return bad(format!("fourier_coeffs[{i}] is not finite"));
            }
        }
        for (k, v) in &t {
            let partner = t.get(&negate(k)).copied().unwrap_or_default();
            if (partner - v.conj()).norm() > 1e-14 * (1.0 + v.norm()) {
                return bad(format!("T is not real: coefficient of {:?} is not the conjugate of {k:?}", negate(k)));
            }
        }
        if self.dimension > 2 {
            log::warn!("tensor quadrature in d = {} is expensive", self.dimension);
        }
        Ok(())
    }

    /// `T̂(k)`, summing repeated entries.
    pub fn t_hat_map(&self) -> BTreeMap<Vec<i32>, C64> {
        let mut m = BTreeMap::new();
        for t in &self.fourier_coeffs {
            *m.entry(t.k.clone()).or_insert(C64::from(0.0)) += C64::new(t.re, t.im);
        }
        m.retain(|_, v| *v != C64::from(0.0));
        m
    }

    pub fn eval_t(&self, phi: &[f64]) -> f64 {
        self.t_hat_map()
            .iter()
            .map(|(k, v)| (v * C64::from_polar(1.0, crate::lattice::dot(k, phi))).re)
            .sum()
    }

    /// `x`-dependent factor of the potential.
    pub fn spatial(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let g = self.amplitude * (1.0 + r2.ln_1p()).powf(-2.0 * self.iota);
        match self.family {
            Family::Separable => g,
            Family::CosX1 => g * x[0].cos(),
        }
    }

    pub fn eval(&self, x: &[f64], phi: &[f64]) -> f64 {
        self.spatial(x) * self.eval_t(phi)
    }

    /// `sup_{φ ∈ strip} |T(φ)| ≤ Σ |T̂(k)| e^{|k|σ}`.
    pub fn strip_bound(&self, sigma: f64) -> f64 {
        self.t_hat_map()
            .iter()
            .map(|(k, v)| v.norm() * (l1_norm(k) as f64 * sigma).exp())
            .sum()
    }

    /// Smallest `K` with `Σ_{|k|>K} |T̂(k)| e^{|k|σ} < 1e−14`.
    pub fn default_k_store(&self) -> u32 {
        let t = self.t_hat_map();
        let top = t.keys().map(|k| l1_norm(k)).max().unwrap_or(0);
        (0..=top)
            .find(|&kk| {
                t.iter()
                    .filter(|(k, _)| l1_norm(k) > kk)
                    .map(|(k, v)| v.norm() * (l1_norm(k) as f64 * self.sigma).exp())
                    .sum::<f64>()
                    < 1e-14
            })
            .unwrap_or(top)
    }
}

/// One-dimensional rule used along every axis of the tensor quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadRule {
    /// Equispaced nodes on `[−L, L]` with `L = √(2p+1) + 8` for top Hermite order `p`.
    #[default]
    Trapezoid,
    GaussHermite,
}

const TRAPEZOID_STEP: f64 = 0.08;

pub fn trapezoid_half_width(max_hermite_order: usize) -> f64 {
    (2.0 * max_hermite_order as f64 + 1.0).sqrt() + 8.0
}

/// Nodes per axis used when none is given.
pub fn default_quad_order(rule: QuadRule, basis: &BasisTruncation) -> usize {
    match rule {
        QuadRule::GaussHermite => 4 * (basis.w_max as usize + 10),
        QuadRule::Trapezoid => {
            let l = trapezoid_half_width(basis.max_hermite_order());
            (2.0 * l / TRAPEZOID_STEP).ceil() as usize + 1
        }
    }
}

/// Order whose rule refines the given one by a factor of two.
pub fn doubled_order(rule: QuadRule, order: usize) -> usize {
    match rule {
        QuadRule::GaussHermite => 2 * order,
        QuadRule::Trapezoid => 2 * order - 1,
    }
}

fn rule_nodes(rule: QuadRule, order: usize, max_hermite_order: usize) -> (Vec<f64>, Vec<f64>) {
    match rule {
        QuadRule::GaussHermite => {
            let g = GaussHermite::new(order);
            (g.nodes, g.weights)
        }
        QuadRule::Trapezoid => {
            let t = Trapezoid::new(trapezoid_half_width(max_hermite_order), order);
            (t.nodes, t.weights)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssembleOptions {
    pub rule: QuadRule,
    pub quad_order: Option<usize>,
    pub k_store: Option<u32>,
    /// Recompute at twice the order and require agreement to 1e−8.
    pub check_convergence: bool,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            rule: QuadRule::Trapezoid,
            quad_order: None,
            k_store: None,
            check_convergence: true,
        }
    }
}

/// `∫ f(x) Φ_a(x) Φ_b(x) dx` over all retained modes, in flat mode order.
pub fn spatial_matrix<F>(basis: &BasisTruncation, f: F, rule: QuadRule, quad_order: usize) -> Block
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = basis.d;
    let orders = basis.max_hermite_order() + 1;
    let (nodes, weights) = rule_nodes(rule, quad_order, orders - 1);
    let nq = nodes.len();
    // hh[q][i*orders+j] = W_q φ_i(x_q) φ_j(x_q)
    let hh: Vec<Vec<f64>> = nodes
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| {
            let t = hermite_table(orders - 1, x);
            let mut row = vec![0.0; orders * orders];
            for i in 0..orders {
                for j in 0..orders {
                    row[i * orders + j] = w * t[i] * t[j];
                }
            }
            row
        })
        .collect();

    // integrand values on the tensor grid, last axis fastest
    let total = nq.pow(d as u32);
    let mut cur: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let mut x = vec![0.0; d];
            for j in (0..d).rev() {
                x[j] = nodes[idx % nq];
                idx /= nq;
            }
            f(&x)
        })
        .collect();

    // contract axes from the last: cur has shape [nq^r, p²^(d−r)]
    let p2 = orders * orders;
    let mut inner = 1usize;
    for r in (0..d).rev() {
        let outer = nq.pow(r as u32);
        let next: Vec<f64> = (0..outer)
            .into_par_iter()
            .flat_map_iter(|o| {
                let mut acc = vec![0.0; p2 * inner];
                for q in 0..nq {
                    let src = &cur[(o * nq + q) * inner..(o * nq + q + 1) * inner];
                    for (pair, &h) in hh[q].iter().enumerate() {
                        if h == 0.0 {
                            continue;
                        }
                        let dst = &mut acc[pair * inner..(pair + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += h * s;
                        }
                    }
                }
                acc
            })
            .collect();
        cur = next;
        inner *= p2;
    }

    let modes: Vec<Vec<usize>> = basis.modes().map(|m| m.hermite_orders().collect()).collect();
    let n = modes.len();
    let mut out = Block::zeros(n, n);
    for (ia, ma) in modes.iter().enumerate() {
        for (ib, mb) in modes.iter().enumerate() {
            let mut idx = 0;
            for (&i, &j) in ma.iter().zip(mb) {
                idx = idx * p2 + i * orders + j;
            }
            out[(ia, ib)] = C64::from(cur[idx]);
        }
    }
    out
}

fn converged_spatial_matrix<F>(basis: &BasisTruncation, f: F, opts: &AssembleOptions) -> Result<Block, PotentialError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let order = opts.quad_order.unwrap_or_else(|| default_quad_order(opts.rule, basis));
    let m = spatial_matrix(basis, &f, opts.rule, order);
    if opts.check_convergence {
        let check_order = doubled_order(opts.rule, order);
        let m2 = spatial_matrix(basis, &f, opts.rule, check_order);
        let mut worst = (0.0, (0, 0));
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let d = (m[(i, j)] - m2[(i, j)]).norm();
                if d > worst.0 {
                    worst = (d, (i, j));
                }
            }
        }
        if worst.0 > 1e-8 {
            return Err(PotentialError::QuadratureNotConverged {
                order,
                check_order,
                max_diff: worst.0,
                entry: worst.1,
            });
        }
    }
    Ok(m)
}

/// Fourier coefficients of `Q(φ)` for `|k| ≤ K_store`.
pub fn assemble_q(spec: &PotentialSpec, basis: &BasisTruncation, opts: &AssembleOptions) -> Result<QuasiPeriodicMatrix, PotentialError> {
    spec.validate()?;
    if spec.dimension != basis.d {
        return Err(PotentialError::InvalidSpec(format!(
            "potential dimension {} differs from basis dimension {}",
            spec.dimension, basis.d
        )));
    }
    let k_store = opts.k_store.unwrap_or_else(|| spec.default_k_store());
    let layout = Arc::new(basis.layout());
    match spec.family {
        Family::Separable => {
            let m = converged_spatial_matrix(basis, |x| spec.spatial(x), opts)?;
            let spatial = BlockMatrix::from_dense(layout.clone(), &m);
            let mut q = QuasiPeriodicMatrix::zeros(layout, spec.torus_dim, spec.sigma);
            for (k, t) in spec.t_hat_map() {
                if l1_norm(&k) <= k_store {
                    q.set(k, spatial.scale(t));
                }
            }
            Ok(q)
        }
        Family::CosX1 => assemble_general(spec, basis, layout, k_store, opts),
    }
}

/// Spatial quadrature at every point of a `φ`-grid followed by a discrete
/// Fourier transform; exact for trigonometric polynomials of degree below
/// half the grid size.
fn assemble_general(
    spec: &PotentialSpec,
    basis: &BasisTruncation,
    layout: Arc<ClusterLayout>,
    k_store: u32,
    opts: &AssembleOptions,
) -> Result<QuasiPeriodicMatrix, PotentialError> {
    let degree = spec.t_hat_map().keys().map(|k| k.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)).max().unwrap_or(0);
    let points = 2 * degree.max(k_store) as usize + 1;
    let samples: Vec<Block> = grid_angles(spec.torus_dim, points)
        .iter()
        .map(|phi| converged_spatial_matrix(basis, |x| spec.eval(x, phi), opts))
        .collect::<Result<_, _>>()?;
    Ok(QuasiPeriodicMatrix::from_grid(layout, spec.torus_dim, spec.sigma, points, &samples, k_store).pruned(1e-15))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub iota: f64,
    pub w_max: u32,
    /// `max (1+ln w_a)^ι (1+ln w_b)^ι ‖Q̂(k)_[a]^[b]‖` over retained `k, a, b`.
    pub sup: f64,
    pub argmax: Option<(Vec<i32>, usize, usize)>,
    /// The weighted sup restricted to each cluster distance `|w_a − w_b|`.
    pub distance_profile: Vec<(u32, f64)>,
}

pub fn verify_key_decay(q: &QuasiPeriodicMatrix, iota: f64) -> DecayReport {
    let layout = q.layout();
    let mut sup = 0.0;
    let mut argmax = None;
    let mut profile: BTreeMap<u32, f64> = BTreeMap::new();
    for (k, m) in q.iter() {
        for (&(a, b), blk) in m.blocks() {
            let v = layout.log_weight(a, iota) * layout.log_weight(b, iota) * spectral_norm(blk);
            if v > sup {
                sup = v;
                argmax = Some((k.clone(), a, b));
            }
            let gap = layout.gap(a, b) as u32;
            let e = profile.entry(gap).or_insert(0.0);
            *e = e.max(v);
        }
    }
    DecayReport {
        iota,
        w_max: layout.w_max,
        sup,
        argmax,
        distance_profile: profile.into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyDecaySweep {
    pub reports: Vec<DecayReport>,
    /// `max sup / min sup − 1` over the cutoffs.
    pub spread: f64,
}

impl KeyDecaySweep {
    pub fn is_stable(&self, tol: f64) -> bool {
        self.spread <= tol
    }
}

/// Key-decay sups across increasing cutoffs.
pub fn key_decay_sweep(spec: &PotentialSpec, w_maxes: &[u32], opts: &AssembleOptions) -> Result<KeyDecaySweep, PotentialError> {
    let mut reports = Vec::new();
    for &w in w_maxes {
        let basis = crate::basis::enumerate_modes(spec.dimension, w)?;
        let q = assemble_q(spec, &basis, opts)?;
        reports.push(verify_key_decay(&q, spec.iota));
    }
    let hi = reports.iter().map(|r| r.sup).fold(0.0, f64::max);
    let lo = reports.iter().map(|r| r.sup).fold(f64::INFINITY, f64::min);
    let spread = if lo > 0.0 { hi / lo - 1.0 } else if hi == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(KeyDecaySweep { reports, spread })
}
