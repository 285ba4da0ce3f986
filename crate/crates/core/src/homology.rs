//! One KAM step's linear problem
//!
//! ```text
//! −ω·∇_φ S + i[N, S] = Ñ − Q + R
//! ```
//!
//! for a block-diagonal Hermitian `N`. On Fourier coefficients with
//! `|k| ≤ K` and cluster pair `(a, b)` this is the Sylvester equation
//! `(k·ω) Ŝ − N_a Ŝ + Ŝ N_b = −i Q̂`, solved in the eigenbases of `N_a`, `N_b`
//! by division with `k·ω − μ_j + μ_l`. `Ñ` collects the diagonal blocks of
//! `Q̂(0)` and `R` the coefficients with `|k| > K`.

use crate::basis::ClusterLayout;
use crate::blockmat::{hermitian_eigen, spectral_norm, Block, BlockError, BlockMatrix, C64, I};
use crate::fourier::{FourierError, QuasiPeriodicMatrix};
use crate::lattice::{dot, l1_norm, negate};
use crate::melnikov::Divisor;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomologyError {
    #[error("block is not Hermitian: ‖N − N†‖ = {defect:.3e}")]
    NotHermitian { defect: f64 },
    #[error("small divisor {value:.3e} at k = {k:?}, clusters ({a}, {b}); threshold {threshold:.3e}")]
    DivisorTooSmall {
        k: Vec<i32>,
        a: usize,
        b: usize,
        value: f64,
        threshold: f64,
    },
    #[error("normal form is not block diagonal")]
    NotBlockDiagonal,
    #[error("singular Sylvester system at k = {k:?}, clusters ({a}, {b})")]
    SingularSylvester { k: Vec<i32>, a: usize, b: usize },
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
}

/// Eigen-decomposition `N_[a] = P D P†` of one diagonal block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEigen {
    pub mu: Vec<f64>,
    #[serde(with = "dense_serde")]
    pub p: Block,
}

/// Everything the divisions need: frequencies, truncation, gaps and the
/// diagonalized normal form.
#[derive(Debug, Clone)]
pub struct DivisorContext {
    pub omega: Vec<f64>,
    pub k_max: u32,
    pub gamma: f64,
    pub kappa: f64,
    /// Decay exponent of the eigenvalue closeness, `δ = 2β`.
    pub delta: f64,
    /// Closeness constant `C₀`.
    pub c0: f64,
    pub layout: Arc<ClusterLayout>,
    pub blocks: Vec<BlockEigen>,
}

impl DivisorContext {
    #[allow(clippy::too_many_arguments)]
    pub fn from_normal_form(
        n: &BlockMatrix,
        omega: &[f64],
        k_max: u32,
        gamma: f64,
        kappa: f64,
        delta: f64,
        c0: f64,
    ) -> Result<Self, HomologyError> {
        if !n.is_block_diagonal(0.0) {
            return Err(HomologyError::NotBlockDiagonal);
        }
        let layout = n.layout().clone();
        let blocks = (0..layout.n_clusters())
            .into_par_iter()
            .map(|c| {
                let (p, mu) = diagonalize_block(&n.block_or_zero(c, c))?;
                Ok(BlockEigen { mu, p })
            })
            .collect::<Result<Vec<_>, HomologyError>>()?;
        Ok(DivisorContext {
            omega: omega.to_vec(),
            k_max,
            gamma,
            kappa,
            delta,
            c0,
            layout,
            blocks,
        })
    }

    pub fn mu(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.mu.clone()).collect()
    }

    /// `C_{δ,d} = ((d−1)/2)(2C₀)^{1/δ}`.
    pub fn c_delta_d(&self) -> f64 {
        (self.layout.d as f64 - 1.0) / 2.0 * (2.0 * self.c0).powf(1.0 / self.delta)
    }

    /// Amplification allowed for one block: `exp{C_{δ,d} γ^{−1/δ}} / (κ(1+|w_a−w_b|))`.
    pub fn division_bound(&self, a: usize, b: usize) -> f64 {
        let growth = if self.layout.d == 1 {
            1.0
        } else {
            (self.c_delta_d() * self.gamma.powf(-1.0 / self.delta)).exp()
        };
        growth / (self.kappa * (1.0 + self.layout.gap(a, b)))
    }
}

/// `N = P D P†` with ascending eigenvalues; each eigenvector's largest
/// component (first on ties) is made real positive, and degenerate groups are
/// re-orthonormalized.
pub fn diagonalize_block(n: &Block) -> Result<(Block, Vec<f64>), HomologyError> {
    let scale = spectral_norm(n).max(1.0);
    let defect = spectral_norm(&(n - n.adjoint()));
    if defect > 1e-12 * scale {
        return Err(HomologyError::NotHermitian { defect });
    }
    let (vals, mut p) = hermitian_eigen(n);
    let dim = vals.len();
    let mut start = 0;
    while start < dim {
        let mut end = start + 1;
        while end < dim && (vals[end] - vals[end - 1]).abs() <= 1e-10 * scale {
            end += 1;
        }
        if end - start > 1 {
            gram_schmidt(&mut p, start, end);
        }
        start = end;
    }
    for j in 0..dim {
        let mut best = 0;
        for i in 1..dim {
            if p[(i, j)].norm() > p[(best, j)].norm() * (1.0 + 1e-12) {
                best = i;
            }
        }
        let z = p[(best, j)];
        if z.norm() > 0.0 {
            let phase = z.conj() / z.norm();
            p.column_mut(j).iter_mut().for_each(|v| *v *= phase);
        }
    }
    Ok((p, vals))
}

fn gram_schmidt(p: &mut Block, start: usize, end: usize) {
    for j in start..end {
        let mut v: DVector<C64> = p.column(j).into_owned();
        for i in start..j {
            let u = p.column(i);
            let proj = u.dotc(&v);
            v -= u * proj;
        }
        let nv = v.norm();
        p.set_column(j, &(v / C64::from(nv)));
    }
}

/// Solves `(k·ω) B − N_a B + B N_b = A` in eigenbasis coordinates:
/// `B'_jl = A'_jl / (k·ω − μ_j + μ_l)`.
pub fn solve_small_divisor(a_block: &Block, ctx: &DivisorContext, a: usize, b: usize, k: &[i32]) -> Result<Block, HomologyError> {
    let kw = dot(k, &ctx.omega);
    let threshold = ctx.kappa * (1.0 + ctx.layout.gap(a, b));
    let (ea, eb) = (&ctx.blocks[a], &ctx.blocks[b]);
    let mut prime = ea.p.adjoint() * a_block * &eb.p;
    for (j, &mj) in ea.mu.iter().enumerate() {
        for (l, &ml) in eb.mu.iter().enumerate() {
            let div = kw - mj + ml;
            if div.abs() < threshold {
                return Err(HomologyError::DivisorTooSmall {
                    k: k.to_vec(),
                    a,
                    b,
                    value: div,
                    threshold,
                });
            }
            prime[(j, l)] /= div;
        }
    }
    Ok(&ea.p * prime * eb.p.adjoint())
}

/// The same equation solved in original coordinates through the vectorized
/// Kronecker system `(k·ω I − I⊗N_a + N_bᵀ⊗I) vec B = vec A`.
pub fn solve_sylvester(a_block: &Block, n_a: &Block, n_b: &Block, kw: f64) -> Option<Block> {
    let (r, c) = (a_block.nrows(), a_block.ncols());
    let dim = r * c;
    let mut m = Block::zeros(dim, dim);
    for col in 0..c {
        for row in 0..r {
            let i = col * r + row;
            m[(i, i)] += C64::from(kw);
            for rr in 0..r {
                m[(col * r + rr, i)] -= n_a[(rr, row)];
            }
            for cc in 0..c {
                m[(cc * r + row, i)] += n_b[(col, cc)];
            }
        }
    }
    let rhs = DVector::from_iterator(dim, a_block.iter().copied());
    let x = m.lu().solve(&rhs)?;
    Some(Block::from_vec(r, c, x.iter().copied().collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomologyOptions {
    /// Re-solve every block by the Kronecker route and record the gap.
    pub cross_check: bool,
}

impl Default for HomologyOptions {
    fn default() -> Self {
        HomologyOptions { cross_check: true }
    }
}

#[derive(Debug, Clone)]
pub struct HomologySolution {
    pub s: QuasiPeriodicMatrix,
    pub n_tilde: BlockMatrix,
    pub r: QuasiPeriodicMatrix,
    pub k_max: u32,
    pub worst_divisor: Option<Divisor>,
    /// Largest `‖B‖ / (bound · ‖A‖)` over solved blocks; at most one when the
    /// division bound holds.
    pub max_bound_ratio: f64,
    /// Largest relative gap between the two solvers, if cross-checked.
    pub max_solver_gap: Option<f64>,
}

struct Solved {
    k: Vec<i32>,
    a: usize,
    b: usize,
    block: Block,
    worst: Divisor,
    bound_ratio: f64,
    solver_gap: Option<f64>,
}

/// Canonical half of the coefficient set: `k > −k` lexicographically, plus
/// `k = 0` with `a < b`. The rest follows from `Ŝ(−k)_[b]^[a] = Ŝ(k)_[a]^[b]†`.
fn is_canonical(k: &[i32], a: usize, b: usize) -> bool {
    let m = negate(k);
    match k.cmp(&m[..]) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a < b,
    }
}

/// Solves the step for `|k| ≤ ctx.k_max`. `Q` is assumed to satisfy the
/// reality symmetry `Q̂(−k) = Q̂(k)†`; only one member of each symmetric pair is
/// solved and the other is set by adjointness.
pub fn homological_step(
    n: &BlockMatrix,
    q: &QuasiPeriodicMatrix,
    ctx: &DivisorContext,
    opts: &HomologyOptions,
) -> Result<HomologySolution, HomologyError> {
    if **n.layout() != **q.layout() || **n.layout() != *ctx.layout {
        return Err(BlockError::LayoutMismatch.into());
    }
    let (low, r) = q.split(ctx.k_max);
    let zero = vec![0; q.torus_dim()];

    let mut n_tilde = BlockMatrix::zeros(q.layout().clone());
    if let Some(q0) = low.coefficient(&zero) {
        for (&(a, b), blk) in q0.blocks() {
            if a == b {
                n_tilde.insert(a, a, (blk + blk.adjoint()) * C64::from(0.5));
            }
        }
    }

    let mut tasks: Vec<(&Vec<i32>, usize, usize, &Block)> = Vec::new();
    let mut seen: BTreeMap<(Vec<i32>, usize, usize), ()> = BTreeMap::new();
    for (k, m) in low.iter() {
        for (&(a, b), blk) in m.blocks() {
            if l1_norm(k) == 0 && a == b {
                continue;
            }
            let (ck, ca, cb) = if is_canonical(k, a, b) { (k.clone(), a, b) } else { (negate(k), b, a) };
            if seen.insert((ck, ca, cb), ()).is_none() {
                tasks.push((k, a, b, blk));
            }
        }
    }

    let solved: Vec<Solved> = tasks
        .into_par_iter()
        .map(|(k, a, b, _)| {
            // canonical representative, with its own coefficient
            let (k, a, b) = if is_canonical(k, a, b) { (k.clone(), a, b) } else { (negate(k), b, a) };
            let qab = low.coefficient(&k).map(|m| m.block_or_zero(a, b)).unwrap_or_else(|| {
                Block::zeros(ctx.layout.sizes[a], ctx.layout.sizes[b])
            });
            let rhs = &qab * (-I);
            let block = solve_small_divisor(&rhs, ctx, a, b, &k)?;
            let kw = dot(&k, &ctx.omega);
            let worst = worst_block_divisor(ctx, &k, a, b, kw);
            let an = spectral_norm(&rhs);
            let bound_ratio = if an > 0.0 {
                spectral_norm(&block) / (ctx.division_bound(a, b) * an)
            } else {
                0.0
            };
            let solver_gap = if opts.cross_check {
                let (n_a, n_b) = (n.block_or_zero(a, a), n.block_or_zero(b, b));
                let direct = solve_sylvester(&rhs, &n_a, &n_b, kw).ok_or(HomologyError::SingularSylvester {
                    k: k.clone(),
                    a,
                    b,
                })?;
                let scale = spectral_norm(&block).max(f64::MIN_POSITIVE);
                Some(spectral_norm(&(&direct - &block)) / scale)
            } else {
                None
            };
            Ok(Solved {
                k,
                a,
                b,
                block,
                worst,
                bound_ratio,
                solver_gap,
            })
        })
        .collect::<Result<_, HomologyError>>()?;

    let mut coeffs: BTreeMap<Vec<i32>, BlockMatrix> = BTreeMap::new();
    let mut worst: Option<Divisor> = None;
    let mut max_bound_ratio: f64 = 0.0;
    let mut max_solver_gap: Option<f64> = None;
    for s in solved {
        let mirror = negate(&s.k);
        coeffs
            .entry(mirror)
            .or_insert_with(|| BlockMatrix::zeros(q.layout().clone()))
            .insert(s.b, s.a, s.block.adjoint());
        coeffs
            .entry(s.k.clone())
            .or_insert_with(|| BlockMatrix::zeros(q.layout().clone()))
            .insert(s.a, s.b, s.block);
        if worst.as_ref().is_none_or(|w| s.worst.ratio < w.ratio) {
            worst = Some(s.worst);
        }
        max_bound_ratio = max_bound_ratio.max(s.bound_ratio);
        if let Some(g) = s.solver_gap {
            max_solver_gap = Some(max_solver_gap.unwrap_or(0.0).max(g));
        }
    }
    let mut s = QuasiPeriodicMatrix::zeros(q.layout().clone(), q.torus_dim(), q.sigma());
    for (k, m) in coeffs {
        s.set(k, m);
    }
    Ok(HomologySolution {
        s,
        n_tilde,
        r,
        k_max: ctx.k_max,
        worst_divisor: worst,
        max_bound_ratio,
        max_solver_gap,
    })
}

fn worst_block_divisor(ctx: &DivisorContext, k: &[i32], a: usize, b: usize, kw: f64) -> Divisor {
    let weight = 1.0 + ctx.layout.gap(a, b);
    let mut best: Option<Divisor> = None;
    for (j, &mj) in ctx.blocks[a].mu.iter().enumerate() {
        for (l, &ml) in ctx.blocks[b].mu.iter().enumerate() {
            let value = kw - mj + ml;
            let ratio = value.abs() / weight;
            if best.as_ref().is_none_or(|d| ratio < d.ratio) {
                best = Some(Divisor {
                    k: k.to_vec(),
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
    best.expect("non-empty clusters")
}

/// `max_{|k| ≤ K, a, b} ‖−i(k·ω)Ŝ(k) + i[N, Ŝ(k)] + Q̂(k) − δ_{k0} Ñ‖` (spectral
/// norm per block).
pub fn residual(sol: &HomologySolution, n: &BlockMatrix, q: &QuasiPeriodicMatrix, omega: &[f64]) -> Result<f64, HomologyError> {
    let (low, _) = q.split(sol.k_max);
    let mut keys: Vec<Vec<i32>> = low.iter().map(|(k, _)| k.clone()).collect();
    keys.extend(sol.s.iter().map(|(k, _)| k.clone()));
    keys.sort();
    keys.dedup();
    let zero = vec![0; q.torus_dim()];
    let worst = keys
        .par_iter()
        .map(|k| -> Result<f64, HomologyError> {
            let sk = sol.s.coefficient_or_zero(k);
            let kw = dot(k, omega);
            let comm = crate::blockmat::commutator(n, &sk)?;
            let mut lhs = sk.scale(C64::new(0.0, -kw)).add(&comm.scale(I))?.add(&low.coefficient_or_zero(k))?;
            if *k == zero {
                lhs = lhs.sub(&sol.n_tilde)?;
            }
            Ok(lhs.decay_norm(0.0).norm)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomologyEstimates {
    pub beta: f64,
    pub sigma: f64,
    pub sigma_prime: f64,
    /// `[Ñ]_β`.
    pub n_tilde: f64,
    /// `[Q]_β^σ`.
    pub q: f64,
    /// `[R]_β^{σ′}`.
    pub r: f64,
    /// `[S]_{β+}^{σ′}`.
    pub s_plus: f64,
    /// `K γ κ^{−3} (σ − σ′)^{−n} [Q]_β^σ`; `s_plus` over this is the fitted constant.
    pub s_scale: f64,
    /// `‖∂_ω S‖` strip norm by centered differences, when requested.
    pub ds_domega: Option<f64>,
    /// Relative change of the derivative estimate between step `h` and `h/2`.
    pub richardson_gap: Option<f64>,
}

impl HomologyEstimates {
    /// Ratio `[S]_{β+}^{σ′} / (Kγκ^{−3}(σ−σ′)^{−n}[Q]_β^σ)`.
    pub fn s_constant(&self) -> f64 {
        if self.s_scale > 0.0 {
            self.s_plus / self.s_scale
        } else {
            0.0
        }
    }
}

/// Norms of the step's outputs; `domega_step` enables finite differences in
/// `ω` at `±h` and `±h/2` along each axis, re-solving with `N` fixed.
pub fn homology_estimates(
    sol: &HomologySolution,
    n: &BlockMatrix,
    q: &QuasiPeriodicMatrix,
    ctx: &DivisorContext,
    beta: f64,
    sigma: f64,
    sigma_prime: f64,
    domega_step: Option<f64>,
) -> Result<HomologyEstimates, HomologyError> {
    let q_norm = q.strip_norm(beta, sigma);
    let torus = q.torus_dim() as i32;
    let s_scale = ctx.k_max as f64 * ctx.gamma * ctx.kappa.powi(-3) * (sigma - sigma_prime).powi(-torus) * q_norm;
    let (ds, rich) = match domega_step {
        None => (None, None),
        Some(h) => {
            let opts = HomologyOptions { cross_check: false };
            let derivative = |h: f64| -> Result<f64, HomologyError> {
                let mut best: f64 = 0.0;
                for axis in 0..ctx.omega.len() {
                    let mut plus = ctx.clone();
                    plus.omega[axis] += h;
                    let mut minus = ctx.clone();
                    minus.omega[axis] -= h;
                    let sp = homological_step(n, q, &plus, &opts)?.s;
                    let sm = homological_step(n, q, &minus, &opts)?.s;
                    let d = sp.sub(&sm)?.scale(C64::from(0.5 / h));
                    best = best.max(d.strip_norm_plus(beta, sigma_prime));
                }
                Ok(best)
            };
            let full = derivative(h)?;
            let half = derivative(h / 2.0)?;
            let gap = if half > 0.0 { (full - half).abs() / half } else { 0.0 };
            (Some(half), Some(gap))
        }
    };
    Ok(HomologyEstimates {
        beta,
        sigma,
        sigma_prime,
        n_tilde: sol.n_tilde.decay_norm(beta).norm,
        q: q_norm,
        r: sol.r.strip_norm(beta, sigma_prime),
        s_plus: sol.s.strip_norm_plus(beta, sigma_prime),
        s_scale,
        ds_domega: ds,
        richardson_gap: rich,
    })
}

mod dense_serde {
    use super::{Block, C64};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Dense {
        rows: usize,
        cols: usize,
        re: Vec<f64>,
        im: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Block, s: S) -> Result<S::Ok, S::Error> {
        Dense {
            rows: m.nrows(),
            cols: m.ncols(),
            re: m.iter().map(|z| z.re).collect(),
            im: m.iter().map(|z| z.im).collect(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Block, D::Error> {
        let x = Dense::deserialize(d)?;
        if x.re.len() != x.rows * x.cols || x.im.len() != x.re.len() {
            return Err(serde::de::Error::custom("dense matrix length mismatch"));
        }
        let data = x.re.iter().zip(&x.im).map(|(&r, &i)| C64::new(r, i)).collect();
        Ok(Block::from_vec(x.rows, x.cols, data))
    }
}
