//! The KAM iteration.
//!
//! Starting from `N₀` and a perturbation `Q₀`, each step solves the
//! homological equation for a generator `S_{m+1}`, moves the averaged part
//! into the normal form, `N_{m+1} = N_m + Ñ_m`, and replaces the perturbation
//! by
//!
//! ```text
//! Q_{m+1} = R_m + i ∫₀¹ e^{−itS} [(1−t)(Ñ_m + R_m) + t Q_m, S] e^{itS} dt.
//! ```
//!
//! The transformation is `M_m = e^{iS₁} ⋯ e^{iS_m}`.
//!
//! Parameters follow the schedule `ε_m = ε_{m−1}^{5/4}`, `κ_m = ε_{m−1}^{1/4}`,
//! `γ_m = ε₀^{1/6} (ln ε_{m−1}^{−1})^{−α}`, `σ_{m−1} − σ_m = C* σ₀ m^{−2}`,
//! `K_m = 2 (σ_{m−1} − σ_m)^{−1} ln ε_{m−1}^{−1}`, all kept in log space.

use crate::blockmat::{expm_i_hermitian, hermitian_eigen, spectral_norm, weighted_operator_norm, Block, BlockError, BlockMatrix, C64, I};
use crate::fourier::{grid_angles, FourierError, QuasiPeriodicMatrix};
use crate::homology::{homological_step, DivisorContext, HomologyError, HomologyOptions};
use crate::melnikov::{worst_second_divisor, Divisor};
use crate::quadrature::GaussLegendre;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// `C* = (2 Σ_{m≥1} m^{−2})^{−1} = 3/π²`.
pub const C_STAR: f64 = 3.0 / (PI * PI);

/// Measured perturbation size below which the iteration stops.
pub const Q_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum KamError {
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("smallness condition fails at step {step}: {detail}")]
    Smallness { step: usize, detail: String },
    #[error("initial perturbation [Q₀]_β = {measured:.3e} exceeds ε₀ = {eps0:.3e}")]
    InitialTooLarge { measured: f64, eps0: f64 },
    #[error(transparent)]
    Homology(#[from] HomologyError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub eps0: f64,
    pub sigma0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub m_max: usize,
}

/// Parameters of step `m ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub m: usize,
    /// `ln ε_m`.
    pub ln_eps: f64,
    /// `ln ε_{m−1}`.
    pub ln_eps_prev: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub sigma_loss: f64,
    /// `K_m` before rounding.
    pub k_real: f64,
    pub k: u64,
}

impl StepParams {
    pub fn eps(&self) -> f64 {
        self.ln_eps.exp()
    }

    pub fn ln_kappa(&self) -> f64 {
        self.ln_eps_prev / 4.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub params: ScheduleParams,
    /// Steps `1..=m_max`.
    pub steps: Vec<StepParams>,
}

impl Schedule {
    pub fn ln_eps(&self, m: usize) -> f64 {
        if m == 0 {
            self.params.eps0.ln()
        } else {
            self.steps[m - 1].ln_eps
        }
    }

    pub fn sigma(&self, m: usize) -> f64 {
        if m == 0 {
            self.params.sigma0
        } else {
            self.steps[m - 1].sigma
        }
    }

    pub fn step(&self, m: usize) -> &StepParams {
        &self.steps[m - 1]
    }
}

/// `ln γ_m = (1/6) ln ε₀ − α ln(ln ε_{m−1}^{−1})`.
fn ln_gamma(ln_eps0: f64, ln_eps_prev: f64, alpha: f64) -> f64 {
    ln_eps0 / 6.0 - alpha * (-ln_eps_prev).ln()
}

pub fn make_schedule(eps0: f64, sigma0: f64, alpha: f64, beta: f64, m_max: usize) -> Result<Schedule, KamError> {
    if !(eps0 > 0.0 && eps0 < 1.0) {
        return Err(KamError::Schedule(format!("ε₀ = {eps0} must lie in (0, 1)")));
    }
    if !(sigma0 > 0.0) {
        return Err(KamError::Schedule(format!("σ₀ = {sigma0} must be positive")));
    }
    if !(alpha > 0.0) {
        return Err(KamError::Schedule(format!("α = {alpha} must be positive")));
    }
    if beta < alpha / 2.0 {
        return Err(KamError::Schedule(format!(
            "β = {beta} < α/2 = {}: the smallness condition cannot be guaranteed",
            alpha / 2.0
        )));
    }
    let ln_eps0 = eps0.ln();
    let mut steps = Vec::with_capacity(m_max);
    let mut sigma = sigma0;
    for m in 1..=m_max {
        let ln_eps_prev = ln_eps0 * 1.25f64.powi(m as i32 - 1);
        let ln_eps = ln_eps0 * 1.25f64.powi(m as i32);
        let sigma_loss = C_STAR * sigma0 / (m * m) as f64;
        sigma -= sigma_loss;
        let k_real = 2.0 * (-ln_eps_prev) / sigma_loss;
        steps.push(StepParams {
            m,
            ln_eps,
            ln_eps_prev,
            kappa: (ln_eps_prev / 4.0).exp(),
            gamma: ln_gamma(ln_eps0, ln_eps_prev, alpha).exp(),
            sigma,
            sigma_loss,
            k_real,
            k: k_real.ceil().min(u64::MAX as f64) as u64,
        });
    }
    Ok(Schedule {
        params: ScheduleParams {
            eps0,
            sigma0,
            alpha,
            beta,
            m_max,
        },
        steps,
    })
}

/// Both forms of the smallness condition at one step, as margins that are
/// non-positive when the condition holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallnessStep {
    pub m: usize,
    /// `8d(ε₀/γ)^{1/(2β)} + ln κ − ln γ`.
    pub critical_margin: f64,
    /// `8dε₀^{5/(12β)} L^{α/(2β)} + (1/6) ln ε₀^{−1} + α ln L − L/4`, `L = ln ε_{m−1}^{−1}`.
    pub equiv_margin: f64,
    pub critical: bool,
    pub equiv: bool,
    pub kappa_le_gamma: bool,
    /// `γ ≤ c₀/4` with `c₀ = 1`.
    pub gamma_le_quarter: bool,
}

impl SmallnessStep {
    pub fn pass(&self) -> bool {
        self.critical && self.kappa_le_gamma && self.gamma_le_quarter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallnessReport {
    pub steps: Vec<SmallnessStep>,
    pub first_failure: Option<usize>,
}

impl SmallnessReport {
    pub fn all_pass(&self) -> bool {
        self.first_failure.is_none()
    }
}

pub fn smallness_margins(ln_eps0: f64, ln_eps_prev: f64, alpha: f64, beta: f64, d: usize) -> (f64, f64) {
    let d = d as f64;
    let lg = ln_gamma(ln_eps0, ln_eps_prev, alpha);
    let lk = ln_eps_prev / 4.0;
    let critical = 8.0 * d * ((ln_eps0 - lg) / (2.0 * beta)).exp() + lk - lg;
    let l = -ln_eps_prev;
    let equiv = 8.0 * d * (5.0 * ln_eps0 / (12.0 * beta)).exp() * l.powf(alpha / (2.0 * beta)) - ln_eps0 / 6.0 + alpha * l.ln()
        - l / 4.0;
    (critical, equiv)
}

pub fn check_smallness(schedule: &Schedule, d: usize) -> SmallnessReport {
    let p = &schedule.params;
    let ln_eps0 = p.eps0.ln();
    let steps: Vec<SmallnessStep> = schedule
        .steps
        .iter()
        .map(|s| {
            let (c, e) = smallness_margins(ln_eps0, s.ln_eps_prev, p.alpha, p.beta, d);
            SmallnessStep {
                m: s.m,
                critical_margin: c,
                equiv_margin: e,
                critical: c <= 0.0,
                equiv: e <= 0.0,
                kappa_le_gamma: s.ln_kappa() <= s.gamma.ln(),
                gamma_le_quarter: s.gamma <= 0.25,
            }
        })
        .collect();
    let first_failure = steps.iter().find(|s| !s.pass()).map(|s| s.m);
    SmallnessReport { steps, first_failure }
}

/// Largest `ε₀` on a logarithmic bisection for which every step of a
/// schedule with the given parameters passes the smallness check.
pub fn smallness_threshold(sigma0: f64, alpha: f64, beta: f64, m_max: usize, d: usize) -> Option<f64> {
    let pass = |ln_e: f64| {
        make_schedule(ln_e.exp(), sigma0, alpha, beta, m_max)
            .map(|s| check_smallness(&s, d).all_pass())
            .unwrap_or(false)
    };
    let (mut lo, mut hi) = (-700.0f64, -1e-9f64);
    if !pass(lo) {
        return None;
    }
    if pass(hi) {
        return Some(hi.exp());
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pass(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo.exp())
}

/// How the iteration treats the schedule's gap parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Abort when the smallness condition fails; divide with `κ_m` as scheduled.
    Strict,
    /// Record smallness failures and divide with `min(κ_m, γ_m)`.
    #[default]
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamOptions {
    pub mode: ScheduleMode,
    /// Largest stored Fourier order; `K_m` is capped here.
    pub k_store: u32,
    /// Gauss–Legendre nodes for the conjugation integral; checked against twice as many.
    pub gl_order: usize,
    /// Overrides the division threshold.
    pub kappa_override: Option<f64>,
    pub cross_check: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl KamOptions {
    pub fn new(k_store: u32) -> Self {
        KamOptions {
            mode: ScheduleMode::Desk,
            k_store,
            gl_order: 8,
            kappa_override: None,
            cross_check: false,
            checkpoint_dir: None,
        }
    }

    /// Grid points per axis used for products on the torus.
    pub fn grid_points(&self) -> usize {
        4 * self.k_store as usize + 1
    }
}

/// Default stored Fourier order for a torus dimension.
pub fn default_k_store(torus_dim: usize) -> u32 {
    if torus_dim == 1 {
        12
    } else {
        6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub m: usize,
    /// Scheduled `ε_m` for the perturbation entering this step (`m` counts from 0).
    pub eps_scheduled: f64,
    pub ln_eps_scheduled: f64,
    /// Measured `[Q_m]_β^{σ_m}`.
    pub q_measured: f64,
    /// `[N_m − N₀]_β`.
    pub n_drift: f64,
    pub k_scheduled: u64,
    pub k_used: u32,
    pub kappa: f64,
    pub gamma: f64,
    pub kappa_used: f64,
    pub smallness_ok: bool,
    /// `[S_{m+1}]_{β+}^{σ_{m+1}}`.
    pub s_plus: f64,
    pub worst_divisor: Option<Divisor>,
    pub max_bound_ratio: f64,
    pub solver_gap: Option<f64>,
    /// Largest entry difference of the conjugation integral between `n` and `2n` nodes.
    pub quadrature_gap: f64,
    /// `sup_φ ‖M_{m+1}(φ) − M_m(φ)‖` on `ℓ²₀`.
    pub transform_step: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamFailure {
    pub m: usize,
    pub divisor: Option<Divisor>,
    pub message: String,
}

/// `M(φ) = e^{iS₁(φ)} ⋯ e^{iS_m(φ)}`, kept as its generators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformChain {
    pub generators: Vec<QuasiPeriodicMatrix>,
}

impl TransformChain {
    pub fn identity() -> Self {
        TransformChain { generators: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn push(&mut self, s: QuasiPeriodicMatrix) {
        self.generators.push(s);
    }

    /// `M(φ)` for real `φ`, as a dense matrix.
    pub fn eval(&self, phi: &[f64], n_modes: usize) -> Result<Block, FourierError> {
        let mut m = Block::identity(n_modes, n_modes);
        for s in &self.generators {
            let sv = s.eval_dense(phi)?;
            m *= expm_i_hermitian(&sv, 1.0);
        }
        Ok(m)
    }

    /// Fourier coefficients `|k| ≤ k_max` of `M` from a grid of `points` per axis.
    pub fn to_fourier(&self, layout: std::sync::Arc<crate::basis::ClusterLayout>, torus_dim: usize, sigma: f64, points: usize, k_max: u32) -> QuasiPeriodicMatrix {
        let n = layout.n_modes();
        let samples: Vec<Block> = grid_angles(torus_dim, points)
            .par_iter()
            .map(|phi| self.eval(phi, n).expect("angle dimension"))
            .collect();
        QuasiPeriodicMatrix::from_grid(layout, torus_dim, sigma, points, &samples, k_max)
    }
}

/// Bounds for the accumulated transformation measured on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    /// `sup_φ ‖M(φ) − Id‖` on `ℓ²₀`.
    pub dev_l2: f64,
    /// The same on `ℓ²₁`.
    pub dev_h1: f64,
    /// `sup_φ ‖M M† − Id‖`.
    pub unitarity_defect: f64,
}

/// Measures `M` against the identity on the uniform grid with `points` per axis.
pub fn accumulate_transform(chain: &TransformChain, layout: &crate::basis::ClusterLayout, torus_dim: usize, points: usize) -> TransformReport {
    let n = layout.n_modes();
    let w = layout.mode_weights();
    let id = Block::identity(n, n);
    grid_angles(torus_dim, points)
        .par_iter()
        .map(|phi| {
            let m = chain.eval(phi, n).expect("angle dimension");
            let dev = &m - &id;
            TransformReport {
                dev_l2: spectral_norm(&dev),
                dev_h1: weighted_operator_norm(&dev, &w, 1.0, -1.0),
                unitarity_defect: spectral_norm(&(&m * m.adjoint() - &id)),
            }
        })
        .reduce(
            || TransformReport {
                dev_l2: 0.0,
                dev_h1: 0.0,
                unitarity_defect: 0.0,
            },
            |a, b| TransformReport {
                dev_l2: a.dev_l2.max(b.dev_l2),
                dev_h1: a.dev_h1.max(b.dev_h1),
                unitarity_defect: a.unitarity_defect.max(b.unitarity_defect),
            },
        )
}

/// `i ∫₀¹ e^{−itS}[(1−t)A + tQ, S]e^{itS} dt` at one angle, for Hermitian `S`.
/// Returns the values at `order` and `2·order` Gauss–Legendre nodes.
pub fn conjugation_integral(a: &Block, q: &Block, s: &Block, order: usize) -> (Block, Block) {
    let (lam, v) = hermitian_eigen(s);
    let ap = v.adjoint() * a * &v;
    let qp = v.adjoint() * q * &v;
    let n = lam.len();
    let integrate = |rule: &GaussLegendre| {
        let mut out = Block::zeros(n, n);
        for j in 0..n {
            for l in 0..n {
                let theta = lam[j] - lam[l];
                let (mut ia, mut iq) = (C64::from(0.0), C64::from(0.0));
                for (&t, &wt) in rule.nodes.iter().zip(&rule.weights) {
                    let ph = C64::from_polar(wt, -t * theta);
                    ia += ph * (1.0 - t);
                    iq += ph * t;
                }
                // [X, S]'_jl = X'_jl (λ_l − λ_j)
                out[(j, l)] = I * (ap[(j, l)] * ia + qp[(j, l)] * iq) * (-theta);
            }
        }
        &v * out * v.adjoint()
    };
    let lo = integrate(&GaussLegendre::unit_interval(order));
    let hi = integrate(&GaussLegendre::unit_interval(2 * order));
    (lo, hi)
}

/// Closed form of [`conjugation_integral`] using `∫₀¹ e^{−itθ} dt` and
/// `∫₀¹ t e^{−itθ} dt` exactly.
pub fn conjugation_integral_exact(a: &Block, q: &Block, s: &Block) -> Block {
    let (lam, v) = hermitian_eigen(s);
    let ap = v.adjoint() * a * &v;
    let qp = v.adjoint() * q * &v;
    let n = lam.len();
    let mut out = Block::zeros(n, n);
    for j in 0..n {
        for l in 0..n {
            let theta = lam[j] - lam[l];
            let (i0, i1) = if theta.abs() < 1e-4 {
                // series: ∫ t^p e^{−itθ} = Σ (−iθ)^r / (r! (p+r+1))
                let mut i0 = C64::from(0.0);
                let mut i1 = C64::from(0.0);
                let mut term = C64::from(1.0);
                for r in 0..12 {
                    i0 += term / (r as f64 + 1.0);
                    i1 += term / (r as f64 + 2.0);
                    term *= C64::new(0.0, -theta) / (r as f64 + 1.0);
                }
                (i0, i1)
            } else {
                let e = C64::from_polar(1.0, -theta);
                let mi = C64::new(0.0, -theta);
                let i0 = (e - 1.0) / mi;
                let i1 = (e - i0) / mi;
                (i0, i1)
            };
            let ia = i0 - i1;
            out[(j, l)] = I * (ap[(j, l)] * ia + qp[(j, l)] * i1) * (-theta);
        }
    }
    &v * out * v.adjoint()
}

/// `Q_{m+1}` from the step's pieces, on the grid of `opts.grid_points()` per
/// axis, re-expanded to `|k| ≤ k_store`. Returns also the largest entry
/// difference between the two quadrature orders.
pub fn conjugate_perturbation(
    q: &QuasiPeriodicMatrix,
    n_tilde: &BlockMatrix,
    r: &QuasiPeriodicMatrix,
    s: &QuasiPeriodicMatrix,
    points: usize,
    k_store: u32,
    gl_order: usize,
) -> Result<(QuasiPeriodicMatrix, f64), KamError> {
    let layout = q.layout().clone();
    let nt = n_tilde.to_dense();
    let results: Vec<(Block, f64)> = grid_angles(q.torus_dim(), points)
        .par_iter()
        .map(|phi| -> Result<(Block, f64), KamError> {
            let qv = q.eval_dense(phi)?;
            let rv = r.eval_dense(phi)?;
            let sv = s.eval_dense(phi)?;
            let a = &nt + &rv;
            let (lo, hi) = conjugation_integral(&a, &qv, &sv, gl_order);
            let gap = (&lo - &hi).iter().map(|z| z.norm()).fold(0.0, f64::max);
            let v = rv + lo;
            Ok(((&v + v.adjoint()) * C64::from(0.5), gap))
        })
        .collect::<Result<_, _>>()?;
    let gap = results.iter().map(|x| x.1).fold(0.0, f64::max);
    let samples: Vec<Block> = results.into_iter().map(|x| x.0).collect();
    let next = QuasiPeriodicMatrix::from_grid(layout, q.torus_dim(), q.sigma(), points, &samples, k_store).symmetrized();
    Ok((next, gap))
}

/// Snapshot after `m` completed steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KamState {
    pub m: usize,
    pub n: BlockMatrix,
    pub q: QuasiPeriodicMatrix,
    pub chain: TransformChain,
    pub history: Vec<StepRecord>,
}

impl KamState {
    pub fn initial(n0: &BlockMatrix, q0: &QuasiPeriodicMatrix) -> Self {
        KamState {
            m: 0,
            n: n0.clone(),
            q: q0.clone(),
            chain: TransformChain::identity(),
            history: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), KamError> {
        let text = serde_json::to_string(self).map_err(|e| KamError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| KamError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, KamError> {
        let err = |detail: String| KamError::Checkpoint {
            path: path.display().to_string(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KamResult {
    pub converged: bool,
    pub steps_completed: usize,
    pub n_omega: BlockMatrix,
    /// `W = N_ω − N₀`.
    pub w: BlockMatrix,
    pub chain: TransformChain,
    pub q_final: QuasiPeriodicMatrix,
    /// Measured `[Q]_β` of the final perturbation.
    pub q_final_norm: f64,
    pub history: Vec<StepRecord>,
    pub smallness: SmallnessReport,
    pub failure: Option<KamFailure>,
}

impl KamResult {
    /// The result for `Q₀ = 0`: `N_ω = N₀`, `W = 0`, `M = Id`.
    pub fn unperturbed(n0: &BlockMatrix, torus_dim: usize, sigma: f64) -> Self {
        KamResult {
            converged: true,
            steps_completed: 0,
            n_omega: n0.clone(),
            w: BlockMatrix::zeros(n0.layout().clone()),
            chain: TransformChain::identity(),
            q_final: QuasiPeriodicMatrix::zeros(n0.layout().clone(), torus_dim, sigma),
            q_final_norm: 0.0,
            history: Vec::new(),
            smallness: SmallnessReport {
                steps: Vec::new(),
                first_failure: None,
            },
            failure: None,
        }
    }

    /// `ε_{m_stop}` on the schedule, for the last perturbation.
    pub fn eps_stop(&self, schedule: &Schedule) -> f64 {
        schedule.ln_eps(self.steps_completed).exp()
    }
}

/// Runs the iteration from scratch.
pub fn kam_iterate(
    n0: &BlockMatrix,
    q0: &QuasiPeriodicMatrix,
    omega: &[f64],
    schedule: &Schedule,
    opts: &KamOptions,
) -> Result<KamResult, KamError> {
    let beta = schedule.params.beta;
    let measured = q0.strip_norm(beta, schedule.params.sigma0);
    if measured > schedule.params.eps0 * (1.0 + 1e-12) {
        return Err(KamError::InitialTooLarge {
            measured,
            eps0: schedule.params.eps0,
        });
    }
    kam_resume(n0, KamState::initial(n0, q0), omega, schedule, opts)
}

/// Continues from a state, e.g. a checkpoint.
pub fn kam_resume(
    n0: &BlockMatrix,
    mut state: KamState,
    omega: &[f64],
    schedule: &Schedule,
    opts: &KamOptions,
) -> Result<KamResult, KamError> {
    let p = schedule.params;
    let d = n0.layout().d;
    let smallness = check_smallness(schedule, d);
    if opts.mode == ScheduleMode::Strict {
        if let Some(step) = smallness.first_failure {
            let s = &smallness.steps[step - 1];
            return Err(KamError::Smallness {
                step,
                detail: format!(
                    "critical margin {:.3e}, κ ≤ γ: {}, γ ≤ 1/4: {}",
                    s.critical_margin, s.kappa_le_gamma, s.gamma_le_quarter
                ),
            });
        }
    }
    let homology_opts = HomologyOptions {
        cross_check: opts.cross_check,
    };
    let points = opts.grid_points();
    let n_modes = n0.layout().n_modes();
    let mut failure = None;

    while state.m < p.m_max {
        let started = Instant::now();
        let m = state.m;
        let sigma_m = schedule.sigma(m);
        let q_measured = state.q.strip_norm(p.beta, sigma_m);
        if q_measured < Q_FLOOR {
            break;
        }
        let step = schedule.step(m + 1);
        let k_used = step.k.min(opts.k_store as u64) as u32;
        if (step.k as u32) > opts.k_store || step.k > u32::MAX as u64 {
            log::debug!("step {}: K_m = {} capped at {}", m + 1, step.k, opts.k_store);
        }
        let kappa_used = opts.kappa_override.unwrap_or(match opts.mode {
            ScheduleMode::Strict => step.kappa,
            ScheduleMode::Desk => step.kappa.min(step.gamma),
        });
        let smallness_ok = smallness.steps[m].pass();

        let ctx = DivisorContext::from_normal_form(&state.n, omega, k_used, step.gamma, kappa_used, 2.0 * p.beta, 2.0 * p.eps0)?;
        let worst = worst_second_divisor(omega, k_used, &ctx.layout, &ctx.mu());
        if let Some(wd) = &worst {
            if wd.ratio < kappa_used {
                failure = Some(KamFailure {
                    m: m + 1,
                    divisor: worst.clone(),
                    message: format!("second Melnikov ratio {:.3e} below κ = {kappa_used:.3e}", wd.ratio),
                });
                break;
            }
        }
        let q_in = state.q.clone().with_sigma(sigma_m);
        let sol = match homological_step(&state.n, &q_in, &ctx, &homology_opts) {
            Ok(s) => s,
            Err(HomologyError::DivisorTooSmall { k, a, b, value, threshold }) => {
                failure = Some(KamFailure {
                    m: m + 1,
                    divisor: None,
                    message: format!("divisor {value:.3e} < {threshold:.3e} at k = {k:?}, ({a}, {b})"),
                });
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let n_next = state.n.add(&sol.n_tilde)?;
        let (q_next, quadrature_gap) = conjugate_perturbation(&q_in, &sol.n_tilde, &sol.r, &sol.s, points, opts.k_store, opts.gl_order)?;

        let transform_step = grid_angles(q_in.torus_dim(), points)
            .par_iter()
            .map(|phi| {
                let sv = sol.s.eval_dense(phi).expect("angle dimension");
                spectral_norm(&(expm_i_hermitian(&sv, 1.0) - Block::identity(n_modes, n_modes)))
            })
            .reduce(|| 0.0, f64::max);

        state.history.push(StepRecord {
            m,
            eps_scheduled: schedule.ln_eps(m).exp(),
            ln_eps_scheduled: schedule.ln_eps(m),
            q_measured,
            n_drift: state.n.sub(n0)?.decay_norm(p.beta).norm,
            k_scheduled: step.k,
            k_used,
            kappa: step.kappa,
            gamma: step.gamma,
            kappa_used,
            smallness_ok,
            s_plus: sol.s.strip_norm_plus(p.beta, step.sigma),
            worst_divisor: sol.worst_divisor.clone(),
            max_bound_ratio: sol.max_bound_ratio,
            solver_gap: sol.max_solver_gap,
            quadrature_gap,
            transform_step,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        state.n = n_next;
        state.q = q_next.with_sigma(step.sigma);
        state.chain.push(sol.s);
        state.m += 1;
        log::info!(
            "step {:>2}: eps {:.3e}  [Q] {:.3e}  [S]+ {:.3e}  K {}  kappa {:.3e}",
            m + 1,
            schedule.ln_eps(m).exp(),
            q_measured,
            state.history.last().unwrap().s_plus,
            k_used,
            kappa_used
        );
        if let Some(dir) = &opts.checkpoint_dir {
            state.save(&dir.join(format!("kam_state_{:02}.json", state.m)))?;
        }
    }

    let q_final_norm = state.q.strip_norm(p.beta, schedule.sigma(state.m));
    let converged = failure.is_none() && q_final_norm <= Q_FLOOR.max(schedule.ln_eps(state.m).exp());
    let w = state.n.sub(n0)?;
    Ok(KamResult {
        converged,
        steps_completed: state.m,
        n_omega: state.n,
        w,
        chain: state.chain,
        q_final: state.q,
        q_final_norm,
        history: state.history,
        smallness,
        failure,
    })
}

/// Finite-difference sensitivity of the normal form to `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomegaReport {
    pub h: f64,
    /// `|N_ω(ω+h) − N_ω(ω−h)|_β / (2h)`.
    pub dn_domega: f64,
    /// `|W(ω+h) − W(ω−h)|_β / (2h)`, a Lipschitz estimate for `W`.
    pub lipschitz_w: f64,
}

pub fn domega_derivatives(plus: &KamResult, minus: &KamResult, h: f64, beta: f64) -> Result<DomegaReport, KamError> {
    for r in [plus, minus] {
        if let Some(f) = &r.failure {
            return Err(KamError::Schedule(format!("run failed at step {}: {}", f.m, f.message)));
        }
    }
    if plus.steps_completed != minus.steps_completed {
        log::warn!(
            "runs stopped after {} and {} steps",
            plus.steps_completed,
            minus.steps_completed
        );
    }
    let dn = plus.n_omega.sub(&minus.n_omega)?.decay_norm(beta).norm / (2.0 * h);
    let dw = plus.w.sub(&minus.w)?.decay_norm(beta).norm / (2.0 * h);
    Ok(DomegaReport {
        h,
        dn_domega: dn,
        lipschitz_w: dw,
    })
}

/// Runs at `ω ± h e_axis` for every axis and reports the largest derivatives.
pub fn domega_scan(
    n0: &BlockMatrix,
    q0: &QuasiPeriodicMatrix,
    omega: &[f64],
    schedule: &Schedule,
    opts: &KamOptions,
    h: f64,
) -> Result<DomegaReport, KamError> {
    let mut best = DomegaReport {
        h,
        dn_domega: 0.0,
        lipschitz_w: 0.0,
    };
    for axis in 0..omega.len() {
        let mut wp = omega.to_vec();
        wp[axis] += h;
        let mut wm = omega.to_vec();
        wm[axis] -= h;
        let plus = kam_iterate(n0, q0, &wp, schedule, opts)?;
        let minus = kam_iterate(n0, q0, &wm, schedule, opts)?;
        let r = domega_derivatives(&plus, &minus, h, schedule.params.beta)?;
        best.dn_domega = best.dn_domega.max(r.dn_domega);
        best.lipschitz_w = best.lipschitz_w.max(r.lipschitz_w);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::enumerate_modes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn schedule_values() {
        let s = make_schedule(1e-2, 1.0, 3.0, 1.5, 4).unwrap();
        assert!((s.step(1).eps() - 10f64.powf(-2.5)).abs() < 1e-15);
        assert!((s.step(2).eps() - 10f64.powf(-3.125)).abs() < 1e-16);
        assert!((s.step(1).kappa - 0.1f64.sqrt()).abs() < 1e-15);
        assert!((C_STAR * PI * PI / 6.0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_small_beta_and_bad_eps() {
        assert!(matches!(make_schedule(1e-3, 1.0, 3.0, 1.4, 3), Err(KamError::Schedule(_))));
        assert!(make_schedule(0.0, 1.0, 3.0, 1.5, 3).is_err());
        assert!(make_schedule(1.0, 1.0, 3.0, 1.5, 3).is_err());
    }

    #[test]
    fn large_eps_fails_first_step() {
        let s = make_schedule(0.5, 1.0, 3.0, 1.5, 3).unwrap();
        assert_eq!(check_smallness(&s, 1).first_failure, Some(1));
    }

    #[test]
    fn conjugation_integral_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let herm = |rng: &mut ChaCha8Rng, n: usize, scale: f64| {
            let a = Block::from_fn(n, n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            (&a + a.adjoint()) * C64::from(0.5 * scale)
        };
        for scale in [1e-3, 0.1, 1.0] {
            let (a, q, s) = (herm(&mut rng, 6, 1.0), herm(&mut rng, 6, 1.0), herm(&mut rng, 6, scale));
            let (lo, hi) = conjugation_integral(&a, &q, &s, 8);
            let exact = conjugation_integral_exact(&a, &q, &s);
            assert!((&hi - &exact).norm() < 1e-12, "scale {scale}");
            assert!((&lo - &exact).norm() < 1e-9 * scale.max(1e-3).powi(2).max(1e-12).sqrt().max(1e-6), "scale {scale}");
        }
    }

    #[test]
    fn zero_perturbation_is_a_fixed_point() {
        let layout = Arc::new(enumerate_modes(1, 11).unwrap().layout());
        let n0 = BlockMatrix::harmonic(layout.clone());
        let q0 = QuasiPeriodicMatrix::zeros(layout, 1, 0.5);
        let s = make_schedule(1e-4, 0.5, 3.0, 1.5, 4).unwrap();
        let r = kam_iterate(&n0, &q0, &[0.7548776662466927], &s, &KamOptions::new(4)).unwrap();
        assert!(r.converged);
        assert_eq!(r.steps_completed, 0);
        assert!(r.w.is_zero());
        assert!(r.chain.is_empty());
    }

    #[test]
    fn constant_block_diagonal_perturbation_converges_in_one_step() {
        let layout = Arc::new(enumerate_modes(2, 8).unwrap().layout());
        let n0 = BlockMatrix::harmonic(layout.clone());
        let mut qd = BlockMatrix::zeros(layout.clone());
        for c in 0..layout.n_clusters() {
            let sz = layout.sizes[c];
            qd.insert(c, c, Block::from_fn(sz, sz, |i, j| C64::from(if i == j { 1e-6 } else { 2e-7 })));
        }
        let scale = 1e-4 / qd.decay_norm(2.0).norm;
        let qd = qd.scale(C64::from(scale));
        let q0 = QuasiPeriodicMatrix::constant(qd.clone(), 1, 0.5);
        let s = make_schedule(1e-4, 0.5, 4.0, 2.0, 4).unwrap();
        let r = kam_iterate(&n0, &q0, &[0.7548776662466927], &s, &KamOptions::new(4)).unwrap();
        assert!(r.converged);
        assert_eq!(r.steps_completed, 1);
        let diff = r.w.sub(&qd).unwrap().max_abs();
        assert!(diff < 4.0 * f64::EPSILON * n0.max_abs(), "diff {diff:e}");
        assert!(r.q_final.is_zero() || r.q_final_norm < 1e-18);
    }

    #[test]
    fn strict_mode_refuses_desk_scale_eps() {
        let layout = Arc::new(enumerate_modes(1, 5).unwrap().layout());
        let n0 = BlockMatrix::harmonic(layout.clone());
        let q0 = QuasiPeriodicMatrix::zeros(layout, 1, 0.5);
        let s = make_schedule(1e-4, 0.5, 3.0, 1.5, 3).unwrap();
        let mut opts = KamOptions::new(4);
        opts.mode = ScheduleMode::Strict;
        assert!(matches!(kam_iterate(&n0, &q0, &[0.75], &s, &opts), Err(KamError::Smallness { step: 1, .. })));
    }

    #[test]
    fn oversized_initial_perturbation_is_rejected() {
        let layout = Arc::new(enumerate_modes(1, 5).unwrap().layout());
        let n0 = BlockMatrix::harmonic(layout.clone());
        let q0 = QuasiPeriodicMatrix::constant(BlockMatrix::identity(layout), 1, 0.5);
        let s = make_schedule(1e-4, 0.5, 3.0, 1.5, 3).unwrap();
        assert!(matches!(
            kam_iterate(&n0, &q0, &[0.75], &s, &KamOptions::new(4)),
            Err(KamError::InitialTooLarge { .. })
        ));
    }
}
