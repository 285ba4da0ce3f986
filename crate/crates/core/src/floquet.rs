//! Direct time integration of `ξ̇ = −i(N₀ + εQ^T(ωt))ξ` and checks of the
//! reduced system against it.

use crate::blockmat::{expm_i_hermitian, hermitian_eigen, Block, BlockMatrix, SequenceVector, C64, I};
use crate::fourier::{FourierError, QuasiPeriodicMatrix};
use crate::kam::KamResult;
use crate::lattice::{dot, l1_ball};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FloquetError {
    #[error("norm drift {drift:.3e} exceeds 1e-6; reduce the step {dt}")]
    StepTooCoarse { drift: f64, dt: f64 },
    #[error("invalid integration request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fourier(#[from] FourierError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Midpoint exponential.
    Magnus2,
    /// Two-point Gauss fourth-order Magnus.
    #[default]
    Magnus4,
    /// Classical Runge–Kutta, renormalized after every step.
    Rk4Projected,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SequenceVector>,
    pub scheme: Integrator,
    pub dt: f64,
    /// `max_t |‖ξ(t)‖₀ − ‖ξ₀‖₀|`.
    pub norm_drift: f64,
}

impl Trajectory {
    pub fn last(&self) -> &SequenceVector {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// `dt = min(0.01, 0.1/W_max, 0.1/|ω|)`.
pub fn default_dt(w_max: u32, omega: &[f64]) -> f64 {
    let om = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
    let mut dt = 0.01f64.min(0.1 / w_max as f64);
    if om > 0.0 {
        dt = dt.min(0.1 / om);
    }
    dt
}

/// `H(t) = N₀ + εQ^T(ωt)` as a dense matrix.
struct Generator {
    n0: Block,
    q: QuasiPeriodicMatrix,
    eps: f64,
    omega: Vec<f64>,
}

impl Generator {
    fn new(n0: &BlockMatrix, q: &QuasiPeriodicMatrix, eps: f64, omega: &[f64]) -> Result<Self, FloquetError> {
        if omega.len() != q.torus_dim() {
            return Err(FloquetError::Invalid(format!(
                "ω has {} components, Q lives on a {}-torus",
                omega.len(),
                q.torus_dim()
            )));
        }
        if **n0.layout() != **q.layout() {
            return Err(FloquetError::Invalid("N₀ and Q use different layouts".into()));
        }
        Ok(Generator {
            n0: n0.to_dense(),
            q: q.clone(),
            eps,
            omega: omega.to_vec(),
        })
    }

    fn at(&self, t: f64) -> Block {
        if self.eps == 0.0 {
            return self.n0.clone();
        }
        let phi: Vec<f64> = self.omega.iter().map(|w| w * t).collect();
        let qt = self.q.eval_dense(&phi).expect("angle dimension checked").transpose();
        &self.n0 + qt * C64::from(self.eps)
    }

    /// One-step propagator from `t` to `t + dt`.
    fn step(&self, scheme: Integrator, t: f64, dt: f64) -> Block {
        match scheme {
            Integrator::Magnus2 => expm_i_hermitian(&self.at(t + 0.5 * dt), -dt),
            Integrator::Magnus4 => {
                let c = 3f64.sqrt() / 6.0;
                let h1 = self.at(t + (0.5 - c) * dt);
                let h2 = self.at(t + (0.5 + c) * dt);
                // Ω = −i dt (H₁+H₂)/2 + (√3/12) dt² [H₁, H₂] = −iK
                let k = (&h1 + &h2) * C64::from(0.5 * dt) + (&h1 * &h2 - &h2 * &h1) * (I * (3f64.sqrt() / 12.0 * dt * dt));
                let k = (&k + k.adjoint()) * C64::from(0.5);
                expm_i_hermitian(&k, -1.0)
            }
            Integrator::Rk4Projected => {
                let n = self.n0.nrows();
                let a = |tt: f64| self.at(tt) * (-I);
                let (a1, a2, a3) = (a(t), a(t + 0.5 * dt), a(t + dt));
                let id = Block::identity(n, n);
                let h = C64::from(dt);
                let k1 = &a1 * h;
                let k2 = &a2 * (&id + &k1 * C64::from(0.5)) * h;
                let k3 = &a2 * (&id + &k2 * C64::from(0.5)) * h;
                let k4 = &a3 * (&id + &k3) * h;
                id + (k1 + k2 * C64::from(2.0) + k3 * C64::from(2.0) + k4) * C64::from(1.0 / 6.0)
            }
        }
    }
}

fn advance(state: &DVector<C64>, prop: &Block, scheme: Integrator, target_norm: f64) -> DVector<C64> {
    let mut next = prop * state;
    if scheme == Integrator::Rk4Projected {
        let nn = next.norm();
        if nn > 0.0 {
            next *= C64::from(target_norm / nn);
        }
    }
    next
}

/// Integrates over `[0, t_end]` with step `dt`, storing every `sample_every`-th state.
#[allow(clippy::too_many_arguments)]
pub fn integrate_direct(
    n0: &BlockMatrix,
    q: &QuasiPeriodicMatrix,
    eps: f64,
    omega: &[f64],
    xi0: &SequenceVector,
    t_end: f64,
    dt: f64,
    scheme: Integrator,
    sample_every: usize,
) -> Result<Trajectory, FloquetError> {
    if !(dt > 0.0 && t_end >= 0.0) || sample_every == 0 {
        return Err(FloquetError::Invalid(format!("dt = {dt}, T = {t_end}, sample_every = {sample_every}")));
    }
    let gen = Generator::new(n0, q, eps, omega)?;
    let layout = xi0.layout().clone();
    let steps = (t_end / dt).round().max(0.0) as usize;
    let h = if steps == 0 { 0.0 } else { t_end / steps as f64 };
    let norm0 = xi0.values.norm();
    let mut state = xi0.values.clone();
    let mut times = vec![0.0];
    let mut states = vec![xi0.clone()];
    let mut drift = 0.0f64;
    // ε = 0 has a constant generator
    let fixed = (eps == 0.0 || q.is_zero()).then(|| gen.step(scheme, 0.0, h));
    for j in 0..steps {
        let t = j as f64 * h;
        let prop = match &fixed {
            Some(p) => p.clone(),
            None => gen.step(scheme, t, h),
        };
        state = advance(&state, &prop, scheme, norm0);
        drift = drift.max((state.norm() - norm0).abs());
        if (j + 1) % sample_every == 0 || j + 1 == steps {
            times.push((j + 1) as f64 * h);
            states.push(SequenceVector::new(layout.clone(), state.clone()).expect("layout size"));
        }
    }
    if drift > 1e-6 * norm0.max(1.0) {
        return Err(FloquetError::StepTooCoarse { drift, dt: h });
    }
    Ok(Trajectory {
        times,
        states,
        scheme,
        dt: h,
        norm_drift: drift,
    })
}

/// Propagators of a periodically forced system (`n = 1`) at `samples` equally
/// spaced times of one period, the last being the monodromy.
pub struct PeriodCache {
    pub period: f64,
    pub dt: f64,
    pub scheme: Integrator,
    /// `U(jP/samples)` for `j = 1..=samples`.
    pub propagators: Vec<Block>,
}

impl PeriodCache {
    pub fn new(
        n0: &BlockMatrix,
        q: &QuasiPeriodicMatrix,
        eps: f64,
        omega: f64,
        samples: usize,
        dt: f64,
        scheme: Integrator,
    ) -> Result<Self, FloquetError> {
        if q.torus_dim() != 1 || omega == 0.0 || samples == 0 {
            return Err(FloquetError::Invalid("period cache needs n = 1, ω ≠ 0 and samples ≥ 1".into()));
        }
        let gen = Generator::new(n0, q, eps, &[omega])?;
        let period = 2.0 * PI / omega.abs();
        let per_sample = ((period / samples as f64) / dt).ceil() as usize;
        let h = period / (samples * per_sample) as f64;
        let n = n0.layout().n_modes();
        let mut u = Block::identity(n, n);
        let mut propagators = Vec::with_capacity(samples);
        for s in 0..samples {
            for j in 0..per_sample {
                let t = (s * per_sample + j) as f64 * h;
                u = gen.step(scheme, t, h) * u;
            }
            propagators.push(u.clone());
        }
        Ok(PeriodCache {
            period,
            dt: h,
            scheme,
            propagators,
        })
    }

    /// Trajectory over `periods` periods sampled `samples` times per period.
    pub fn trajectory(&self, xi0: &SequenceVector, periods: usize) -> Trajectory {
        let layout = xi0.layout().clone();
        let samples = self.propagators.len();
        let monodromy = self.propagators.last().expect("samples ≥ 1");
        let norm0 = xi0.values.norm();
        let mut base = xi0.values.clone();
        let mut times = vec![0.0];
        let mut states = vec![xi0.clone()];
        let mut drift = 0.0f64;
        for p in 0..periods {
            for (s, u) in self.propagators.iter().enumerate() {
                let mut v = u * &base;
                if self.scheme == Integrator::Rk4Projected {
                    v *= C64::from(norm0 / v.norm());
                }
                drift = drift.max((v.norm() - norm0).abs());
                times.push(p as f64 * self.period + (s + 1) as f64 * self.period / samples as f64);
                states.push(SequenceVector::new(layout.clone(), v).expect("layout size"));
            }
            base = monodromy * &base;
        }
        Trajectory {
            times,
            states,
            scheme: self.scheme,
            dt: self.dt,
            norm_drift: drift,
        }
    }
}

/// Largest `‖·‖₁` difference of the end states at `dt` and `dt/2`.
#[allow(clippy::too_many_arguments)]
pub fn step_halving_gap(
    n0: &BlockMatrix,
    q: &QuasiPeriodicMatrix,
    eps: f64,
    omega: &[f64],
    xi0: &SequenceVector,
    t_end: f64,
    dt: f64,
    scheme: Integrator,
) -> Result<f64, FloquetError> {
    let a = integrate_direct(n0, q, eps, omega, xi0, t_end, dt, scheme, usize::MAX)?;
    let b = integrate_direct(n0, q, eps, omega, xi0, t_end, dt / 2.0, scheme, usize::MAX)?;
    Ok(a.last().sub(b.last()).norm(1.0))
}

/// The reduced solution `ξ(t) = conj(M(ωt)) e^{−itN^T} M^T(0) ξ₀`.
pub struct ReducedFlow<'a> {
    kam: &'a KamResult,
    omega: Vec<f64>,
    eig: Vec<f64>,
    v: Block,
    start: DVector<C64>,
}

impl<'a> ReducedFlow<'a> {
    pub fn new(kam: &'a KamResult, omega: &[f64], xi0: &SequenceVector) -> Result<Self, FloquetError> {
        let n = xi0.values.len();
        let nt = kam.n_omega.to_dense().transpose();
        let (eig, v) = hermitian_eigen(&nt);
        let m0 = kam.chain.eval(&vec![0.0; omega.len()], n)?;
        let start = v.adjoint() * (m0.transpose() * &xi0.values);
        Ok(ReducedFlow {
            kam,
            omega: omega.to_vec(),
            eig,
            v,
            start,
        })
    }

    pub fn at(&self, t: f64) -> Result<DVector<C64>, FloquetError> {
        let n = self.start.len();
        let phase = DVector::from_fn(n, |j, _| self.start[j] * C64::from_polar(1.0, -t * self.eig[j]));
        let phi: Vec<f64> = self.omega.iter().map(|w| w * t).collect();
        let m = self.kam.chain.eval(&phi, n)?;
        Ok(m.map(|z| z.conj()) * (&self.v * phase))
    }
}

/// `‖ξ_direct(t) − ξ_reduced(t)‖₁` at every stored time.
pub fn conjugacy_errors(kam: &KamResult, direct: &Trajectory, omega: &[f64]) -> Result<Vec<f64>, FloquetError> {
    let flow = ReducedFlow::new(kam, omega, &direct.states[0])?;
    direct
        .times
        .par_iter()
        .zip(direct.states.par_iter())
        .map(|(&t, x)| {
            let red = SequenceVector::new(x.layout().clone(), flow.at(t)?).expect("layout size");
            Ok(x.sub(&red).norm(1.0))
        })
        .collect()
}

pub fn conjugacy_error(kam: &KamResult, direct: &Trajectory, omega: &[f64]) -> Result<f64, FloquetError> {
    Ok(conjugacy_errors(kam, direct, omega)?.into_iter().fold(0.0, f64::max))
}

/// Extremal ratios `‖ξ(t)‖_s / ‖ξ₀‖_s` along the trajectory.
pub fn sobolev_monitor(traj: &Trajectory, s: f64) -> (f64, f64) {
    let n0 = traj.states[0].norm(s);
    if n0 == 0.0 {
        return (1.0, 1.0);
    }
    traj.states.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), x| {
        let r = x.norm(s) / n0;
        (lo.min(r), hi.max(r))
    })
}

/// `{μ_a + k·ω}` for the block eigenvalues `μ_a` of `N_ω` and `|k| ≤ k_range`, sorted.
pub fn quasi_energies(n_omega: &BlockMatrix, omega: &[f64], k_range: u32) -> Vec<f64> {
    let layout = n_omega.layout();
    let mut mu = Vec::with_capacity(layout.n_modes());
    for c in 0..layout.n_clusters() {
        mu.extend(hermitian_eigen(&n_omega.block_or_zero(c, c)).0);
    }
    let shifts: Vec<f64> = l1_ball(omega.len(), k_range).iter().map(|k| dot(k, omega)).collect();
    let mut out: Vec<f64> = mu.iter().flat_map(|m| shifts.iter().map(move |s| m + s)).collect();
    out.sort_by(f64::total_cmp);
    out
}

/// One row of the trajectory table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub norm_l2: f64,
    pub norm_h1: f64,
    pub conjugacy_error: Option<f64>,
}

pub fn trajectory_rows(traj: &Trajectory, errors: Option<&[f64]>) -> Vec<TrajectoryRow> {
    traj.times
        .iter()
        .zip(&traj.states)
        .enumerate()
        .map(|(i, (&t, x))| TrajectoryRow {
            t,
            norm_l2: x.norm(0.0),
            norm_h1: x.norm(1.0),
            conjugacy_error: errors.map(|e| e[i]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::enumerate_modes;
    use crate::kam::{kam_iterate, make_schedule, KamOptions};
    use std::sync::Arc;

    fn setup(w_max: u32) -> (Arc<crate::basis::ClusterLayout>, BlockMatrix, SequenceVector) {
        let layout = Arc::new(enumerate_modes(1, w_max).unwrap().layout());
        let n0 = BlockMatrix::harmonic(layout.clone());
        let n = layout.n_modes();
        let xi0 = SequenceVector::new(layout.clone(), DVector::from_fn(n, |i, _| C64::new(1.0 / (1.0 + i as f64), 0.3 / (2.0 + i as f64)))).unwrap();
        (layout, n0, xi0)
    }

    fn cos_q(layout: Arc<crate::basis::ClusterLayout>, amp: f64) -> QuasiPeriodicMatrix {
        let n = layout.n_modes();
        let coupling = Block::from_fn(n, n, |i, j| C64::from(amp / (1.0 + (i as f64 - j as f64).abs()).powi(2)));
        let b = BlockMatrix::from_dense(layout.clone(), &coupling);
        let mut q = QuasiPeriodicMatrix::zeros(layout, 1, 1.0);
        q.set(vec![1], b.clone());
        q.set(vec![-1], b);
        q
    }

    #[test]
    fn free_evolution_is_diagonal_phase() {
        let (layout, n0, xi0) = setup(9);
        let q = QuasiPeriodicMatrix::zeros(layout.clone(), 1, 1.0);
        let tr = integrate_direct(&n0, &q, 0.0, &[0.7], &xi0, 3.0, 0.01, Integrator::Magnus2, 100).unwrap();
        let w = layout.mode_weights();
        for (t, x) in tr.times.iter().zip(&tr.states) {
            for i in 0..w.len() {
                let exact = xi0.values[i] * C64::from_polar(1.0, -w[i] * t);
                assert!((x.values[i] - exact).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn integrators_agree_and_conserve_norm() {
        let (layout, n0, xi0) = setup(9);
        let q = cos_q(layout, 0.3);
        let w = [0.7548776662466927];
        let m2 = integrate_direct(&n0, &q, 0.1, &w, &xi0, 10.0, 0.0005, Integrator::Magnus2, 1000).unwrap();
        let m4 = integrate_direct(&n0, &q, 0.1, &w, &xi0, 10.0, 0.005, Integrator::Magnus4, 100).unwrap();
        let rk = integrate_direct(&n0, &q, 0.1, &w, &xi0, 10.0, 0.001, Integrator::Rk4Projected, 500).unwrap();
        assert!(m2.last().sub(m4.last()).norm(0.0) < 1e-6);
        assert!(rk.last().sub(m4.last()).norm(0.0) < 1e-7);
        assert!(m4.norm_drift < 1e-12);
    }

    #[test]
    fn period_cache_matches_direct_integration() {
        let (layout, n0, xi0) = setup(7);
        let q = cos_q(layout, 0.2);
        let omega = 1.3;
        let cache = PeriodCache::new(&n0, &q, 0.05, omega, 8, 0.005, Integrator::Magnus4).unwrap();
        let tr = cache.trajectory(&xi0, 3);
        let t_end = *tr.times.last().unwrap();
        let direct = integrate_direct(&n0, &q, 0.05, &[omega], &xi0, t_end, cache.dt, Integrator::Magnus4, usize::MAX).unwrap();
        assert!(tr.last().sub(direct.last()).norm(0.0) < 1e-10);
    }

    #[test]
    fn block_diagonal_constant_forcing_is_reduced_exactly() {
        let (layout, n0, xi0) = setup(7);
        let mut qd = BlockMatrix::zeros(layout.clone());
        for c in 0..layout.n_clusters() {
            qd.insert(c, c, Block::from_element(1, 1, C64::from(1e-5 * (c as f64 + 1.0))));
        }
        let q0 = QuasiPeriodicMatrix::constant(qd, 1, 0.5);
        let s = make_schedule(1e-2, 0.5, 3.0, 1.5, 3).unwrap();
        let kam = kam_iterate(&n0, &q0, &[0.75], &s, &KamOptions::new(2)).unwrap();
        assert!(kam.converged && kam.steps_completed == 1);
        let tr = integrate_direct(&n0, &q0, 1.0, &[0.75], &xi0, 20.0, 0.01, Integrator::Magnus4, 50).unwrap();
        let err = conjugacy_error(&kam, &tr, &[0.75]).unwrap();
        assert!(err < 1e-10, "{err:e}");
    }

    #[test]
    fn quasi_energies_unperturbed_lattice() {
        let (layout, n0, _) = setup(5);
        let e = quasi_energies(&n0, &[0.5], 2);
        assert_eq!(e.len(), layout.n_modes() * 5);
        assert!((e[0] - 0.0).abs() < 1e-12);
        assert!(e.iter().any(|x| (x - 5.5).abs() < 1e-12));
    }

    #[test]
    fn sobolev_ratios_are_one_without_forcing() {
        let (layout, n0, xi0) = setup(9);
        let q = QuasiPeriodicMatrix::zeros(layout, 1, 1.0);
        let tr = integrate_direct(&n0, &q, 0.0, &[0.7], &xi0, 5.0, 0.01, Integrator::Magnus4, 10).unwrap();
        let (lo, hi) = sobolev_monitor(&tr, 1.0);
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }
}
