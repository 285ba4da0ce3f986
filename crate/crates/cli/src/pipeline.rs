//! The pipeline stages behind each subcommand.

use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use qho_kam::basis::{enumerate_modes, BasisTruncation, ClusterLayout};
use qho_kam::blockmat::{BlockMatrix, SequenceVector, C64};
use qho_kam::floquet::{
    conjugacy_errors, default_dt, integrate_direct, quasi_energies, sobolev_monitor, trajectory_rows, PeriodCache, TrajectoryRow,
};
use qho_kam::kam::{accumulate_transform, kam_iterate, kam_resume, make_schedule, KamFailure, KamOptions, KamResult, KamState, Schedule, TransformReport};
use qho_kam::melnikov::{screen_omega, worst_first_divisor, Divisor, Frequencies, ScreenReport};
use qho_kam::potential::{assemble_q, verify_key_decay, AssembleOptions, DecayReport, QuasiPeriodicMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Assembled operators for one configuration.
pub struct Problem {
    pub config: RunConfig,
    pub basis: BasisTruncation,
    pub layout: Arc<ClusterLayout>,
    pub n0: BlockMatrix,
    /// `Q` as assembled, before rescaling.
    pub q: QuasiPeriodicMatrix,
    /// `Q₀ = scale · Q` with `[Q₀]_β^{σ₀} = ε₀`.
    pub q0: QuasiPeriodicMatrix,
    pub scale: f64,
}

impl Problem {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let basis = enumerate_modes(config.potential.dimension, config.basis.w_max)?;
        let layout = Arc::new(basis.layout());
        let opts = AssembleOptions {
            rule: config.basis.quad_rule,
            quad_order: config.basis.quad_order,
            k_store: Some(config.k_store()),
            check_convergence: true,
        };
        let q = assemble_q(&config.potential, &basis, &opts).context("assembling Q")?;
        let norm = q.strip_norm(config.schedule.beta, config.sigma0());
        let scale = if config.schedule.eps0 == 0.0 || norm == 0.0 {
            0.0
        } else {
            config.schedule.eps0 / norm
        };
        let q0 = if scale == 0.0 {
            QuasiPeriodicMatrix::zeros(layout.clone(), config.torus_dim(), config.sigma0())
        } else {
            q.scale(C64::from(scale)).with_sigma(config.sigma0())
        };
        Ok(Problem {
            n0: BlockMatrix::harmonic(layout.clone()),
            config,
            basis,
            layout,
            q,
            q0,
            scale,
        })
    }

    pub fn schedule(&self) -> Result<Option<Schedule>> {
        let s = &self.config.schedule;
        if s.eps0 == 0.0 {
            return Ok(None);
        }
        Ok(Some(make_schedule(s.eps0, self.config.sigma0(), self.config.alpha(), s.beta, s.m_max)?))
    }

    pub fn kam_options(&self, checkpoint_dir: Option<PathBuf>) -> KamOptions {
        let s = &self.config.schedule;
        let mut opts = KamOptions::new(self.config.k_store());
        opts.mode = s.mode;
        opts.kappa_override = s.kappa_override;
        opts.checkpoint_dir = checkpoint_dir;
        opts
    }

    /// Seeded initial state, decaying across modes and normalized in `ℓ²`.
    pub fn initial_state(&self) -> SequenceVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let n = self.layout.n_modes();
        let mut v = DVector::from_fn(n, |i, _| {
            let decay = (-0.5 * i as f64).exp();
            C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * decay
        });
        let norm = v.norm();
        v /= C64::from(norm);
        SequenceVector::new(self.layout.clone(), v).expect("sized from the layout")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembleSummary {
    pub n_modes: usize,
    pub n_clusters: usize,
    pub n_coefficients: usize,
    /// `[Q]_β^{σ₀}` before rescaling.
    pub strip_norm: f64,
    pub scale: f64,
    pub key_decay: DecayReport,
}

pub fn assemble(p: &Problem) -> AssembleSummary {
    AssembleSummary {
        n_modes: p.layout.n_modes(),
        n_clusters: p.layout.n_clusters(),
        n_coefficients: p.q.n_coefficients(),
        strip_norm: p.q.strip_norm(p.config.schedule.beta, p.config.sigma0()),
        scale: p.scale,
        key_decay: verify_key_decay(&p.q, p.config.potential.iota),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRow {
    pub omega: Vec<f64>,
    pub worst: Option<Divisor>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenSummary {
    pub points_per_axis: usize,
    pub total_points: usize,
    pub k_max: u32,
    pub gamma: f64,
    pub excluded_fraction: f64,
}

/// First-Melnikov screen on a midpoint grid of `[0, 2π)ⁿ`.
pub fn screen(p: &Problem, points: usize) -> (ScreenSummary, Vec<ScreenRow>) {
    let n = p.config.torus_dim();
    let per_axis = if n == 1 {
        points
    } else {
        ((points as f64).powf(1.0 / n as f64).round() as usize).max(1)
    };
    let k_max = p.config.screen.k_max.unwrap_or(p.config.k_store());
    let gamma = p.config.screen.gamma;
    let axis = qho_kam::melnikov::grid_axis(per_axis);
    let total = per_axis.pow(n as u32);
    let rows: Vec<ScreenRow> = (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let mut omega = vec![0.0; n];
            for slot in omega.iter_mut().rev() {
                *slot = axis[idx % per_axis];
                idx /= per_axis;
            }
            let worst = worst_first_divisor(&omega, k_max, &p.layout, &Frequencies::Harmonic);
            let pass = worst.as_ref().is_none_or(|d| d.ratio >= gamma);
            ScreenRow { omega, worst, pass }
        })
        .collect();
    let failed = rows.iter().filter(|r| !r.pass).count();
    (
        ScreenSummary {
            points_per_axis: per_axis,
            total_points: total,
            k_max,
            gamma,
            excluded_fraction: failed as f64 / total as f64,
        },
        rows,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub m: usize,
    pub eps_scheduled: f64,
    pub q_measured: f64,
    pub s_plus: f64,
    pub worst_divisor: Option<f64>,
    pub k_scheduled: u64,
    pub k_used: u32,
    pub gamma: f64,
    pub kappa: f64,
    pub kappa_used: f64,
    pub smallness_ok: bool,
    pub transform_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceSummary {
    pub converged: bool,
    pub steps_completed: usize,
    pub failure: Option<KamFailure>,
    /// First-Melnikov check at `ω` with the first step's `K` and `2γ₁` (or the configured γ).
    pub omega_screen: Option<ScreenReport>,
    pub smallness_first_failure: Option<usize>,
    /// `|W|_β`.
    pub w_norm: f64,
    pub w_bound: f64,
    pub transform: TransformReport,
    /// `ε₀^{5/12}`.
    pub transform_bound: f64,
    pub q_final_norm: f64,
    pub history: Vec<HistoryRow>,
}

/// A reduction tied to the configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredReduction {
    pub config: RunConfig,
    pub result: KamResult,
}

pub const RESULT_FILE: &str = "kam_result.json";

pub fn reduce(p: &Problem, resume: Option<KamState>, checkpoint_dir: Option<PathBuf>) -> Result<(KamResult, ReduceSummary)> {
    let omega = &p.config.frequency.omega;
    let Some(schedule) = p.schedule()? else {
        let result = KamResult::unperturbed(&p.n0, p.config.torus_dim(), p.config.sigma0());
        let summary = summarize_reduction(p, &result, None);
        return Ok((result, summary));
    };
    let opts = p.kam_options(checkpoint_dir);
    let result = match resume {
        Some(state) => {
            if **state.n.layout() != *p.layout {
                bail!("checkpoint was written for a different truncation");
            }
            kam_resume(&p.n0, state, omega, &schedule, &opts)?
        }
        None => kam_iterate(&p.n0, &p.q0, omega, &schedule, &opts)?,
    };
    let summary = summarize_reduction(p, &result, Some(&schedule));
    Ok((result, summary))
}

fn summarize_reduction(p: &Problem, result: &KamResult, schedule: Option<&Schedule>) -> ReduceSummary {
    let eps0 = p.config.schedule.eps0;
    let beta = p.config.schedule.beta;
    let omega_screen = schedule.map(|s| {
        let step = s.step(1);
        let k = step.k.min(p.config.k_store() as u64) as u32;
        let gamma = p.config.frequency.gamma.unwrap_or(2.0 * step.gamma);
        screen_omega(&p.config.frequency.omega, k, gamma, &p.layout, &Frequencies::Harmonic).expect("γ is positive")
    });
    let points = 4 * p.config.k_store() as usize + 1;
    ReduceSummary {
        converged: result.converged,
        steps_completed: result.steps_completed,
        failure: result.failure.clone(),
        omega_screen,
        smallness_first_failure: result.smallness.first_failure,
        w_norm: result.w.decay_norm(beta).norm,
        w_bound: 2.0 * eps0,
        transform: accumulate_transform(&result.chain, &p.layout, p.config.torus_dim(), points),
        transform_bound: eps0.powf(5.0 / 12.0),
        q_final_norm: result.q_final_norm,
        history: result
            .history
            .iter()
            .map(|h| HistoryRow {
                m: h.m,
                eps_scheduled: h.eps_scheduled,
                q_measured: h.q_measured,
                s_plus: h.s_plus,
                worst_divisor: h.worst_divisor.as_ref().map(|d| d.ratio),
                k_scheduled: h.k_scheduled,
                k_used: h.k_used,
                gamma: h.gamma,
                kappa: h.kappa,
                kappa_used: h.kappa_used,
                smallness_ok: h.smallness_ok,
                transform_step: h.transform_step,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub dt: f64,
    pub conjugacy_horizon: f64,
    /// `sup_t ‖ξ_direct(t) − ξ_reduced(t)‖₁`.
    pub conjugacy_error: f64,
    pub l2_drift: f64,
    pub sobolev_horizon: f64,
    pub sobolev_min: f64,
    pub sobolev_max: f64,
    /// `max_a ‖W_[a]^[a]‖ (1 + ln w_a)^{2ι} / ε₀`, zero when `ε₀ = 0`.
    pub w_block_constant: f64,
    pub quasi_energy_count: usize,
}

pub struct Verification {
    pub summary: VerifySummary,
    pub trajectory: Vec<TrajectoryRow>,
    pub quasi_energies: Vec<f64>,
}

pub fn verify(p: &Problem, result: &KamResult) -> Result<Verification> {
    let omega = &p.config.frequency.omega;
    let v = &p.config.verify;
    let dt = v.dt.unwrap_or_else(|| default_dt(p.config.basis.w_max, omega));
    let xi0 = p.initial_state();
    let direct = integrate_direct(&p.n0, &p.q0, 1.0, omega, &xi0, v.t_conjugacy, dt, v.integrator, v.sample_every)?;
    let errors = conjugacy_errors(result, &direct, omega)?;
    let conjugacy_error = errors.iter().copied().fold(0.0, f64::max);
    let trajectory = trajectory_rows(&direct, Some(&errors));

    let long = if omega.len() == 1 && omega[0] != 0.0 {
        let cache = PeriodCache::new(&p.n0, &p.q0, 1.0, omega[0], 8, dt, v.integrator)?;
        let periods = (v.t_sobolev / cache.period).ceil() as usize;
        cache.trajectory(&xi0, periods)
    } else {
        integrate_direct(&p.n0, &p.q0, 1.0, omega, &xi0, v.t_sobolev, dt, v.integrator, v.sample_every)?
    };
    let (sobolev_min, sobolev_max) = sobolev_monitor(&long, 1.0);

    let eps0 = p.config.schedule.eps0;
    let two_iota = 2.0 * p.config.potential.iota;
    let w_block_constant = if eps0 == 0.0 {
        0.0
    } else {
        (0..p.layout.n_clusters())
            .map(|c| {
                let w = p.layout.weight(c);
                qho_kam::blockmat::spectral_norm(&result.w.block_or_zero(c, c)) * (1.0 + w.ln()).powf(two_iota) / eps0
            })
            .fold(0.0, f64::max)
    };
    let quasi_energies = quasi_energies(&result.n_omega, omega, v.quasi_energy_range);
    Ok(Verification {
        summary: VerifySummary {
            dt: direct.dt,
            conjugacy_horizon: v.t_conjugacy,
            conjugacy_error,
            l2_drift: direct.norm_drift.max(long.norm_drift),
            sobolev_horizon: v.t_sobolev,
            sobolev_min,
            sobolev_max,
            w_block_constant,
            quasi_energy_count: quasi_energies.len(),
        },
        trajectory,
        quasi_energies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    /// The resolved configuration that produced this report.
    pub config: RunConfig,
    pub assemble: Option<AssembleSummary>,
    pub screen: Option<ScreenSummary>,
    pub reduce: Option<ReduceSummary>,
    pub verify: Option<VerifySummary>,
}

impl Report {
    pub fn new(command: &str, p: &Problem) -> Self {
        Report {
            command: command.into(),
            config: p.config.clone(),
            assemble: None,
            screen: None,
            reduce: None,
            verify: None,
        }
    }

    /// Plain-text table of the headline numbers.
    pub fn render(&self) -> String {
        let mut out = format!("command: {}\n", self.command);
        let mut line = |k: &str, v: String| out.push_str(&format!("  {k:<28} {v}\n"));
        if let Some(a) = &self.assemble {
            line("modes / clusters", format!("{} / {}", a.n_modes, a.n_clusters));
            line("[Q]_beta (unscaled)", format!("{:.4e}", a.strip_norm));
            line("key-decay sup", format!("{:.4e}", a.key_decay.sup));
        }
        if let Some(s) = &self.screen {
            line("screen points", s.total_points.to_string());
            line("excluded fraction", format!("{:.4e}", s.excluded_fraction));
        }
        if let Some(r) = &self.reduce {
            line("converged", r.converged.to_string());
            line("steps", r.steps_completed.to_string());
            line("|W|_beta (bound)", format!("{:.4e} ({:.4e})", r.w_norm, r.w_bound));
            line(
                "|M - Id| l2_0 / l2_1 (bound)",
                format!("{:.4e} / {:.4e} ({:.4e})", r.transform.dev_l2, r.transform.dev_h1, r.transform_bound),
            );
            line("final [Q]_beta", format!("{:.4e}", r.q_final_norm));
            if let Some(f) = &r.failure {
                line("failure", format!("step {}: {}", f.m, f.message));
            }
        }
        if let Some(v) = &self.verify {
            line("conjugacy error", format!("{:.4e}", v.conjugacy_error));
            line("H1 ratio range", format!("[{:.6}, {:.6}]", v.sobolev_min, v.sobolev_max));
            line("L2 drift", format!("{:.3e}", v.l2_drift));
        }
        out
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_screen_csv(path: &Path, rows: &[ScreenRow], torus_dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=torus_dim).map(|j| format!("omega_{j}")).collect();
    header.extend(["worst_ratio", "k", "a", "b", "pass"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.omega.iter().map(|x| x.to_string()).collect();
        match &r.worst {
            Some(d) => {
                rec.push(d.ratio.to_string());
                rec.push(d.k.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"));
                rec.push(d.a.to_string());
                rec.push(d.b.to_string());
            }
            None => rec.extend(["", "", "", ""].map(String::from)),
        }
        rec.push(r.pass.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
