//! One pass/fail line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) and exits non-zero if any criterion fails.

use nalgebra::DVector;
use qho_kam::basis::{enumerate_modes, ClusterLayout};
use qho_kam::blockmat::{expm_i_hermitian, spectral_norm, structure_constants, Block, BlockMatrix, SequenceVector, C64};
use qho_kam::floquet::{conjugacy_error, sobolev_monitor, Integrator, PeriodCache};
use qho_kam::fourier::QuasiPeriodicMatrix;
use qho_kam::homology::{homological_step, residual, DivisorContext, HomologyOptions};
use qho_kam::kam::{
    accumulate_transform, kam_iterate, make_schedule, smallness_margins, KamOptions, KamResult, C_STAR,
};
use qho_kam::lattice::l1_ball;
use qho_kam::melnikov::{measure_estimate, worst_first_divisor, worst_second_divisor, Frequencies};
use qho_kam::potential::{assemble_q, key_decay_sweep, AssembleOptions, PotentialSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::Instant;

type Outcome = Result<String, String>;

/// Screened frequency for the `d = 1`, `W_max = 41`, `K = 12` runs.
const OMEGA: f64 = 0.6275;
const BETA: f64 = 1.5;

/// Sup of `‖W_[a]^[a]‖ (1+ln w_a)^{2ι} / ε₀`, fitted on the reference run
/// (`ε₀ = 1e−4`, `W_max = 41`) and frozen with 25% headroom.
const W_BLOCK_CONSTANT: f64 = 0.31;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn harmonic_setup(w_max: u32) -> (Arc<ClusterLayout>, BlockMatrix) {
    let layout = Arc::new(enumerate_modes(1, w_max).unwrap().layout());
    let n0 = BlockMatrix::harmonic(layout.clone());
    (layout, n0)
}

fn assembled(spec: &PotentialSpec, w_max: u32) -> QuasiPeriodicMatrix {
    let basis = enumerate_modes(spec.dimension, w_max).unwrap();
    assemble_q(spec, &basis, &AssembleOptions::default()).unwrap()
}

/// `Q` rescaled so that `[Q]_β^σ = ε₀`.
fn normalized(q: &QuasiPeriodicMatrix, eps0: f64, sigma: f64) -> QuasiPeriodicMatrix {
    q.scale(C64::from(eps0 / q.strip_norm(BETA, sigma)))
}

fn reference_spec() -> PotentialSpec {
    PotentialSpec::exponential_harmonics(1, 1.5, 1.0, 1, 12, 1.0)
}

fn reference_run(eps0: f64, w_max: u32) -> (Arc<ClusterLayout>, KamResult, f64) {
    let spec = reference_spec();
    let (layout, n0) = harmonic_setup(w_max);
    let q0 = normalized(&assembled(&spec, w_max), eps0, spec.sigma);
    let schedule = make_schedule(eps0, spec.sigma, 3.0, BETA, 6).unwrap();
    let start = Instant::now();
    let r = kam_iterate(&n0, &q0, &[OMEGA], &schedule, &KamOptions::new(12)).unwrap();
    (layout, r, start.elapsed().as_secs_f64())
}

fn c1_homological_residual() -> Outcome {
    let start = Instant::now();
    let spec = reference_spec();
    let (layout, n0) = harmonic_setup(41);
    let q = assembled(&spec, 41);
    let gamma = worst_first_divisor(&[OMEGA], 12, &layout, &Frequencies::Harmonic).unwrap().ratio;
    let mu: Vec<Vec<f64>> = (0..layout.n_clusters()).map(|c| vec![layout.weight(c)]).collect();
    let kappa = worst_second_divisor(&[OMEGA], 12, &layout, &mu).unwrap().ratio;
    let ctx = DivisorContext::from_normal_form(&n0, &[OMEGA], 12, gamma, kappa, 2.0 * BETA, 0.0).unwrap();
    let sol = homological_step(&n0, &q, &ctx, &HomologyOptions { cross_check: true }).unwrap();
    let res = residual(&sol, &n0, &q, &[OMEGA]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        res <= 1e-10 && secs < 10.0,
        format!(
            "residual {res:.2e} (≤ 1e-10), solver gap {:.1e}, {secs:.2} s (< 10 s)",
            sol.max_solver_gap.unwrap_or(0.0)
        ),
    )
}

/// Largest `‖Ŝ(k)_ab‖ (1+|w_a−w_b|) / ‖Â(k)_ab‖` relative to `1/κ`, recomputed
/// from the solution blocks.
fn bound_excess(sol_s: &QuasiPeriodicMatrix, q: &QuasiPeriodicMatrix, bound: impl Fn(usize, usize) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, s) in sol_s.iter() {
        let qk = q.coefficient_or_zero(k);
        for (&(a, b), blk) in s.blocks() {
            let allowed = bound(a, b) * qk.block_norm(a, b);
            let got = spectral_norm(blk);
            if got > 0.0 {
                worst = worst.max(got / allowed);
            }
        }
    }
    worst
}

fn c2_division_bound() -> Outcome {
    // d = 1: perturbed normal form, κ the exact worst second divisor ratio.
    let spec = reference_spec();
    let (layout, _) = harmonic_setup(41);
    let shifts: Vec<f64> = (0..layout.n_clusters())
        .map(|c| layout.weight(c) + 1e-3 * (c as f64).sin() / (1.0 + layout.weight(c)).ln().powi(3))
        .collect();
    let n = BlockMatrix::cluster_diagonal(layout.clone(), &shifts);
    // The solver relies on Q̂(−k) = Q̂(k)† exactly; quadrature leaves ~1e−21 asymmetry.
    let q = assembled(&spec, 41).symmetrized();
    let mu: Vec<Vec<f64>> = shifts.iter().map(|&m| vec![m]).collect();
    let gamma = worst_first_divisor(&[OMEGA], 12, &layout, &Frequencies::Harmonic).unwrap().ratio;
    let kappa = worst_second_divisor(&[OMEGA], 12, &layout, &mu).unwrap().ratio;
    let ctx = DivisorContext::from_normal_form(&n, &[OMEGA], 12, gamma, kappa, 2.0 * BETA, 0.0).unwrap();
    let sol = homological_step(&n, &q, &ctx, &HomologyOptions { cross_check: false }).unwrap();
    let d1 = bound_excess(&sol.s, &q, |a, b| 1.0 / (kappa * (1.0 + layout.gap(a, b))));

    // d = 2: random screened instances against the bound with C_{δ,d}.
    let (c0, delta) = (2e-3, 3.0);
    let layout2 = Arc::new(enumerate_modes(2, 8).unwrap().layout());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut d2: f64 = 0.0;
    for _ in 0..1000 {
        let (omega, gamma) = loop {
            let w = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let r = worst_first_divisor(&[w], 3, &layout2, &Frequencies::Harmonic).unwrap().ratio;
            if r >= 1e-3 {
                break (w, r.min(1e-3));
            }
        };
        let mut n = BlockMatrix::harmonic(layout2.clone());
        for c in 0..layout2.n_clusters() {
            let size = layout2.sizes[c];
            let g = random_block(&mut rng, size, size);
            let h = (&g + g.adjoint()) * C64::from(0.5);
            let scale = c0 * layout2.weight(c).powf(-delta) / 2.0 / spectral_norm(&h).max(1e-300);
            let blk = n.block_or_zero(c, c) + h * C64::from(scale);
            n.insert(c, c, blk);
        }
        let q = random_quasi_periodic(&mut rng, &layout2, 3);
        let probe = DivisorContext::from_normal_form(&n, &[omega], 3, gamma, 1.0, delta, c0).unwrap();
        let second = worst_second_divisor(&[omega], 3, &layout2, &probe.mu()).unwrap().ratio;
        let ctx = DivisorContext { kappa: gamma.min(second), ..probe };
        let sol = homological_step(&n, &q, &ctx, &HomologyOptions { cross_check: false }).unwrap();
        d2 = d2.max(bound_excess(&sol.s, &q, |a, b| ctx.division_bound(a, b)));
    }
    ensure(
        d1 <= 1.0 + 1e-12 && d2 <= 1.0 + 1e-12,
        format!("d=1 max ‖B‖/bound {d1:.12}, d=2 over 1000 instances {d2:.6}"),
    )
}

fn random_block(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Block {
    Block::from_fn(r, c, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

/// Random `Q` with `Q̂(−k) = Q̂(k)†` and decaying blocks.
fn random_quasi_periodic(rng: &mut ChaCha8Rng, layout: &Arc<ClusterLayout>, k_max: u32) -> QuasiPeriodicMatrix {
    let mut q = QuasiPeriodicMatrix::zeros(layout.clone(), 1, 1.0);
    for k in l1_ball(1, k_max) {
        if k[0] < 0 {
            continue;
        }
        let mut m = BlockMatrix::zeros(layout.clone());
        for a in 0..layout.n_clusters() {
            for b in 0..layout.n_clusters() {
                let decay = (-(k[0] as f64)).exp() / (1.0 + layout.gap(a, b));
                let blk = random_block(rng, layout.sizes[a], layout.sizes[b]) * C64::from(decay);
                m.insert(a, b, blk);
            }
        }
        if k[0] == 0 {
            m = m.hermitian_part();
        } else {
            q.set(vec![-k[0]], m.adjoint());
        }
        q.set(k, m);
    }
    q
}

fn c3_superexponential_decay() -> Outcome {
    let eps0: f64 = 1e-4;
    let (_, r, secs) = reference_run(eps0, 41);
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for h in &r.history {
        let target = eps0.powf(1.25f64.powi(h.m as i32));
        worst = worst.max(h.q_measured / target);
        detail.push(format!("m={} {:.1e}≤{:.1e}", h.m, h.q_measured, target));
    }
    let m_stop = r.steps_completed as i32;
    let final_target = eps0.powf(1.25f64.powi(m_stop));
    worst = worst.max(r.q_final_norm / final_target);
    // Q₀ is normalized to ε₀ exactly, up to rounding.
    let worst = worst / (1.0 + 1e-12);
    detail.push(format!("m={m_stop} {:.1e}≤{:.1e}", r.q_final_norm, final_target));
    ensure(
        r.converged && worst <= 1.0 && secs < 300.0,
        format!("{}; {secs:.1} s", detail.join(", ")),
    )
}

/// `sup_a ‖W_[a]^[a]‖ (1+ln w_a)^{2ι} / ε₀`.
fn w_block_constant(layout: &ClusterLayout, r: &KamResult, eps0: f64, iota: f64) -> f64 {
    (0..layout.n_clusters())
        .map(|a| r.w.block_norm(a, a) * layout.log_weight(a, 2.0 * iota) / eps0)
        .fold(0.0, f64::max)
}

fn c4_transformation_bound() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (eps0, w_max) in [(1e-4, 41), (1e-5, 41), (1e-4, 61)] {
        let (layout, r, _) = reference_run(eps0, w_max);
        let t = accumulate_transform(&r.chain, &layout, 1, 49);
        let w = r.w.decay_norm(BETA).norm;
        let c = w_block_constant(&layout, &r, eps0, 1.5);
        let bound = eps0.powf(5.0 / 12.0);
        ok &= r.converged && t.dev_l2 <= bound && t.dev_h1 <= bound && w <= 2.0 * eps0 && c <= W_BLOCK_CONSTANT;
        lines.push(format!(
            "ε₀={eps0:.0e} W={w_max}: ‖M−Id‖ {:.1e}/{:.1e} ≤ {bound:.1e}, |W|_β {w:.1e}, C {c:.3}",
            t.dev_l2, t.dev_h1
        ));
    }
    ensure(ok, format!("{} (frozen C {W_BLOCK_CONSTANT})", lines.join("; ")))
}

fn c5_conjugacy_oracle() -> Outcome {
    // Large ε₀ and a forced κ so that three steps leave a visible error.
    let (eps0, omega, kappa) = (0.3, 4.005, 1e-5);
    let spec = PotentialSpec::cosine(1, 1.5, 1.0, 1, 0);
    let (layout, n0) = harmonic_setup(41);
    let q0 = normalized(&assembled(&spec, 41), eps0, spec.sigma);
    let n = layout.n_modes();
    let xi0 = SequenceVector::new(
        layout.clone(),
        DVector::from_fn(n, |i, _| C64::new((-0.5 * i as f64).exp(), 0.2 * (-(i as f64)).exp())),
    )
    .unwrap();
    let cache = PeriodCache::new(&n0, &q0, 1.0, omega, 16, 0.002, Integrator::Magnus4).unwrap();
    let traj = cache.trajectory(&xi0, (100.0 / cache.period).ceil() as usize);
    let mut errs = Vec::new();
    for m_max in [3, 6] {
        let schedule = make_schedule(eps0, spec.sigma, 3.0, BETA, m_max).unwrap();
        let mut opts = KamOptions::new(12);
        opts.kappa_override = Some(kappa);
        let r = kam_iterate(&n0, &q0, &[omega], &schedule, &opts).unwrap();
        let err = conjugacy_error(&r, &traj, &[omega]).unwrap();
        errs.push((err, r.eps_stop(&schedule)));
    }
    let (e3, _) = errs[0];
    let (e6, eps_stop) = errs[1];
    let tol = (10.0 * eps_stop).max(1e-7);
    ensure(
        e6 <= tol && e3 >= 5.0 * e6,
        format!("err m_max=3 {e3:.2e}, m_max=6 {e6:.2e} ≤ {tol:.2e}, ratio {:.1e}", e3 / e6),
    )
}

fn sobolev_deviation(omega: f64, eps: f64) -> f64 {
    let spec = PotentialSpec::cosine(1, 1.5, 1.0, 1, 0);
    let (layout, n0) = harmonic_setup(41);
    let q = assembled(&spec, 41);
    let n = layout.n_modes();
    let xi0 = SequenceVector::new(layout.clone(), DVector::from_fn(n, |i, _| C64::new((-0.5 * i as f64).exp(), 0.0))).unwrap();
    let cache = PeriodCache::new(&n0, &q, eps, omega, 8, 0.002, Integrator::Magnus4).unwrap();
    let traj = cache.trajectory(&xi0, (1e4 / cache.period).ceil() as usize);
    let (lo, hi) = sobolev_monitor(&traj, 1.0);
    (hi - 1.0).max(1.0 - lo)
}

fn c6_sobolev_boundedness() -> Outcome {
    let eps = 1e-3;
    let screened = sobolev_deviation(OMEGA, eps);
    // ω = 4 resonates with the Δw = 4 coupling that cos-forcing of an even
    // potential allows; ω = 1 is parity-forbidden at first order.
    let resonant = sobolev_deviation(4.0, eps);
    ensure(
        screened <= 10.0 * eps && resonant > 10.0 * eps,
        format!("screened ω={OMEGA}: {screened:.2e} ≤ {:.0e}; resonant ω=4: {resonant:.2e}", 10.0 * eps),
    )
}

fn c7_measure_scaling() -> Outcome {
    // At W_max = 41 the intervals for γ = 1e−2 reach widths ~0.8 and overlap,
    // which bends the count below linear; the CLI reference cutoff avoids that.
    let layout = enumerate_modes(1, 21).unwrap().layout();
    let points = 2_000_001;
    let frac = |k: u32, gamma: f64| measure_estimate(1, points, k, gamma, &layout).unwrap().excluded_fraction;
    let per_gamma: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&g| frac(10, g) / g).collect();
    let lo = per_gamma.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = per_gamma.iter().cloned().fold(0.0, f64::max);
    let linear = hi / lo - 1.0;
    let gamma = 1e-3;
    let c = frac(5, gamma) / (25.0 * gamma);
    let mut ok = linear <= 0.2;
    let mut k_lines = Vec::new();
    for k in [5u32, 10, 20] {
        let f = frac(k, gamma);
        let bound = c * (k * k) as f64 * gamma;
        ok &= f <= bound * (1.0 + 1e-12);
        k_lines.push(format!("K={k} {f:.3e}≤{bound:.3e}"));
    }
    ensure(
        ok,
        format!("W_max=21 fraction/γ spread {:.1}% (≤ 20%); C={c:.3} fitted at K=5: {}", 100.0 * linear, k_lines.join(", ")),
    )
}

/// Random matrix with blocks decaying like `((1+ln w_a)(1+ln w_b))^{−β} (1+|w_a−w_b|)^{−p}`.
fn random_decaying(rng: &mut ChaCha8Rng, layout: &Arc<ClusterLayout>, beta: f64) -> BlockMatrix {
    let p = rng.gen_range(0.0..2.0);
    let density = rng.gen_range(0.2..1.0);
    let mut m = BlockMatrix::zeros(layout.clone());
    for a in 0..layout.n_clusters() {
        for b in 0..layout.n_clusters() {
            if rng.gen::<f64>() > density {
                continue;
            }
            let scale = (layout.log_weight(a, beta) * layout.log_weight(b, beta)).recip() * (1.0 + layout.gap(a, b)).powf(-p);
            let blk = random_block(rng, layout.sizes[a], layout.sizes[b]) * C64::from(scale);
            m.insert(a, b, blk);
        }
    }
    m
}

fn c8_structure_bounds() -> Outcome {
    let fixture: serde_json::Value = serde_json::from_str(include_str!("fixtures/structure_constants.json")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut unitary: f64 = 0.0;
    let mut hermitian: f64 = 0.0;
    let mut pairs = 0;
    for (key, d, w_max) in [("d1_w41", 1, 41), ("d2_w12", 2, 12)] {
        let layout = Arc::new(enumerate_modes(d, w_max).unwrap().layout());
        for (i, beta) in [0.75, 1.0, 2.0].into_iter().enumerate() {
            let entry = &fixture[key][i];
            assert_eq!(entry["beta"].as_f64(), Some(beta));
            let frozen = ["product", "product_plus", "dual", "sobolev"]
                .iter()
                .map(|f| entry[f].as_f64().unwrap())
                .fold(0.0, f64::max);
            let computed = structure_constants(&layout, beta).max();
            if (computed - frozen).abs() > 1e-12 * frozen {
                return Err(format!("{key} β={beta}: constant {computed} drifted from frozen {frozen}"));
            }
            for _ in 0..100 {
                pairs += 1;
                let a = random_decaying(&mut rng, &layout, beta);
                let b = random_decaying(&mut rng, &layout, beta);
                let (na, nap) = (a.decay_norm(beta).norm, a.decay_norm_plus(beta));
                let nbp = b.decay_norm_plus(beta);
                let ab = a.mul(&b).unwrap();
                let ba = b.mul(&a).unwrap();
                let mut ratios = vec![
                    ab.decay_norm(beta).norm / (frozen * na * nbp),
                    ba.decay_norm(beta).norm / (frozen * na * nbp),
                    ab.decay_norm_plus(beta) / (frozen * nap * nbp),
                    a.dual_operator_norm(1.0) / (frozen * na),
                ];
                for s in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                    ratios.push(a.sobolev_operator_norm(s) / (frozen * nap));
                }
                let r = a.scale(C64::from(rng.gen_range(0.01..1.0) / nap));
                let rp = r.decay_norm_plus(beta);
                let e = r.exp_scaled(C64::from(1.0)).unwrap().sub(&BlockMatrix::identity(layout.clone())).unwrap();
                ratios.push(e.decay_norm_plus(beta) / ((frozen * rp).exp() * rp));
                worst = ratios.into_iter().fold(worst, f64::max);

                let h = a.hermitian_part();
                hermitian = hermitian.max(spectral_norm(&(h.to_dense() - h.to_dense().adjoint())));
                let u = expm_i_hermitian(&h.to_dense(), 1.0);
                let n = u.nrows();
                unitary = unitary.max(spectral_norm(&(&u * u.adjoint() - Block::identity(n, n))));
            }
        }
    }
    ensure(
        worst <= 1.0 && unitary < 1e-11 && hermitian == 0.0,
        format!("{pairs} pairs: worst ratio to bound {worst:.3}; unitarity {unitary:.1e}; Hermitian part exact"),
    )
}

fn c9_key_decay() -> Outcome {
    let spec = PotentialSpec::cosine(1, 1.0, 1.0, 1, 0);
    let sweep = key_decay_sweep(&spec, &[25, 49, 101], &AssembleOptions::default()).unwrap();
    let sups: Vec<String> = sweep.reports.iter().map(|r| format!("W={} {:.4}", r.w_max, r.sup)).collect();
    ensure(
        sweep.is_stable(0.15),
        format!("{}; spread {:.1}% (≤ 15%)", sups.join(", "), 100.0 * sweep.spread),
    )
}

fn c10_schedule_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut recurrence: f64 = 0.0;
    let mut telescope: f64 = 0.0;
    let mut forms: f64 = 0.0;
    for _ in 0..1000 {
        let eps0 = 10f64.powf(rng.gen_range(-300.0..-1.0));
        let sigma0 = rng.gen_range(0.1..5.0);
        let alpha = rng.gen_range(1.0..6.0);
        let beta = alpha / 2.0 + rng.gen_range(0.0..3.0);
        let m_max = rng.gen_range(1..40);
        let s = make_schedule(eps0, sigma0, alpha, beta, m_max).unwrap();
        let ln0 = eps0.ln();
        for m in 1..=m_max {
            let closed = ln0 * 1.25f64.powi(m as i32);
            let stepwise = 1.25 * s.ln_eps(m - 1);
            recurrence = recurrence.max(((s.ln_eps(m) - closed) / closed).abs());
            recurrence = recurrence.max(((s.ln_eps(m) - stepwise) / stepwise).abs());
            let (c, e) = smallness_margins(ln0, s.ln_eps(m - 1), alpha, beta, 1);
            forms = forms.max((c - e).abs() / c.abs().max(e.abs()).max(1.0));
        }
        let lost: f64 = s.steps.iter().map(|p| p.sigma_loss).sum();
        // Σ_{j>m_max} 1/j² to N terms plus the Euler–Maclaurin remainder.
        let n = 100_000usize;
        let nf = n as f64;
        let tail = (m_max + 1..=n).map(|j| 1.0 / (j * j) as f64).sum::<f64>() + 1.0 / nf - 0.5 / nf.powi(2) + 1.0 / (6.0 * nf.powi(3));
        telescope = telescope.max((lost + C_STAR * sigma0 * tail - sigma0 / 2.0).abs() / sigma0);
        telescope = telescope.max((sigma0 - s.sigma(m_max) - lost).abs() / sigma0);
    }
    ensure(
        recurrence <= 1e-12 && telescope <= 1e-12 && forms <= 1e-12,
        format!("ln ε_m rel gap {recurrence:.1e}; σ-loss telescope {telescope:.1e}; smallness forms gap {forms:.1e}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("homological residual", c1_homological_residual),
        ("division bound", c2_division_bound),
        ("superexponential decay", c3_superexponential_decay),
        ("transformation bound", c4_transformation_bound),
        ("conjugacy oracle", c5_conjugacy_oracle),
        ("Sobolev boundedness", c6_sobolev_boundedness),
        ("measure scaling", c7_measure_scaling),
        ("structural algebra", c8_structure_bounds),
        ("key decay", c9_key_decay),
        ("schedule identities", c10_schedule_identities),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS {name} [{secs:.1} s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name} [{secs:.1} s]: {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
