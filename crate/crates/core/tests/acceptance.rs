//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion, nonzero exit
//! if any fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 9`.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdgp::experiment::{mean_cost, run_mcf_vs_n, uncertain_system, ExperimentConfig};
use sdgp::gp::{GpModel, SeKernel};
use sdgp::linearize::{delta_from_hadamard, sample_realization, NormBoundedSystem};
use sdgp::lmi::{nominal_stability_check, robust_stability_constraints, AffineLmi, Sense, SparseSym, PSD_TOLERANCE};
use sdgp::numerics::{chi2_pdf, chi2_quantile, min_eigenvalue, SymMatrix};
use sdgp::sdp::{
    extract_gain, min_control_frequency, optimize_performance, rescale_certificate, robust_feasibility,
    solve_feasibility, ControllerDesign, McfOptions, SdpProblem, SolveStatus, SolverOptions,
};
use sdgp::sim::{simulate_closed_loop, LinearPlant, SampledController, SamplingPolicy};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn deviation(x: &[f64], x_e: &[f64]) -> f64 {
    x.iter().zip(x_e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

// 1 ------------------------------------------------------------------------

fn derivative_gp_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_rel: f64 = 0.0;
    let mut worst_psd = f64::INFINITY;
    let mut worst_dom = f64::INFINITY;
    for _ in 0..20 {
        let n = rng.random_range(5..=50);
        let d = rng.random_range(1..=4);
        let inputs = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let targets = DVector::from_fn(n, |i, _| {
            let s: f64 = (0..d).map(|c| w[c] * inputs[(i, c)]).sum();
            s.sin() + 0.3 * s * s + rng.random_range(-0.05..0.05)
        });
        let lengthscales: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let kernel = SeKernel::new(rng.random_range(0.5..2.0), lengthscales.clone());
        let gp = GpModel::new(kernel.clone(), rng.random_range(1e-2..1e-1), Arc::new(inputs), targets)
            .map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let pred = gp.predict_derivative(&z).map_err(|e| e.to_string())?;
            let fd: Vec<f64> = (0..d)
                .map(|c| {
                    let h = 1e-4 * lengthscales[c];
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[c] += h;
                    zm[c] -= h;
                    (gp.predict(&zp).unwrap().0 - gp.predict(&zm).unwrap().0) / (2.0 * h)
                })
                .collect();
            let diff: Vec<f64> = pred.mean.iter().zip(&fd).map(|(a, b)| a - b).collect();
            worst_rel = worst_rel.max(norm(&diff) / norm(pred.mean.as_slice()).max(1e-8));
            worst_psd = worst_psd.min(min_eigenvalue(&pred.covariance).map_err(|e| e.to_string())?);
            let prior = kernel.prior_gradient_covariance();
            let mut gap = prior.clone();
            gap.axpy(-1.0, &pred.covariance);
            worst_dom = worst_dom.min(min_eigenvalue(&gap).map_err(|e| e.to_string())?);
        }
    }
    check(
        worst_rel <= 1e-5 && worst_psd >= -1e-9 && worst_dom >= -1e-9,
        format!("worst relative gradient error {worst_rel:.2e}, min eig Σ′ {worst_psd:.2e}, min eig (prior − Σ′) {worst_dom:.2e}"),
    )
}

// 2 ------------------------------------------------------------------------

fn reparameterization_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=2);
        let a_bar = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..3.0));
        let b_bar = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..3.0));
        let sys = NormBoundedSystem::from_bounds(DMatrix::zeros(n, n), DMatrix::zeros(n, m), &a_bar, &b_bar);
        let omega = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
        let psi = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..=1.0));
        let delta = DMatrix::from_diagonal(&DVector::from_vec(delta_from_hadamard(&omega, &psi)));
        let hde = &sys.h * &delta * &sys.e;
        let hdf = &sys.h * &delta * &sys.f;
        worst = worst.max((hde - a_bar.component_mul(&omega)).amax());
        worst = worst.max((hdf - b_bar.component_mul(&psi)).amax());
    }
    check(worst <= 1e-12, format!("worst elementwise mismatch {worst:.2e} over 50 systems"))
}

// 3 ------------------------------------------------------------------------

fn cross_term_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let p = rng.random_range(1..=5);
        let q = rng.random_range(1..=4);
        let u = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let v = DMatrix::from_fn(q, n, |_, _| rng.random_range(-2.0..2.0));
        let theta: DMatrix<f64> = DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
        // ΘᵀΘ ⪯ I
        let sigma = theta.clone().svd(false, false).singular_values.max();
        let theta = theta / sigma.max(1.0);
        let eps = 10f64.powf(rng.random_range(-2.0..2.0));
        let cross = &u * &theta * &v;
        let cross = &cross + cross.transpose();
        let bound = &u * u.transpose() / eps + v.transpose() * &v * eps;
        for m in [&bound - &cross, &bound + &cross] {
            worst = worst.min(min_eigenvalue(&SymMatrix::symmetrize(&m)).map_err(|e| e.to_string())?);
        }
    }
    check(worst >= -1e-9, format!("smallest eigenvalue slack {worst:.2e} over 100 instances"))
}

// 4, 5, 6 ------------------------------------------------------------------

struct Quadrotor {
    cfg: ExperimentConfig,
    sys: NormBoundedSystem,
    design: ControllerDesign,
    elapsed: Duration,
}

fn quadrotor_design() -> Result<Quadrotor, String> {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let sys = uncertain_system(&cfg, 0, 600).map_err(|e| e.to_string())?;
    let design = min_control_frequency(&sys, &cfg.mcf).map_err(|e| e.to_string())?;
    Ok(Quadrotor {
        cfg,
        sys,
        design,
        elapsed: start.elapsed(),
    })
}

fn random_delta(rng: &mut ChaCha8Rng, len: usize, vertex: bool) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if vertex {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            } else {
                rng.random_range(-1.0..=1.0)
            }
        })
        .collect()
}

fn robust_implies_nominal(q: &Quadrotor) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_w, mut worst_m) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..100 {
        let delta = random_delta(&mut rng, q.sys.p_u(), k % 4 == 0);
        let (a, b) = sample_realization(&q.sys, &delta).map_err(|e| e.to_string())?;
        let (w, m) = nominal_stability_check(&a, &b, q.design.t_s_max, &q.design.certificate.values, &q.design.layout)
            .map_err(|e| e.to_string())?;
        worst_w = worst_w.max(w);
        worst_m = worst_m.min(m);
    }
    check(
        worst_w < 0.0 && worst_m >= -PSD_TOLERANCE,
        format!(
            "f_c,min {:.3} Hz; over 100 Δ: max λ_max(W) {worst_w:.3e}, min λ_min(M) {worst_m:.3e}",
            q.design.min_frequency
        ),
    )
}

fn scaling_equivalence(q: &Quadrotor) -> Outcome {
    let (e1, e2) = q.design.eps_used;
    let mut details = Vec::new();
    let mut ok = true;
    for c in [0.1, 10.0] {
        let values = rescale_certificate(&q.design.certificate.values, &q.design.layout, c);
        let cons = robust_stability_constraints(&q.sys, q.design.t_s_max, c * e1, c * e2, &q.design.layout)
            .map_err(|e| e.to_string())?;
        let mut feasible = true;
        for con in &cons {
            let lam = con.extreme_eigenvalue(&values).map_err(|e| e.to_string())?;
            feasible &= match con.sense {
                Sense::StrictNegative => lam < 0.0,
                Sense::NegativeSemidefinite => lam <= PSD_TOLERANCE,
                Sense::PositiveSemidefinite => lam >= -PSD_TOLERANCE,
            };
        }
        let mut scaled = q.design.certificate.clone();
        scaled.values = values;
        let gain = extract_gain(&scaled, &q.design.layout).map_err(|e| e.to_string())?;
        let diff = (&gain - &q.design.gain).amax();
        ok &= feasible && diff <= 1e-10;
        details.push(format!("c = {c}: feasible {feasible}, max |ΔK| {diff:.1e}"));
    }
    check(ok, details.join("; "))
}

fn closed_loop_at_mcf(q: &Quadrotor) -> Outcome {
    let cfg = &q.cfg;
    let t_s = q.design.t_s_max;
    let x0_dev = deviation(&cfg.x0, &cfg.x_e);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let delta = random_delta(&mut rng, q.sys.p_u(), trial % 4 == 0);
        let (a, b) = sample_realization(&q.sys, &delta).map_err(|e| e.to_string())?;
        let plant = LinearPlant::new(a, b, cfg.x_e.clone(), cfg.u_e.clone()).map_err(|e| e.to_string())?;
        let ctrl = SampledController::new(
            q.design.gain.clone(),
            cfg.x_e.clone(),
            cfg.u_e.clone(),
            t_s,
            SamplingPolicy::UniformRandom { lower_fraction: 0.1 },
        )
        .map_err(|e| e.to_string())?;
        let traj = simulate_closed_loop(&plant, &ctrl, &cfg.x0, 10.0, None, trial).map_err(|e| e.to_string())?;
        let ratio = if traj.is_diverged() { f64::INFINITY } else { deviation(traj.final_state(), &cfg.x_e) / x0_dev };
        worst = worst.max(ratio);
    }
    let ctrl = SampledController::new(q.design.gain.clone(), cfg.x_e.clone(), cfg.u_e.clone(), t_s, SamplingPolicy::Periodic)
        .map_err(|e| e.to_string())?;
    let plant = cfg.plant();
    let traj = simulate_closed_loop(plant.as_ref(), &ctrl, &cfg.x0, 10.0, None, 0).map_err(|e| e.to_string())?;
    let nonlinear = deviation(traj.final_state(), &cfg.x_e) / x0_dev;
    check(
        worst <= 1e-2 && !traj.is_diverged() && nonlinear <= 1e-2,
        format!("worst linear ‖x̃(10)‖/‖x̃(0)‖ {worst:.2e} over 20 runs, nonlinear {nonlinear:.2e}"),
    )
}

// 7 ------------------------------------------------------------------------

fn mcf_vs_data() -> Outcome {
    let cfg = ExperimentConfig {
        dataset_sizes: vec![200, 400, 800],
        trials: 5,
        ..ExperimentConfig::default()
    };
    let res = run_mcf_vs_n(&cfg).map_err(|e| e.to_string())?;
    let s = &res.summary;
    let median_ok = s.windows(2).all(|w| w[1].median_f_c_min_hz <= w[0].median_f_c_min_hz);
    let fraction_ok = s.windows(2).all(|w| w[1].feasible_fraction >= w[0].feasible_fraction);
    let detail = s
        .iter()
        .map(|r| format!("N {}: median {:.2} Hz, feasible {:.1}", r.n, r.median_f_c_min_hz, r.feasible_fraction))
        .collect::<Vec<_>>()
        .join("; ");
    check(median_ok && fraction_ok, detail)
}

// 8 ------------------------------------------------------------------------

fn cost_vs_frequency() -> Outcome {
    let cfg = ExperimentConfig::default();
    let sys = uncertain_system(&cfg, 0, 400).map_err(|e| e.to_string())?;
    let design = min_control_frequency(&sys, &cfg.mcf).map_err(|e| e.to_string())?;
    let (q, r) = cfg.cost_weights();
    let initial = &cfg.initial_conditions[..3];
    let mut costs = Vec::new();
    for xi in [1.0, 1.25, 1.5, 2.0] {
        let t_s = design.t_s_max / xi;
        let (_, d) = optimize_performance(&sys, t_s, &q, &r, &cfg.performance).map_err(|e| format!("ξ {xi}: {e}"))?;
        let cost = mean_cost(&cfg, &d.gain, t_s, initial, 0)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| format!("ξ {xi}: closed loop diverged"))?;
        costs.push(cost);
    }
    let ok = costs.windows(2).all(|w| w[1] <= 1.05 * w[0]);
    check(
        ok,
        format!(
            "f_c,min {:.2} Hz; mean cost at ξ = 1, 1.25, 1.5, 2: {}",
            design.min_frequency,
            costs.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn scalar(constant: f64, coef: f64, sense: Sense) -> AffineLmi {
    AffineLmi::new("toy", SymMatrix::from_diagonal(&[constant]), vec![(0, SparseSym { entries: vec![(0, 0, coef)] })], sense)
}

/// ∫₀^q pdf(x) dx by adaptive Simpson on x = s², which removes the
/// singularity at zero for one degree of freedom.
fn chi2_integral(q: f64, dof: u32) -> f64 {
    let f = |s: f64| if s == 0.0 && dof == 1 { 2.0 / (2.0 * std::f64::consts::PI).sqrt() } else { 2.0 * s * chi2_pdf(s * s, dof) };
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let b = q.sqrt();
    let (fa, fm, fb) = (f(0.0), f(0.5 * b), f(b));
    simpson(&f, 0.0, b, fa, fm, fb, b / 6.0 * (fa + 4.0 * fm + fb), 1e-13, 50)
}

fn solver_suite() -> Outcome {
    let opts = SolverOptions::default();
    let mut failures = Vec::new();
    // x > 1 and x ≤ 2 is feasible, x > 2 and x ≤ 1 is not
    let feasible = SdpProblem::feasibility(
        1,
        vec![scalar(1.0, -1.0, Sense::StrictNegative), scalar(2.0, -1.0, Sense::PositiveSemidefinite)],
    );
    let infeasible = SdpProblem::feasibility(
        1,
        vec![scalar(2.0, -1.0, Sense::StrictNegative), scalar(1.0, -1.0, Sense::PositiveSemidefinite)],
    );
    // [[x, 1], [1, y]] ≻ 0 with x + y ≤ 1 is infeasible (needs xy > 1)
    let coupled = |budget: f64| {
        SdpProblem::feasibility(
            2,
            vec![
                AffineLmi::new(
                    "xy",
                    SymMatrix::from_fn(2, |i, j| if i == j { 0.0 } else { -1.0 }),
                    vec![
                        (0, SparseSym { entries: vec![(0, 0, -1.0)] }),
                        (1, SparseSym { entries: vec![(1, 1, -1.0)] }),
                    ],
                    Sense::StrictNegative,
                ),
                AffineLmi::new(
                    "budget",
                    SymMatrix::from_diagonal(&[budget]),
                    vec![
                        (0, SparseSym { entries: vec![(0, 0, -1.0)] }),
                        (1, SparseSym { entries: vec![(0, 0, -1.0)] }),
                    ],
                    Sense::PositiveSemidefinite,
                ),
            ],
        )
    };
    let toys = [
        ("scalar interval", feasible, true),
        ("empty scalar interval", infeasible, false),
        ("2x2 coupling, budget 3", coupled(3.0), true),
        ("2x2 coupling, budget 1", coupled(1.0), false),
    ];
    for (name, problem, expect) in toys {
        let res = solve_feasibility(&problem, &opts).map_err(|e| e.to_string())?;
        let got = res.status.is_success();
        let verified = !got
            || problem.constraints.iter().all(|c| c.is_satisfied(&res.values).unwrap_or(false));
        if got != expect || !verified || (!expect && res.status != SolveStatus::Infeasible) {
            failures.push(format!("{name}: {:?}", res.status));
        }
    }

    // bisection endpoint on a small unstable plant, every multiplier checked
    let bound = 0.1;
    let sys = NormBoundedSystem::from_bounds(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, -1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        &DMatrix::from_element(2, 2, bound),
        &DMatrix::from_row_slice(2, 1, &[0.0, bound]),
    );
    let mcf = McfOptions::default();
    let design = min_control_frequency(&sys, &mcf).map_err(|e| e.to_string())?;
    let (e1, e2) = design.eps_used;
    let at = robust_feasibility(&sys, design.t_s_max, e1, e2, None, &opts).map_err(|e| e.to_string())?;
    if !at.status.is_success() {
        failures.push(format!("not feasible at T_s,max: {:?}", at.status));
    }
    let mut above = Vec::new();
    for &eps in &mcf.eps_grid {
        let r = robust_feasibility(&sys, 1.002 * design.t_s_max, eps, 1.0 / eps, None, &opts).map_err(|e| e.to_string())?;
        if r.status.is_success() {
            failures.push(format!("feasible at 1.002·T_s,max with ε = {eps:.2e}"));
        }
        above.push(r.status);
    }
    let infeasible_count = above.iter().filter(|s| **s == SolveStatus::Infeasible).count();

    let mut worst_chi2: f64 = 0.0;
    for dof in 1..=12 {
        for p in [0.1, 0.5, 0.9, 0.95, 0.99, 0.999] {
            let q = chi2_quantile(p, dof).map_err(|e| e.to_string())?;
            worst_chi2 = worst_chi2.max((chi2_integral(q, dof) - p).abs());
        }
    }
    if worst_chi2 > 1e-6 {
        failures.push(format!("chi2 quantile off by {worst_chi2:.2e}"));
    }
    let detail = format!(
        "4 toy LMIs; T_s,max {:.5} s, {}/{} multipliers proven infeasible at 1.002·T_s,max (rest not certifiable); chi2 error {worst_chi2:.1e}",
        design.t_s_max,
        infeasible_count,
        above.len()
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failures: {}", failures.join(", ")))
    }
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: u32| selected.is_empty() || selected.contains(&k);
    let mut all_ok = true;
    let mut report = |k: u32, name: &str, budget: Option<Duration>, elapsed: Duration, outcome: Outcome| {
        let over = budget.is_some_and(|b| elapsed > b);
        let (ok, detail) = match outcome {
            Ok(d) => (!over, d),
            Err(d) => (false, d),
        };
        let budget = budget.map_or(String::new(), |b| format!(" / budget {:.0?}", b));
        println!(
            "[{}] criterion {k}: {name}: {detail} ({elapsed:.1?}{budget}{})",
            if ok { "PASS" } else { "FAIL" },
            if over { ", over budget" } else { "" }
        );
        all_ok &= ok;
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let out = f();
        (out, start.elapsed())
    };

    if wanted(1) {
        let (o, t) = timed(&derivative_gp_consistency);
        report(1, "derivative GP matches finite differences", Some(Duration::from_secs(30)), t, o);
    }
    if wanted(2) {
        let (o, t) = timed(&reparameterization_exactness);
        report(2, "norm-bounded reformulation is exact", Some(Duration::from_secs(5)), t, o);
    }
    if wanted(3) {
        let (o, t) = timed(&cross_term_bound);
        report(3, "cross-term sandwich bound", Some(Duration::from_secs(5)), t, o);
    }
    if wanted(4) || wanted(5) || wanted(6) {
        match quadrotor_design() {
            Ok(q) => {
                if wanted(4) {
                    let (o, t) = timed(&|| robust_implies_nominal(&q));
                    report(4, "robust certificate is nominally stabilizing", Some(Duration::from_secs(120)), q.elapsed + t, o);
                }
                if wanted(5) {
                    let (o, t) = timed(&|| scaling_equivalence(&q));
                    report(5, "rescaled certificates give the same gain", None, t, o);
                }
                if wanted(6) {
                    let (o, t) = timed(&|| closed_loop_at_mcf(&q));
                    report(6, "closed loop converges at the MCF", Some(Duration::from_secs(300)), q.elapsed + t, o);
                }
            }
            Err(e) => {
                for k in [4, 5, 6].into_iter().filter(|&k| wanted(k)) {
                    report(k, "quadrotor design", None, Duration::ZERO, Err(e.clone()));
                }
            }
        }
    }
    if wanted(7) {
        let (o, t) = timed(&mcf_vs_data);
        report(7, "MCF non-increasing in N, feasibility non-decreasing", Some(Duration::from_secs(900)), t, o);
    }
    if wanted(8) {
        let (o, t) = timed(&cost_vs_frequency);
        report(8, "cost non-increasing in control frequency", Some(Duration::from_secs(600)), t, o);
    }
    if wanted(9) {
        let (o, t) = timed(&solver_suite);
        report(9, "solver unit suite", None, t, o);
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
