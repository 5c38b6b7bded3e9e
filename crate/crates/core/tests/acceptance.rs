//! Acceptance criteria, run in order with one PASS/FAIL line each.
//! `cargo test --test acceptance -- 3 7` runs a subset.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zrp_core::ensembles::{
    canonical_on, entropy_production_trace, equivalence_of_ensembles_trace, master_equation_evolve,
    slowly_varying_product, DistributionTable, Generator, StateSpace, TimeScale,
};
use zrp_core::lattice::{LatticeConfiguration, Torus};
use zrp_core::pde::{solve_scalar, solve_species_blind_decoupled, solve_system};
use zrp_core::profile::{Profile, ProfileTerm};
use zrp_core::rates::{species_blind_rate, JumpRate, OneSpeciesRate};
use zrp_core::simulate;
use zrp_core::thermo::Thermo;
use zrp_core::verify::{fit_line, hydrodynamic_sweep, one_block_statistic, paired_decrease_test, EllRule, SweepSettings};

const SEED: u64 = 2026;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn linear() -> JumpRate {
    species_blind_rate(OneSpeciesRate::linear())
}

fn constant() -> JumpRate {
    species_blind_rate(OneSpeciesRate::constant())
}

fn evans4() -> JumpRate {
    species_blind_rate(OneSpeciesRate::evans(4.0).unwrap())
}

fn builtins() -> Vec<(&'static str, JumpRate)> {
    vec![("linear", linear()), ("constant", constant()), ("evans(4)", evans4())]
}

fn grid_1d(m: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..m).map(|j| f(j as f64 / m as f64)).collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn thermodynamics_closed_forms() -> Verdict {
    let lin = Thermo::new(linear());
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rho = [rng.gen_range(1e-3..3.0), rng.gen_range(1e-3..3.0)];
        let back = lin.density(lin.mean_jump_rate(rho).unwrap()).unwrap();
        worst = worst.max((back[0] - rho[0]).abs()).max((back[1] - rho[1]).abs());
    }
    let z_lin = lin.log_z([0.3, 0.2]).unwrap().exp();
    let z_const = Thermo::new(constant()).log_z([0.3, 0.2]).unwrap().exp();
    let e_lin = (z_lin - 0.5f64.exp()).abs();
    let e_const = (z_const - 2.0).abs();
    verdict(
        worst <= 1e-8 && e_lin <= 1e-6 && e_const <= 1e-8,
        format!("max |R(Φ(ρ))−ρ| = {worst:.1e}, |Z_lin − e^0.5| = {e_lin:.1e}, |Z_const − 2| = {e_const:.1e}"),
    )
}

fn condensation_diagnostics() -> Verdict {
    // brute force for ĝ(k) = 1 + 4/k, independent of the library series
    const K: u32 = 100_000;
    let (mut z, mut m1, mut log_fact) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..K {
        if k > 0 {
            log_fact += (1.0 + 4.0 / f64::from(k)).ln();
        }
        let w = (-log_fact).exp();
        z += w;
        m1 += f64::from(k) * w;
    }
    // root test on 1/ĝ!(K)
    let phi_brute = (log_fact / f64::from(K - 1)).exp();
    let rho_brute = m1 / z;
    let t = Thermo::new(evans4());
    let c = *t.hat_critical().unwrap();
    let y = [0.5f64, 0.5];
    let directional = t.directional_critical_fugacity(y, K).unwrap().value;
    let closed = (y[0] * y[0].ln() + y[1] * y[1].ln() + c.phi_c.ln()).exp();
    let ok = (phi_brute - 1.0).abs() <= 1e-3
        && (rho_brute - 0.5).abs() <= 1e-3
        && (c.phi_c - phi_brute).abs() <= 1e-3
        && (c.rho_c - rho_brute).abs() <= 1e-3
        && (directional - 0.5).abs() <= 1e-3
        && (directional - closed).abs() <= 1e-3;
    verdict(
        ok,
        format!(
            "φ̂_c brute {phi_brute:.6} / module {:.6}, ρ̂_c brute {rho_brute:.6} / module {:.6}, φ_c(½,½) = {directional:.6} (closed form {closed:.6})",
            c.phi_c, c.rho_c
        ),
    )
}

/// `sup_μ ⟨λ,μ⟩ − Λ_ρ(μ)` by nested grids shrinking around the best node.
/// The grid lives in the chart `e^μ Φ(ρ) = (s w, s (1−w))`, coordinates
/// `(log s, logit w)`, so a condensing boundary `s = φ̂_c` is a grid line
/// instead of a staircase.
fn grid_legendre(t: &Thermo, rho: [f64; 2], lambda: [f64; 2]) -> f64 {
    let phi = t.mean_jump_rate(rho).unwrap();
    let log_z0 = t.log_z(phi).unwrap();
    let critical = t.hat_critical().unwrap();
    let log_s_max = critical.phi_c.ln();
    let objective = |a: f64, b: f64| {
        let a = if critical.is_condensing() { a.min(log_s_max) } else { a };
        if !critical.is_condensing() && a >= log_s_max {
            return f64::NEG_INFINITY;
        }
        let s = a.exp();
        let w = 1.0 / (1.0 + (-b).exp());
        let psi = [s * w, s * (1.0 - w)];
        let mu = [(psi[0] / phi[0]).ln(), (psi[1] / phi[1]).ln()];
        match t.log_z(psi) {
            Ok(lz) if lz.is_finite() => lambda[0] * mu[0] + lambda[1] * mu[1] - (lz - log_z0),
            _ => f64::NEG_INFINITY,
        }
    };
    let mut center = [(phi[0] + phi[1]).ln(), (phi[0] / phi[1]).ln()];
    let mut half = 4.0;
    let mut best = objective(center[0], center[1]);
    while half > 1e-5 {
        let h = half / 5.0;
        let mut next = center;
        for j in -5..=5 {
            for i in -5..=5 {
                let p = [center[0] + f64::from(i) * h, center[1] + f64::from(j) * h];
                // every node past a condensing boundary lands on the same point
                if critical.is_condensing() && p[0] > log_s_max && p[0] - h > log_s_max && i > -5 {
                    continue;
                }
                let v = objective(p[0], p[1]);
                if v > best {
                    best = v;
                    next = p;
                }
            }
        }
        center = next;
        half *= 0.4;
    }
    best
}

fn legendre_duality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, rate) in builtins() {
        let t = Thermo::new(rate);
        let mut worst_rate = 0.0f64;
        for _ in 0..20 {
            let (rho, lambda) = if name == "evans(4)" {
                let a: f64 = rng.gen_range(0.02..0.4);
                let b: f64 = rng.gen_range(0.02..(0.44 - a));
                ([a, b], [rng.gen_range(0.02..0.6), rng.gen_range(0.02..0.6)])
            } else {
                (
                    [rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)],
                    [rng.gen_range(0.05..1.5), rng.gen_range(0.05..1.5)],
                )
            };
            let direct = t.rate_function(rho, lambda).unwrap();
            let grid = grid_legendre(&t, rho, lambda);
            worst_rate = worst_rate.max((direct - grid).abs());
        }
        parts.push(format!("{name} {worst_rate:.1e}"));
        worst = worst.max(worst_rate);
    }
    verdict(worst <= 1e-4, format!("max |Λ* − grid sup| over 20 pairs: {}", parts.join(", ")))
}

fn equivalence_of_ensembles() -> Verdict {
    let ns = [2, 3, 4, 5, 6];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, rate, rho) in [("linear", linear(), [0.5, 0.5]), ("evans(4)", evans4(), [0.2, 0.2])] {
        let trace = equivalence_of_ensembles_trace(&Thermo::new(rate), rho, &ns, 1).unwrap();
        let values: Vec<f64> = trace.iter().map(|p| p.normalized).collect();
        ok &= values.windows(2).all(|w| w[1] < w[0]);
        let shown: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
        parts.push(format!("{name} [{}]", shown.join(", ")));
    }
    verdict(ok, format!("H/N for N = 2..6: {}", parts.join("; ")))
}

fn entropy_monotonicity() -> Verdict {
    let space = Arc::new(StateSpace::new(Torus::new(3, 1).unwrap(), [2, 1]).unwrap());
    let grid = [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0, 3.0];
    let mut worst_rise = f64::NEG_INFINITY;
    for (_, rate) in builtins() {
        let nu = canonical_on(&rate, space.clone()).unwrap();
        let generator = Generator::new(&rate, space.clone()).unwrap();
        for j in 0..20 {
            let mu = DistributionTable::random(space.clone(), SEED, j);
            let trace = entropy_production_trace(&generator, &mu, &nu, &grid, TimeScale::Raw).unwrap();
            for w in trace.windows(2) {
                worst_rise = worst_rise.max(w[1].1 - w[0].1);
            }
        }
    }
    verdict(
        worst_rise <= 1e-10,
        format!("largest step H(μ_t+)−H(μ_t) over 3 rates × 20 laws = {worst_rise:.2e}"),
    )
}

fn three_site_tv(rate: &JumpRate, replicas: u64) -> f64 {
    let torus = Torus::new(3, 1).unwrap();
    let occupations = vec![[2, 1], [0, 0], [0, 0]];
    let start = LatticeConfiguration::from_occupations(torus, occupations.clone()).unwrap();
    let t = 5.0;
    let records = simulate::run(rate, |_, _| start.clone(), &[t], SEED, replicas).unwrap();
    let space = Arc::new(StateSpace::new(torus, [2, 1]).unwrap());
    let mu0 = DistributionTable::point_mass(space.clone(), space.rank(&occupations));
    let exact = master_equation_evolve(rate, &mu0, t, TimeScale::Diffusive).unwrap();
    let mut counts = vec![0u64; space.len()];
    for r in &records {
        counts[space.rank(r.snapshots[0].config.occupations())] += 1;
    }
    0.5 * counts
        .iter()
        .zip(exact.probabilities())
        .map(|(&c, p)| (c as f64 / replicas as f64 - p).abs())
        .sum::<f64>()
}

fn simulator_exactness() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, rate) in builtins() {
        let tv = three_site_tv(&rate, 10_000);
        ok &= tv <= 0.02;
        parts.push(format!("{name} {tv:.4}"));
    }
    let tv_large = three_site_tv(&evans4(), 100_000);
    verdict(
        ok,
        format!("TV at 1e4 replicas: {}; evans(4) at 1e5 replicas: {tv_large:.4}", parts.join(", ")),
    )
}

fn heat_error(m: usize) -> f64 {
    let t = 0.1;
    let thermo = Thermo::new(linear());
    let rho0 = [
        grid_1d(m, |u| 1.0 + 0.5 * (2.0 * PI * u).cos()),
        grid_1d(m, |u| 0.5 + 0.25 * (2.0 * PI * u).sin()),
    ];
    let run = solve_system(&thermo, rho0, m, 1, &[t], 0.4).unwrap();
    let f = (-4.0 * PI * PI * t).exp();
    let last = run.frames.last().unwrap();
    let e1 = sup_diff(&last.rho[0], &grid_1d(m, |u| 1.0 + 0.5 * f * (2.0 * PI * u).cos()));
    let e2 = sup_diff(&last.rho[1], &grid_1d(m, |u| 0.5 + 0.25 * f * (2.0 * PI * u).sin()));
    e1.max(e2)
}

fn pde_correctness() -> Verdict {
    let ms = [32usize, 64, 128];
    let errors: Vec<f64> = ms.iter().map(|&m| heat_error(m)).collect();
    let lx: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let order = -fit_line(&lx, &ly).0;
    verdict(
        errors[2] <= 1e-4 && order >= 1.9,
        format!(
            "L∞ at M = 32/64/128: {:.2e} / {:.2e} / {:.2e}, observed order {order:.3}",
            errors[0], errors[1], errors[2]
        ),
    )
}

fn species_blind_structure() -> Verdict {
    let thermo = Thermo::new(evans4());
    let hat = thermo.hat().unwrap();
    let m = 128;
    let times = [0.05, 0.1, 0.2];
    let rho0 = [
        grid_1d(m, |u| 0.2 + 0.08 * (2.0 * PI * u).cos()),
        grid_1d(m, |u| 0.15 + 0.06 * (2.0 * PI * u).sin()),
    ];
    let max_sum0 = (0..m).map(|x| rho0[0][x] + rho0[1][x]).fold(0.0, f64::max);
    let sum0: Vec<f64> = (0..m).map(|x| rho0[0][x] + rho0[1][x]).collect();
    let direct = solve_system(&thermo, rho0.clone(), m, 1, &times, 0.4).unwrap();
    let decoupled = solve_species_blind_decoupled(hat, rho0, m, 1, &times, 0.4).unwrap();
    let scalar = solve_scalar(hat, sum0, m, 1, &times, 0.4).unwrap();
    let mut cross = 0.0f64;
    let mut sum_err = 0.0f64;
    let mut min_comp = f64::INFINITY;
    let mut max_sum = 0.0f64;
    for (k, f) in direct.frames.iter().enumerate() {
        let g = &decoupled.system.frames[k];
        cross = cross.max(sup_diff(&f.rho[0], &g.rho[0])).max(sup_diff(&f.rho[1], &g.rho[1]));
        let s: Vec<f64> = (0..m).map(|x| f.rho[0][x] + f.rho[1][x]).collect();
        sum_err = sum_err.max(sup_diff(&s, &scalar.frames[k].r));
        min_comp = f.rho[0].iter().chain(&f.rho[1]).fold(min_comp, |a, &b| a.min(b));
        max_sum = s.iter().fold(max_sum, |a, &b| a.max(b));
    }
    let rho_c = hat.critical().rho_c;
    verdict(
        cross <= 5e-4 && sum_err <= 5e-4 && min_comp > 0.0 && max_sum < rho_c,
        format!(
            "max|ρ0|₁ = {max_sum0:.3}; system vs decoupled {cross:.1e}, sum vs scalar {sum_err:.1e}, min component {min_comp:.4}, max sum {max_sum:.4} < ρ̂_c = {rho_c:.4}"
        ),
    )
}

fn one_block_trend() -> Verdict {
    let thermo = Thermo::new(evans4());
    let torus = Torus::new(256, 1).unwrap();
    let rho = [0.2, 0.2];
    let product = slowly_varying_product(&thermo, |_| rho, torus, 1e-12).unwrap();
    let times = [0.0, 0.0025, 0.005, 0.0075, 0.01];
    let records = simulate::run(thermo.rate(), |s, r| product.sample(s, r), &times, SEED, 64).unwrap();
    let field = |_: f64, u: &[f64]| [1.0 + 0.5 * (2.0 * PI * u[0]).cos(), 1.0 + 0.5 * (2.0 * PI * u[0]).sin()];
    let small = one_block_statistic(&thermo, &records, field, 1, &times).unwrap();
    let large = one_block_statistic(&thermo, &records, field, 16, &times).unwrap();
    let test = paired_decrease_test(&small.per_replica, &large.per_replica, 0.95).unwrap();
    verdict(
        test.passed,
        format!(
            "ℓ=1: {:.4e} ± {:.1e}, ℓ=16: {:.4e} ± {:.1e}, paired t = {:.2} (critical {:.3})",
            small.mean, small.stderr, large.mean, large.stderr, test.t_statistic, test.critical_value
        ),
    )
}

fn hydrodynamic_trend() -> Verdict {
    let cases = [
        (
            "linear",
            linear(),
            Profile {
                rho1: vec![ProfileTerm::cosine(0.5, 0.2, 1)],
                rho2: vec![ProfileTerm::constant(0.5)],
            },
        ),
        (
            "evans(4)",
            evans4(),
            Profile {
                rho1: vec![ProfileTerm::cosine(0.2, 0.08, 1)],
                rho2: vec![ProfileTerm {
                    a: 0.15,
                    c: 0.06,
                    ..ProfileTerm::default()
                }],
            },
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, rate, profile) in cases {
        let settings = SweepSettings {
            n_list: vec![64, 128, 256],
            d: 1,
            t_macro: vec![0.05],
            ell: EllRule::Sqrt,
            replicas: 64,
            seed: SEED,
            pde_m: 256,
            safety: 0.4,
            tail_tol: 1e-12,
        };
        let sweep = hydrodynamic_sweep(&Thermo::new(rate), &profile, &settings).unwrap();
        let e = sweep.final_errors();
        ok &= e.windows(2).all(|w| w[1] < w[0]) && sweep.fitted_rate > 0.0 && !sweep.pde_breach;
        parts.push(format!(
            "{name} L¹ {:.4} / {:.4} / {:.4}, rate {:.3}",
            e[0], e[1], e[2], sweep.fitted_rate
        ));
    }
    verdict(ok, format!("N = 64/128/256: {}", parts.join("; ")))
}

type Criterion = (u32, &'static str, u64, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "thermodynamics closed forms", 1, thermodynamics_closed_forms),
    (2, "condensation diagnostics", 10, condensation_diagnostics),
    (3, "Legendre duality", 30, legendre_duality),
    (4, "equivalence of ensembles", 60, equivalence_of_ensembles),
    (5, "entropy monotonicity", 30, entropy_monotonicity),
    (6, "simulator exactness", 60, simulator_exactness),
    (7, "PDE correctness", 10, pde_correctness),
    (8, "species-blind structure", 30, species_blind_structure),
    (9, "one-block trend", 300, one_block_trend),
    (10, "hydrodynamic limit trend", 1200, hydrodynamic_trend),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for &(id, name, budget, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let pass = v.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {id:>2} {} {name} [{:.2} s / {budget} s{}] {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" },
            v.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
