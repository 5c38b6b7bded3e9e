use super::*;
use crate::rates::{species_blind_rate, OneSpeciesRate};
use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear() -> JumpRate {
    species_blind_rate(OneSpeciesRate::linear())
}

fn constant() -> JumpRate {
    species_blind_rate(OneSpeciesRate::constant())
}

fn evans4() -> JumpRate {
    species_blind_rate(OneSpeciesRate::evans(4.0).unwrap())
}

fn space(n: u32, d: u32, k: [u32; 2]) -> Arc<StateSpace> {
    Arc::new(StateSpace::new(Torus::new(n, d).unwrap(), k).unwrap())
}

fn random_law(space: &Arc<StateSpace>, rng: &mut ChaCha8Rng) -> DistributionTable {
    let w: Vec<f64> = (0..space.len()).map(|_| rng.gen::<f64>().powi(3)).collect();
    let total: f64 = w.iter().sum();
    DistributionTable::new(space.clone(), w.into_iter().map(|x| x / total).collect()).unwrap()
}

/// All configurations with the given totals, by brute-force recursion.
fn brute_configurations(sites: usize, k: [u32; 2]) -> Vec<Vec<Counts>> {
    fn comps(r: u32, parts: usize) -> Vec<Vec<u32>> {
        if parts == 1 {
            return vec![vec![r]];
        }
        let mut out = Vec::new();
        for a in 0..=r {
            for mut rest in comps(r - a, parts - 1) {
                rest.insert(0, a);
                out.push(rest);
            }
        }
        out
    }
    let mut out = Vec::new();
    for a in comps(k[0], sites) {
        for b in comps(k[1], sites) {
            out.push(a.iter().zip(&b).map(|(&x, &y)| [x, y]).collect());
        }
    }
    out
}

/// Dense generator built from the move rules, independent of [`Generator`].
fn dense_generator(rate: &JumpRate, torus: Torus, k: [u32; 2]) -> (Vec<Vec<Counts>>, Vec<Vec<f64>>) {
    let states = brute_configurations(torus.sites(), k);
    let index: HashMap<Vec<Counts>, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let n = states.len();
    let mut q = vec![vec![0.0; n]; n];
    let p = 1.0 / (2.0 * f64::from(torus.dim()));
    for (i, eta) in states.iter().enumerate() {
        for x in 0..torus.sites() {
            let g = rate.eval(eta[x]).unwrap();
            for sp in 0..2 {
                if eta[x][sp] == 0 {
                    continue;
                }
                for y in torus.neighbours(x) {
                    let mut e = eta.clone();
                    e[x][sp] -= 1;
                    e[y][sp] += 1;
                    let j = index[&e];
                    q[i][j] += g[sp] * p;
                    q[i][i] -= g[sp] * p;
                }
            }
        }
    }
    (states, q)
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// `e^{tQ}` by scaling and squaring with a 30-term Taylor series.
fn expm(q: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    let n = q.len();
    let norm = q.iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max) * t;
    let squarings = (norm.max(1.0).log2().ceil() as i32 + 2).max(0);
    let h = t / 2f64.powi(squarings);
    let a: Vec<Vec<f64>> = q.iter().map(|r| r.iter().map(|x| x * h).collect()).collect();
    let mut result: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut term = result.clone();
    for k in 1..30 {
        term = mat_mul(&term, &a);
        for r in term.iter_mut() {
            for x in r.iter_mut() {
                *x /= f64::from(k);
            }
        }
        for i in 0..n {
            for j in 0..n {
                result[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result);
    }
    result
}

#[test]
fn state_space_ranks_every_configuration() {
    for (n, d, k) in [(3, 1, [2, 1]), (2, 2, [2, 2]), (4, 1, [0, 3]), (1, 1, [5, 2])] {
        let s = space(n, d, k);
        let brute = brute_configurations(s.torus().sites(), k);
        assert_eq!(s.len(), brute.len());
        let mut seen = vec![false; s.len()];
        for eta in &brute {
            let i = s.rank(eta);
            assert!(!seen[i]);
            seen[i] = true;
            assert_eq!(s.configuration(i).occupations(), eta.as_slice());
        }
    }
}

#[test]
fn oversized_state_space_is_refused() {
    let err = StateSpace::new(Torus::new(30, 1).unwrap(), [30, 30]).unwrap_err();
    assert!(matches!(err, EnsembleError::Infeasible { .. }));
}

#[test]
fn canonical_linear_two_sites_is_uniform() {
    let nu = canonical_measure(&linear(), 2, 1, [1, 1]).unwrap();
    assert_eq!(nu.probabilities().len(), 4);
    for p in nu.probabilities() {
        assert_relative_eq!(*p, 0.25, epsilon = 1e-15);
    }
}

#[test]
fn canonical_empty_is_point_mass() {
    let nu = canonical_measure(&evans4(), 3, 1, [0, 0]).unwrap();
    assert_eq!(nu.probabilities(), &[1.0]);
}

#[test]
fn canonical_constant_two_sites() {
    let nu = canonical_measure(&constant(), 2, 1, [2, 0]).unwrap();
    for p in nu.probabilities() {
        assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
    }
}

#[test]
fn canonical_matches_brute_weights() {
    let rate = evans4();
    let nu = canonical_measure(&rate, 3, 1, [3, 2]).unwrap();
    let space = nu.space().clone();
    let brute = brute_configurations(3, [3, 2]);
    let w: Vec<f64> = brute
        .iter()
        .map(|eta| eta.iter().map(|c| 1.0 / g_factorial_direct(&rate, *c)).product())
        .collect();
    let total: f64 = w.iter().sum();
    for (eta, wi) in brute.iter().zip(&w) {
        assert_relative_eq!(nu.probabilities()[space.rank(eta)], wi / total, max_relative = 1e-12);
    }
}

/// `g!(k)` along the path that adds species 1 first.
fn g_factorial_direct(rate: &JumpRate, k: Counts) -> f64 {
    let mut f = 1.0;
    for a in 1..=k[0] {
        f *= rate.eval([a, 0]).unwrap()[0];
    }
    for b in 1..=k[1] {
        f *= rate.eval([k[0], b]).unwrap()[1];
    }
    f
}

#[test]
fn relative_entropy_examples() {
    let nu = canonical_measure(&evans4(), 3, 1, [2, 1]).unwrap();
    assert_eq!(relative_entropy(&nu, &nu).unwrap(), 0.0);
    let delta = DistributionTable::point_mass(nu.space().clone(), 5);
    assert_relative_eq!(
        relative_entropy(&delta, &nu).unwrap(),
        -nu.probabilities()[5].ln(),
        max_relative = 1e-14
    );
    let two = space(2, 1, [1, 0]);
    let mu = DistributionTable::new(two.clone(), vec![0.5, 0.5]).unwrap();
    let bern = DistributionTable::new(two.clone(), vec![0.25, 0.75]).unwrap();
    assert_relative_eq!(relative_entropy(&mu, &bern).unwrap(), 0.143841036225890, epsilon = 1e-12);
    let singular = DistributionTable::new(two, vec![1.0, 0.0]).unwrap();
    assert_eq!(relative_entropy(&mu, &singular).unwrap(), f64::INFINITY);
    assert!(matches!(relative_entropy(&mu, &nu), Err(EnsembleError::Mismatch)));
}

#[test]
fn json_round_trip() {
    let nu = canonical_measure(&evans4(), 2, 2, [2, 1]).unwrap();
    let back = DistributionTable::from_json(&nu.to_json().unwrap()).unwrap();
    assert_eq!(back, nu);
    assert!(nu.to_json().unwrap().starts_with(r#"{"N":2,"d":2,"K":[2,1]"#));
}

#[test]
fn canonical_is_stationary_and_reversible() {
    for rate in [linear(), constant(), evans4()] {
        for (n, d, k) in [(3, 1, [2, 1]), (4, 1, [3, 2]), (2, 2, [2, 1]), (2, 1, [3, 3])] {
            let s = space(n, d, k);
            let nu = canonical_on(&rate, s.clone()).unwrap();
            let gen = Generator::new(&rate, s.clone()).unwrap();
            let residual = gen.forward(nu.probabilities());
            assert!(residual.iter().all(|r| r.abs() < 1e-10), "{residual:?}");
            let p = nu.probabilities();
            for i in 0..s.len() {
                for (j, q) in gen.row(i) {
                    let back = gen.row(j).find(|e| e.0 == i).map(|e| e.1).unwrap();
                    assert_relative_eq!(p[i] * q, p[j] * back, max_relative = 1e-12);
                }
            }
        }
    }
}

#[test]
fn generator_matches_dense_oracle() {
    let rate = evans4();
    let torus = Torus::new(2, 2).unwrap();
    let k = [2, 2];
    let (states, q) = dense_generator(&rate, torus, k);
    let s = Arc::new(StateSpace::new(torus, k).unwrap());
    let gen = Generator::new(&rate, s.clone()).unwrap();
    for (a, eta) in states.iter().enumerate() {
        let i = s.rank(eta);
        for (b, other) in states.iter().enumerate() {
            if a == b {
                continue;
            }
            let j = s.rank(other);
            let sparse = gen.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1);
            assert_relative_eq!(sparse, q[a][b], epsilon = 1e-14);
        }
    }
}

#[test]
fn evolve_matches_matrix_exponential() {
    let rate = linear();
    let torus = Torus::new(3, 1).unwrap();
    let k = [2, 1];
    let (states, q) = dense_generator(&rate, torus, k);
    let s = Arc::new(StateSpace::new(torus, k).unwrap());
    let start = s.rank(&states[0]);
    let mu0 = DistributionTable::point_mass(s.clone(), start);
    for t in [0.0, 0.3, 2.0, 17.0] {
        let exact = expm(&q, t);
        let mu = master_equation_evolve(&rate, &mu0, t, TimeScale::Raw).unwrap();
        let tv: f64 = states
            .iter()
            .enumerate()
            .map(|(b, eta)| (mu.probabilities()[s.rank(eta)] - exact[0][b]).abs())
            .sum::<f64>()
            * 0.5;
        assert!(tv < 1e-10, "t={t}: tv {tv}");
    }
}

#[test]
fn evolve_preserves_canonical_and_converges() {
    let rate = linear();
    let nu = canonical_measure(&rate, 3, 1, [2, 1]).unwrap();
    let out = master_equation_evolve(&rate, &nu, 3.0, TimeScale::Diffusive).unwrap();
    assert!(out.total_variation(&nu).unwrap() <= 1e-9);
    let delta = DistributionTable::point_mass(nu.space().clone(), 0);
    assert_eq!(master_equation_evolve(&rate, &delta, 0.0, TimeScale::Raw).unwrap(), delta);
    let late = master_equation_evolve(&rate, &delta, 10.0, TimeScale::Diffusive).unwrap();
    assert!(late.total_variation(&nu).unwrap() < 1e-9);
}

#[test]
fn entropy_decreases_from_point_mass() {
    let rate = evans4();
    let nu = canonical_measure(&rate, 3, 1, [3, 0]).unwrap();
    let gen = Generator::new(&rate, nu.space().clone()).unwrap();
    let delta = DistributionTable::point_mass(nu.space().clone(), 0);
    let grid: Vec<f64> = (0..12).map(|j| 0.5 * f64::from(j)).collect();
    let trace = entropy_production_trace(&gen, &delta, &nu, &grid, TimeScale::Raw).unwrap();
    assert_relative_eq!(trace[0].1, -nu.probabilities()[0].ln(), max_relative = 1e-12);
    for w in trace.windows(2) {
        assert!(w[1].1 < w[0].1);
    }
    assert!(trace.last().unwrap().1 < 1e-4);
    let flat = entropy_production_trace(&gen, &nu, &nu, &grid, TimeScale::Raw).unwrap();
    assert!(flat.iter().all(|(_, h)| h.abs() < 1e-12));
    assert!(entropy_production_trace(&gen, &nu, &nu, &[1.0, 0.5], TimeScale::Raw).is_err());
}

#[test]
fn entropy_two_time_check_on_random_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (n, d, k) in [(3, 1, [2, 1]), (4, 1, [2, 2]), (2, 2, [2, 1])] {
        let s = space(n, d, k);
        for rate in [linear(), evans4()] {
            let nu = canonical_on(&rate, s.clone()).unwrap();
            let gen = Generator::new(&rate, s.clone()).unwrap();
            for _ in 0..20 {
                let mu = random_law(&s, &mut rng);
                let t1 = rng.gen::<f64>();
                let t2 = t1 + rng.gen::<f64>();
                let h = entropy_production_trace(&gen, &mu, &nu, &[t1, t2], TimeScale::Raw).unwrap();
                assert!(h[1].1 <= h[0].1 + 1e-12);
            }
        }
    }
}

/// `½ Σ_η Σ_edges ν(η) q(η,η') (f(η') − f(η))²` over the dense generator.
fn edge_sum(q: &[Vec<f64>], nu: &[f64], f: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..q.len() {
        for j in 0..q.len() {
            if i != j {
                total += nu[i] * q[i][j] * (f[j] - f[i]).powi(2);
            }
        }
    }
    0.5 * total
}

#[test]
fn dirichlet_form_matches_edge_sum() {
    let rate = evans4();
    let torus = Torus::new(3, 1).unwrap();
    let k = [2, 2];
    let (states, q) = dense_generator(&rate, torus, k);
    let s = Arc::new(StateSpace::new(torus, k).unwrap());
    let gen = Generator::new(&rate, s.clone()).unwrap();
    let nu = canonical_on(&rate, s.clone()).unwrap();
    let nu_dense: Vec<f64> = states.iter().map(|e| nu.probabilities()[s.rank(e)]).collect();
    let to_sparse = |f: &[f64]| {
        let mut out = vec![0.0; s.len()];
        for (b, e) in states.iter().enumerate() {
            out[s.rank(e)] = f[b];
        }
        out
    };
    let ones = vec![1.0; s.len()];
    assert!(gen.dirichlet_form(&ones, &nu).unwrap().abs() < 1e-15);
    let mut indicator = vec![0.0; states.len()];
    indicator[4] = 1.0;
    let d = gen.dirichlet_form(&to_sparse(&indicator), &nu).unwrap();
    assert!(d > 0.0);
    assert_relative_eq!(d, edge_sum(&q, &nu_dense, &indicator), epsilon = 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let f: Vec<f64> = (0..states.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d = gen.dirichlet_form(&to_sparse(&f), &nu).unwrap();
        assert!((d - edge_sum(&q, &nu_dense, &f)).abs() < 1e-10);
    }
}

/// `−log P(Σ_x η(x) = K)` under the product of one-site marginals, by
/// convolving the marginal over `sites` copies.
fn conditioning_cost(thermo: &Thermo, phi: [f64; 2], sites: usize, k: [u32; 2]) -> f64 {
    let lz = thermo.log_z(phi).unwrap();
    let rate = thermo.rate();
    let (a, b) = (k[0] as usize, k[1] as usize);
    let mut one = vec![vec![0.0; b + 1]; a + 1];
    for i in 0..=a {
        for j in 0..=b {
            let mut lw = -rate.log_factorial([i as u32, j as u32]).unwrap() - lz;
            if i > 0 {
                lw += i as f64 * phi[0].ln();
            }
            if j > 0 {
                lw += j as f64 * phi[1].ln();
            }
            one[i][j] = lw.exp();
        }
    }
    let mut acc = one.clone();
    for _ in 1..sites {
        let mut next = vec![vec![0.0; b + 1]; a + 1];
        for i in 0..=a {
            for j in 0..=b {
                for u in 0..=i {
                    for v in 0..=j {
                        next[i][j] += acc[u][v] * one[i - u][j - v];
                    }
                }
            }
        }
        acc = next;
    }
    -acc[a][b].ln()
}

#[test]
fn equivalence_trace_linear_matches_poisson_closed_form() {
    let thermo = Thermo::new(linear());
    let trace = equivalence_of_ensembles_trace(&thermo, [0.5, 0.5], &[2, 3, 4, 5, 6], 1).unwrap();
    for p in &trace {
        // ν_{N,K} is ν^N_φ conditioned on the hyperplane; for Poisson sites
        // the hyperplane probability is a product of two Poisson masses.
        let n = f64::from(p.n);
        let pois = |mean: f64, k: u32| {
            let k = f64::from(k);
            k * mean.ln() - mean - statrs::function::gamma::ln_gamma(k + 1.0)
        };
        let exact = -(pois(0.5 * n, p.k[0]) + pois(0.5 * n, p.k[1]));
        assert_relative_eq!(p.entropy, exact, max_relative = 1e-10);
        assert!(p.normalized > 0.0);
    }
    for w in trace.windows(2) {
        assert!(w[1].normalized < w[0].normalized);
    }
}

#[test]
fn equivalence_trace_evans_matches_convolution() {
    let thermo = Thermo::new(evans4());
    for rho in [[0.2, 0.2], [0.6, 0.6]] {
        let phi = thermo.extended_mean_jump_rate(rho).unwrap();
        let trace = equivalence_of_ensembles_trace(&thermo, rho, &[2, 3, 4, 5], 1).unwrap();
        for p in &trace {
            assert!(p.entropy.is_finite());
            let oracle = conditioning_cost(&thermo, phi, p.n as usize, p.k);
            assert_relative_eq!(p.entropy, oracle, max_relative = 1e-8);
        }
    }
}

#[test]
fn equivalence_trace_empty_density_is_zero() {
    let thermo = Thermo::new(evans4());
    let trace = equivalence_of_ensembles_trace(&thermo, [0.0, 0.0], &[2, 3, 4], 1).unwrap();
    assert!(trace.iter().all(|p| p.entropy.abs() < 1e-15 && p.k == [0, 0]), "{trace:?}");
}

#[test]
fn particle_count_rule() {
    assert_eq!(particle_counts([0.5, 0.5], 3, 1), [2, 2]);
    assert_eq!(particle_counts([0.2, 0.2], 2, 1), [1, 1]);
    assert_eq!(particle_counts([0.0, 0.2], 5, 1), [0, 1]);
    assert_eq!(particle_counts([0.2, 0.2], 4, 2), [3, 3]);
}

#[test]
fn product_of_poisson_sites() {
    let thermo = Thermo::new(linear());
    let torus = Torus::new(8, 1).unwrap();
    let prod = slowly_varying_product(&thermo, |_| [1.0, 1.0], torus, 1e-12).unwrap();
    let m = prod.marginal(3);
    assert_eq!(m.states[0], [0, 0]);
    assert_relative_eq!(m.probability(0), (-2.0f64).exp(), max_relative = 1e-10);
    assert!(m.tail <= 1e-12);
    let single = slowly_varying_product(&thermo, |_| [1.0, 1.0], Torus::new(1, 1).unwrap(), 1e-12).unwrap();
    assert_eq!(single.sample(1, 0).occupations().len(), 1);
}

#[test]
fn cosine_profile_is_subcritical_for_evans() {
    let thermo = Thermo::new(evans4());
    let torus = Torus::new(32, 1).unwrap();
    let profile = |u: &[f64]| [0.2 + 0.1 * (2.0 * std::f64::consts::PI * u[0]).cos(), 0.15];
    let prod = slowly_varying_product(&thermo, profile, torus, 1e-12).unwrap();
    let m = prod.marginal(0);
    let mean: [f64; 2] = (0..m.states.len()).fold([0.0, 0.0], |acc, i| {
        let p = m.probability(i);
        [acc[0] + p * f64::from(m.states[i][0]), acc[1] + p * f64::from(m.states[i][1])]
    });
    assert_relative_eq!(mean[0], 0.3, epsilon = 1e-9);
    assert_relative_eq!(mean[1], 0.15, epsilon = 1e-9);
    let err = slowly_varying_product(&thermo, |_| [0.3, 0.3], torus, 1e-12).unwrap_err();
    assert!(matches!(err, EnsembleError::Supercritical { .. }));
}

#[test]
fn sampler_is_deterministic_and_unbiased() {
    let thermo = Thermo::new(linear());
    let torus = Torus::new(4000, 1).unwrap();
    let prod = slowly_varying_product(&thermo, |_| [0.7, 0.2], torus, 1e-12).unwrap();
    let a = prod.sample(9, 2);
    assert_eq!(a, prod.sample(9, 2));
    assert_ne!(a, prod.sample(9, 3));
    let sites = 4000.0;
    let t = a.totals();
    // Poisson means: 3σ band on the site average
    assert!((t[0] as f64 / sites - 0.7).abs() < 3.0 * (0.7f64 / sites).sqrt());
    assert!((t[1] as f64 / sites - 0.2).abs() < 3.0 * (0.2f64 / sites).sqrt());
}

#[test]
fn random_laws_are_reproducible_distributions() {
    let s = Arc::new(StateSpace::new(Torus::new(3, 1).unwrap(), [2, 1]).unwrap());
    let a = DistributionTable::random(s.clone(), 4, 0);
    let b = DistributionTable::random(s.clone(), 4, 0);
    let c = DistributionTable::random(s.clone(), 4, 1);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!((a.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-14);
    assert!(DistributionTable::new(s, a.probabilities().to_vec()).is_ok());
}
