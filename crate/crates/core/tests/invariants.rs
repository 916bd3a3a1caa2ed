use num_complex::Complex64;
use proptest::prelude::*;

use snls::config::ProblemConfig;
use snls::dynamics::{solve_forward, ControlPath, SolveOptions};
use snls::model::Problem;
use snls::optimizer::{gradient, optimize, OptimizeOptions};
use snls::paths::{sample_path, Ensemble};
use snls::space::lp_norm;

fn problem(lambda: f64, alpha: f64, m: f64, seed: u64, profile: &str) -> (ProblemConfig, Problem) {
    let text = format!(
        r#"
[grid]
dim = 1
half_extent = 8.0
points = 32

[physics]
lambda = {lambda}
alpha = {alpha}
controls = ["cosine k=1"]
initial = "gaussian width=1.5 k=0.5"
normalize = true

[noise]
intensities = [{m}, 0.1]
profiles = ["{profile}", "constant value=1.0"]
seed = {seed}

[cost]
gamma1 = 0.2
gamma2 = 0.3
terminal_target = "gaussian center=0.5"

[control]
horizon = 0.2
admissible = {{ shape = "box", lower = [-1.0], upper = [1.0] }}
"#
    );
    let cfg = ProblemConfig::from_toml_str(&text, ".").unwrap();
    let pr = cfg.build(0.01).unwrap();
    (cfg, pr)
}

fn control(values: &[f64]) -> ControlPath {
    ControlPath::new(values.to_vec(), 1, 0.01).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn forward_runs_conserve_mass(
        focusing in any::<bool>(),
        alpha in 2.0f64..4.0,
        m in 0.0f64..0.8,
        seed in 0u64..1000,
        varying in any::<bool>(),
        u in prop::collection::vec(-1.0f64..1.0, 20),
    ) {
        let profile = if varying { "cosine k=2" } else { "constant value=1.0" };
        let (_, pr) = problem(if focusing { 1.0 } else { -1.0 }, alpha, m, seed, profile);
        let path = sample_path(&pr.noise, 20, 0.01, seed).unwrap();
        let rec = solve_forward(&pr.initial, &control(&u), &path, &pr, 0.01, SolveOptions::default()).unwrap();
        let mass = &rec.diagnostics().mass;
        for v in mass {
            prop_assert!((v - mass[0]).abs() <= 1e-10 * mass[0]);
        }
    }

    #[test]
    fn norm_homogeneity(re in -3.0f64..3.0, im in -3.0f64..3.0, p in 1.0f64..6.0) {
        let (_, pr) = problem(-1.0, 3.0, 0.1, 0, "constant value=1.0");
        let c = Complex64::new(re, im);
        let lhs = lp_norm(&pr.initial.scaled(c), p).unwrap();
        let rhs = c.norm() * lp_norm(&pr.initial, p).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
    }

    #[test]
    fn gradient_is_assembled_from_the_coupling(
        seed in 0u64..1000,
        u in prop::collection::vec(-1.0f64..1.0, 20),
    ) {
        let (_, pr) = problem(-1.0, 3.0, 0.3, seed, "cosine k=1");
        let ens = Ensemble::sample(&pr.noise, 20, 0.01, 3, 0).unwrap();
        let u = control(&u);
        let rep = gradient(&u, &ens, &pr, 0.01).unwrap();
        for k in 0..20 {
            prop_assert_eq!(rep.eta[k], 2.0 * (pr.cost.gamma2 * u.values()[k] - rep.coupling[k]));
        }
    }

    #[test]
    fn optimizer_iterates_monotone_and_feasible(seed in 0u64..1000, start in -1.0f64..1.0) {
        let (cfg, pr) = problem(1.0, 3.0, 0.2, seed, "cosine k=1");
        let ens = Ensemble::sample(&pr.noise, 20, 0.01, 2, 0).unwrap();
        let mut cfg = cfg;
        cfg.control.initial = Some(vec![start]);
        let u0 = cfg.initial_control(20, 0.01).unwrap();
        let opts = OptimizeOptions { max_iters: 6, ..OptimizeOptions::default() };
        let st = optimize(&u0, &ens, &pr, 0.01, opts).unwrap();
        for w in st.history.windows(2) {
            prop_assert!(w[1].cost < w[0].cost);
        }
        prop_assert!(st.u.check_admissible(&pr.admissible).is_ok());
    }
}
