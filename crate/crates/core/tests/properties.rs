use num_complex::Complex64;
use proptest::prelude::*;
use spiked_lss::contour::{cauchy_integral, ContourSpec};
use spiked_lss::kernels::Kernel;
use spiked_lss::presets::Preset;
use spiked_lss::spectrum::{
    build_h_n, phi, phi_prime, resolve_spikes, BulkDistribution, MomentProfile, PopulationSpectrum,
    SpikeGroup,
};
use spiked_lss::spiked::{rho, spiked_quantities};
use spiked_lss::stieltjes::{solve_finite_n_pair, solve_m_under, SilversteinEquation};

fn bulk_strategy() -> impl Strategy<Value = BulkDistribution> {
    prop::collection::vec((0.2f64..4.0, 0.1f64..1.0), 1..4).prop_map(|atoms| {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        BulkDistribution::new(atoms.into_iter().map(|(v, w)| (v, w / total))).unwrap()
    })
}

/// Spectra whose spikes sit well above the phase transition of their bulk.
fn spectrum_strategy() -> impl Strategy<Value = PopulationSpectrum> {
    (
        bulk_strategy(),
        20usize..200,
        5usize..40,
        prop::collection::vec((1.5f64..40.0, 1usize..4), 0..4),
    )
        .prop_map(|(bulk, p, ratio_inv, spikes)| {
            let n = p * ratio_inv;
            let c = p as f64 / n as f64;
            let floor = bulk.max_atom() * (1.0 + c.sqrt()) * 1.5;
            let groups = spikes
                .into_iter()
                .map(|(scale, m)| SpikeGroup::constant(floor * scale, m))
                .collect();
            PopulationSpectrum::new(groups, bulk, p, n).unwrap()
        })
}

/// Root of `z m² + (z + 1 - c) m + 1 = 0` on the Herglotz branch.
fn quadratic_root(z: Complex64, c: f64) -> Complex64 {
    let b = z + 1.0 - c;
    let disc = (b * b - 4.0 * z).sqrt();
    let r1 = (-b + disc) / (2.0 * z);
    let r2 = (-b - disc) / (2.0 * z);
    if r1.im * z.im > 0.0 {
        r1
    } else {
        r2
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn phi_increases_past_the_transition(bulk in bulk_strategy(), c in 0.01f64..2.0, a in 1.0f64..50.0, gap in 1e-3f64..20.0) {
        let alpha = bulk.max_atom() * (1.0 + a);
        prop_assume!(phi_prime(alpha, c, &bulk).unwrap() > 0.0);
        prop_assert!(phi(alpha + gap, c, &bulk).unwrap() > phi(alpha, c, &bulk).unwrap());
        prop_assert!(phi_prime(alpha + gap, c, &bulk).unwrap() > 0.0);
    }

    #[test]
    fn phi_tail_bound(bulk in bulk_strategy(), c in 0.01f64..2.0, a in 2.0f64..1e4) {
        let t_max = bulk.max_atom();
        let alpha = a * t_max * 1.0001;
        let gap = (phi(alpha, c, &bulk).unwrap() - alpha - c * bulk.mean()).abs();
        let bound = c * bulk.second_moment() / (alpha - t_max);
        // phi - alpha cancels, so allow a few ulps of alpha.
        prop_assert!(gap <= bound + 8.0 * f64::EPSILON * alpha, "{gap} > {bound}");
    }

    #[test]
    fn h_n_weights_are_normalized(s in spectrum_strategy()) {
        let (hn, h2) = build_h_n(&s);
        for h in [&hn, &h2] {
            let total: f64 = h.atoms().iter().map(|a| a.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let m = s.total_multiplicity() as f64 / s.p as f64;
        prop_assert!((hn.zero_mass() - m).abs() < 1e-12);
    }

    #[test]
    fn merging_preserves_multiplicity(values in prop::collection::vec((prop::sample::select(vec![5.0, 7.0, 9.0]), 1usize..5), 1..6)) {
        let groups: Vec<SpikeGroup> = values.iter().map(|&(v, m)| SpikeGroup::constant(v, m)).collect();
        let total: usize = values.iter().map(|v| v.1).sum();
        let s = PopulationSpectrum::new(groups, BulkDistribution::point(1.0).unwrap(), 100, 1000).unwrap();
        let resolved = resolve_spikes(&s).unwrap();
        prop_assert_eq!(resolved.iter().map(|r| r.multiplicity).sum::<usize>(), total);
        prop_assert!(resolved.windows(2).all(|w| w[0].value > w[1].value));
    }

    #[test]
    fn extra_group_lowers_rho(phis in prop::collection::vec(2.0f64..1e4, 0..5), extra in 2.0f64..1e4, n in 100usize..10_000) {
        let kernels = [Kernel::Identity, Kernel::Power(2), Kernel::Log];
        let before = rho(&kernels, &phis, n).unwrap();
        let mut more = phis.clone();
        more.push(extra);
        let after = rho(&kernels, &more, n).unwrap();
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a < b && *a > 0.0 && *b <= 1.0);
        }
    }

    #[test]
    fn theta_dominates_nu(s in spectrum_strategy()) {
        prop_assume!(s.total_multiplicity() > 0);
        let q = spiked_quantities(&s, &MomentProfile::real_gaussian()).unwrap();
        for g in &q.groups {
            prop_assert!(g.theta > 0.0 && g.nu > 0.0);
            prop_assert!(g.theta / g.nu >= 1.0 - 1e-12);
            prop_assert!((g.sigma_sq - 2.0 * g.multiplicity as f64 / g.theta).abs() < 1e-12 * g.sigma_sq);
        }
    }

    #[test]
    fn quadratic_oracle(c in 0.05f64..0.95, x in -1.0f64..5.0, y in 1e-3f64..5.0, flip in any::<bool>()) {
        let z = Complex64::new(x, if flip { -y } else { y });
        let sol = solve_m_under(z, c, &BulkDistribution::point(1.0).unwrap(), None).unwrap();
        let exact = quadratic_root(z, c);
        prop_assert!((sol.m_under - exact).norm() < 1e-10 * exact.norm().max(1.0), "{} vs {}", sol.m_under, exact);
        prop_assert!(sol.m_under.im * z.im > 0.0);
    }

    #[test]
    fn implicit_derivative_matches_differences(bulk in bulk_strategy(), c in 0.05f64..1.5, x in 0.0f64..8.0, y in 0.05f64..3.0) {
        let eq = SilversteinEquation::new(c, bulk).unwrap();
        let z = Complex64::new(x, y);
        let sol = eq.solve(z, None).unwrap();
        let h = 1e-6 * z.norm();
        let up = eq.solve(z + h, Some(sol.m_under)).unwrap().m_under;
        let down = eq.solve(z - h, Some(sol.m_under)).unwrap().m_under;
        let fd = (up - down) / (2.0 * h);
        prop_assert!((fd - sol.m_prime).norm() < 1e-5 * sol.m_prime.norm(), "{fd} vs {}", sol.m_prime);
    }

    #[test]
    fn herglotz_branch(bulk in bulk_strategy(), c in 0.05f64..3.0, x in -2.0f64..20.0, y in 1e-4f64..10.0) {
        let eq = SilversteinEquation::new(c, bulk).unwrap();
        for z in [Complex64::new(x, y), Complex64::new(x, -y)] {
            let sol = eq.solve(z, None).unwrap();
            prop_assert!(sol.m_under.im * z.im > 0.0);
            prop_assert!(sol.residual < 1e-10 * z.norm().max(1.0));
        }
    }

    #[test]
    fn kernel_derivatives_match_differences(k in 0u32..6, x in 0.1f64..10.0, coeffs in prop::collection::vec(-3.0f64..3.0, 1..5)) {
        let kernels = [Kernel::Identity, Kernel::Power(k), Kernel::Log, Kernel::Affine { a: 2.5, b: -1.0 }, Kernel::Polynomial(coeffs)];
        for f in &kernels {
            let h = 1e-5 * x;
            let fd = (f.eval_real(x + h).unwrap() - f.eval_real(x - h).unwrap()) / (2.0 * h);
            let d = f.deriv(x).unwrap();
            prop_assert!((fd - d).abs() <= 1e-7 * d.abs().max(1.0), "{f}: {fd} vs {d}");
            let complex = f.eval(Complex64::new(x, 0.0)).unwrap();
            prop_assert!((complex.re - f.eval_real(x).unwrap()).abs() <= 1e-14 * complex.re.abs().max(1.0));
            prop_assert_eq!(complex.im, 0.0);
        }
    }

    #[test]
    fn cauchy_self_test(x in -1.0f64..6.0, y in -1.0f64..1.0) {
        let spec = ContourSpec::new(0.2, 5.0, 0.5, 256).unwrap();
        let z0 = Complex64::new(x, y);
        let dist = [x - 0.2, 5.0 - x, y + 0.5, 0.5 - y].iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
        // A 256-node panel resolves a pole at this distance to 1e-10.
        prop_assume!(dist > 0.15);
        let expected = if spec.contains(z0) { Complex64::new(0.0, 2.0 * std::f64::consts::PI) } else { Complex64::new(0.0, 0.0) };
        prop_assert!((cauchy_integral(&spec, z0) - expected).norm() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embedded_and_bulk_equations_agree(idx in 0usize..3, x in -1.0f64..40.0, y in 1e-3f64..5.0, flip in any::<bool>()) {
        let s = Preset::ALL[idx].spectrum(100, 3000).unwrap();
        let z = Complex64::new(x, if flip { -y } else { y });
        let (a, b) = solve_finite_n_pair(z, &s).unwrap();
        prop_assert!((a.m_under - b.m_under).norm() < 1e-8, "{} vs {}", a.m_under, b.m_under);
    }
}
