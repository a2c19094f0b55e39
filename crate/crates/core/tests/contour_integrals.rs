use spiked_lss::contour::{
    bulk_cov, bulk_mean, centering_integral, correction_term, quadrature_convergence,
    BulkIntegrals, ContourOptions, MixedPartial,
};
use spiked_lss::kernels::Kernel;
use spiked_lss::presets::Preset;
use spiked_lss::spectrum::{BulkDistribution, PopulationSpectrum};
use spiked_lss::stieltjes::{density_at, SilversteinEquation};

fn delta1() -> BulkDistribution {
    BulkDistribution::point(1.0).unwrap()
}

fn opts() -> ContourOptions {
    ContourOptions::default()
}

#[test]
fn trace_variance_real_and_complex() {
    // Var(tr B) = (p/n)(E x^4 - 1): 2c for real Gaussian, c for complex.
    let real = bulk_cov(
        &Kernel::Identity,
        &Kernel::Identity,
        0.5,
        &delta1(),
        1.0,
        0.0,
        &opts(),
    )
    .unwrap();
    assert!((real - 1.0).abs() < 1e-5, "{real}");
    let complex = bulk_cov(
        &Kernel::Identity,
        &Kernel::Identity,
        0.5,
        &delta1(),
        0.0,
        0.0,
        &opts(),
    )
    .unwrap();
    assert!((complex - 0.5).abs() < 1e-5, "{complex}");
    // Uniform entries: E x^4 = 9/5, beta = -6/5.
    let uniform = bulk_cov(
        &Kernel::Identity,
        &Kernel::Identity,
        0.5,
        &delta1(),
        1.0,
        -1.2,
        &opts(),
    )
    .unwrap();
    assert!((uniform - 0.4).abs() < 1e-5, "{uniform}");
}

#[test]
fn log_kernel_classical_law() {
    // Real Gaussian, identity population: mean log(1-c)/2, variance -2 log(1-c).
    let c: f64 = 0.5;
    let mean = bulk_mean(&Kernel::Log, c, &delta1(), 1.0, 0.0, &opts()).unwrap();
    assert!((mean - 0.5 * (1.0 - c).ln()).abs() < 1e-8, "{mean}");
    let var = bulk_cov(&Kernel::Log, &Kernel::Log, c, &delta1(), 1.0, 0.0, &opts()).unwrap();
    assert!((var + 2.0 * (1.0 - c).ln()).abs() < 1e-6, "{var}");
}

#[test]
fn trace_has_no_mean_shift() {
    for (alpha, beta) in [(1.0, 0.0), (1.0, -2.0), (0.0, 1.0)] {
        let mean = bulk_mean(&Kernel::Identity, 0.5, &delta1(), alpha, beta, &opts()).unwrap();
        assert!(mean.abs() < 1e-10, "{mean}");
    }
}

#[test]
fn constant_kernel_has_no_fluctuation() {
    let v = bulk_cov(
        &Kernel::Power(0),
        &Kernel::Log,
        0.5,
        &delta1(),
        1.0,
        0.0,
        &opts(),
    )
    .unwrap();
    assert!(v.abs() < 1e-10, "{v}");
}

#[test]
fn covariance_matrix_symmetric_psd_and_doubling() {
    let h = BulkDistribution::new([(1.0, 0.5), (2.0, 0.5)]).unwrap();
    let eq = SilversteinEquation::new(0.3, h).unwrap();
    let kernels = vec![Kernel::Identity, Kernel::Power(2), Kernel::Log];
    let b = BulkIntegrals::new(eq, &[], &kernels, &opts()).unwrap();
    let terms = b.covariance(&kernels, 1.0, 0.0).unwrap();
    let cov = &terms.total;
    for s in 0..3 {
        for t in 0..3 {
            assert!((cov[(s, t)] - cov[(t, s)]).abs() < 1e-10 * cov[(s, s)].abs().max(1.0));
        }
    }
    let eig = cov.clone().symmetric_eigenvalues();
    assert!(eig.min() > -1e-8, "{eig}");
    // Real Gaussian entries: the log(1 - a) term equals T1.
    for k in 0..3 {
        let (t1, tot) = (terms.t1[(k, k)], cov[(k, k)]);
        assert!((tot - 2.0 * t1).abs() < 1e-4 * tot.abs(), "{tot} vs {t1}");
    }
}

#[test]
fn finite_difference_mixed_partial_agrees() {
    let kernels = vec![Kernel::Identity, Kernel::Log];
    let mut o = ContourOptions {
        double_nodes: 96,
        ..opts()
    };
    let eq = SilversteinEquation::new(0.5, delta1()).unwrap();
    let analytic = BulkIntegrals::new(eq.clone(), &[], &kernels, &o)
        .unwrap()
        .covariance(&kernels, 1.0, 0.0)
        .unwrap();
    o.mixed_partial = MixedPartial::FiniteDifference;
    let fd = BulkIntegrals::new(eq, &[], &kernels, &o)
        .unwrap()
        .covariance(&kernels, 1.0, 0.0)
        .unwrap();
    for k in 0..2 {
        let (a, b) = (analytic.t3[(k, k)], fd.t3[(k, k)]);
        assert!((a - b).abs() < 1e-5 * a.abs(), "{a} vs {b}");
    }
}

#[test]
fn centering_matches_moments() {
    // Second moment of the MP law: 1 + c.
    let s = PopulationSpectrum::new(vec![], delta1(), 100, 3000).unwrap();
    let c = 100.0 / 3000.0;
    let v = centering_integral(&Kernel::Power(2), &s, &opts()).unwrap();
    assert!((v / (100.0 * (1.0 + c)) - 1.0).abs() < 1e-6, "{v}");

    // Zero atoms of H_n sit outside the contour: only the 82 bulk directions count.
    let s = Preset::CubeRoot.spectrum(100, 3000).unwrap();
    let v = centering_integral(&Kernel::Identity, &s, &opts()).unwrap();
    assert!((v - 82.0).abs() < 1e-8, "{v}");
}

#[test]
fn log_centering_matches_density_quadrature() {
    let c: f64 = 0.5;
    let p = 50;
    let s = PopulationSpectrum::new(vec![], delta1(), p, 100).unwrap();
    let v = centering_integral(&Kernel::Log, &s, &opts()).unwrap() / p as f64;
    // Substituting x = a + (b - a) sin²(θ/2) removes the square-root edges.
    let (a, b) = ((1.0 - c.sqrt()).powi(2), (1.0 + c.sqrt()).powi(2));
    let steps = 20000;
    let mut direct = 0.0;
    for k in 0..steps {
        let th = std::f64::consts::PI * (k as f64 + 0.5) / steps as f64;
        let x = a + (b - a) * (th / 2.0).sin().powi(2);
        let dx = (b - a) * 0.5 * th.sin() * std::f64::consts::PI / steps as f64;
        direct += x.ln() * density_at(x, c, &delta1()).unwrap() * dx;
    }
    assert!((v - direct).abs() < 1e-5, "{v} vs {direct}");
    // Closed form: ((c - 1)/c) ln(1 - c) - 1.
    assert!((v - ((c - 1.0) / c * (1.0 - c).ln() - 1.0)).abs() < 1e-10);
}

#[test]
fn embedded_and_bulk_centerings_agree() {
    for preset in Preset::ALL {
        let s = preset.spectrum(100, 3000).unwrap();
        let phis = spiked_lss::contour::spike_locations(&s).unwrap();
        let k = [Kernel::Power(2)];
        let emb = BulkIntegrals::new(
            SilversteinEquation::embedded(&s).unwrap(),
            &phis,
            &k,
            &opts(),
        )
        .unwrap();
        let bulk =
            BulkIntegrals::new(SilversteinEquation::bulk(&s).unwrap(), &phis, &k, &opts()).unwrap();
        let a = emb.centering(&k[0], s.n).unwrap();
        let b = bulk.centering(&k[0], s.n).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }
}

#[test]
fn correction_for_trace_is_minus_m_c_mean() {
    let h = BulkDistribution::new([(1.0, 0.25), (3.0, 0.75)]).unwrap();
    let v = correction_term(&Kernel::Identity, 18, 0.2, &h, &opts()).unwrap();
    assert!((v + 18.0 * 0.2 * h.mean()).abs() < 1e-9, "{v}");
}

#[test]
fn finite_spike_correction_approaches_limit() {
    let eq = SilversteinEquation::new(0.5, delta1()).unwrap();
    let b = BulkIntegrals::new(eq, &[], &[Kernel::Identity], &opts()).unwrap();
    let limit = b.correction(&Kernel::Identity, 1).unwrap();
    let spike = |a| spiked_lss::spectrum::ResolvedSpike {
        value: a,
        multiplicity: 1,
    };
    let mut prev = f64::INFINITY;
    for a in [10.0, 100.0, 1e4, 1e6] {
        let gap = (b.correction_finite(&Kernel::Identity, &[spike(a)]).unwrap() - limit).abs();
        assert!(gap < prev);
        prev = gap;
    }
    assert!(prev < 1e-5);
}

#[test]
fn mean_converges_under_doubling() {
    let h = delta1();
    let run = |margin: f64| {
        quadrature_convergence(16, |n| {
            let o = ContourOptions {
                margin,
                nodes: n,
                ..opts()
            };
            bulk_mean(&Kernel::Power(2), 0.5, &h, 1.0, 0.0, &o)
        })
        .unwrap()
    };
    let wide = run(0.1);
    assert!(wide.converged_at <= 512, "{:?}", wide.values);
    let tight = run(0.01);
    assert!(
        tight.converged_at >= wide.converged_at,
        "{:?}",
        tight.values
    );
}
