use std::f64::consts::PI;

use hom_sim::analysis::{gaussian_fit, law_eberly_k, FitData, FitOptions};
use hom_sim::config::SimulationConfig;
use hom_sim::crystal::nonlinear_step_slices;
use hom_sim::interferometer::{apply_defocus, apply_delay, beamsplitter_mix, half_wave_plate};
use hom_sim::oracle::{integrated_coincidence, quadrature_coincidence, GaussianBiphotonParams};
use hom_sim::{Beam, ComplexField3D, Domain, GridSpec, Polarization};
use num_complex::Complex64;
use proptest::prelude::*;

fn grid(e: [u32; 3]) -> GridSpec {
    GridSpec::new([1 << e[0], 1 << e[1], 1 << e[2]], 7.8e-3, 7.8e-3, 2.3, 354.7).unwrap()
}

fn field(g: GridSpec, beam: Beam, pol: Polarization, values: &[(f64, f64)]) -> ComplexField3D {
    let data = (0..g.len())
        .map(|k| {
            let (re, im) = values[k % values.len()];
            // break the periodicity of the short value list
            Complex64::new(re, im) * Complex64::from_polar(1.0, 0.37 * (k * k) as f64)
        })
        .collect();
    ComplexField3D::from_vec(g, beam, pol, Domain::NearFieldTime, data).unwrap()
}

fn amplitudes() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 1..40)
}

fn domains() -> impl Strategy<Value = Domain> {
    prop_oneof![
        Just(Domain::NearFieldTime),
        Just(Domain::NearFieldFrequency),
        Just(Domain::FarFieldTime),
        Just(Domain::FarFieldFrequency),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transforms_are_unitary(e in [1u32..5, 1u32..5, 1u32..5], values in amplitudes(), target in domains()) {
        let f = field(grid(e), Beam::Signal, Polarization::H, &values);
        let p0 = f.power();
        let g = f.clone().into_domain(target);
        prop_assert!((g.power() - p0).abs() <= 1e-12 * p0);
        let back = g.into_domain(Domain::NearFieldTime);
        for (a, b) in back.data().iter().zip(f.data()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn beamsplitter_conserves_power(
        values in amplitudes(),
        tx in -3.0..3.0f64,
        ty in -3.0..3.0f64,
    ) {
        let g = grid([4, 4, 2]);
        let s = field(g, Beam::Signal, Polarization::H, &values).into_domain(Domain::FarFieldFrequency);
        let mut rev = values.clone();
        rev.reverse();
        let i = half_wave_plate(field(g, Beam::Idler, Polarization::V, &rev).into_domain(Domain::FarFieldFrequency));
        let before = s.power() + i.power();
        let (a, b) = beamsplitter_mix(s, i, tx * g.dnu_x(), ty * g.dnu_y()).unwrap();
        prop_assert!((a.power() + b.power() - before).abs() <= 1e-10 * before);
    }

    #[test]
    fn delay_and_defocus_conserve_power(values in amplitudes(), delay in -10.0..10.0f64, d in 0.0..20.0f64) {
        let f = field(grid([3, 3, 5]), Beam::Signal, Polarization::H, &values);
        let p0 = f.power();
        let f = apply_delay(f, delay).unwrap();
        prop_assert!((f.power() - p0).abs() <= 1e-12 * p0);
        let f = apply_defocus(f, d).unwrap();
        prop_assert!((f.power() - p0).abs() <= 1e-12 * p0);
        prop_assert_eq!(f.domain(), Domain::NearFieldTime);
    }

    #[test]
    fn nonlinear_step_keeps_signal_minus_idler(
        p in (0.0..1e3f64, -PI..PI),
        s in (-3.0..3.0f64, -3.0..3.0f64),
        i in (-3.0..3.0f64, -3.0..3.0f64),
        dz in 1e-3..0.2f64,
    ) {
        let mut pp = [Complex64::from_polar(p.0, p.1)];
        let mut ss = [Complex64::new(s.0, s.1)];
        let mut ii = [Complex64::new(i.0, i.1)];
        let before = ss[0].norm_sqr() - ii[0].norm_sqr();
        nonlinear_step_slices(&mut pp, &mut ss, &mut ii, 4.2 / 1e3, dz, 1e3);
        let after = ss[0].norm_sqr() - ii[0].norm_sqr();
        let scale = 1.0 + ss[0].norm_sqr() + ii[0].norm_sqr();
        prop_assert!((after - before).abs() <= 1e-9 * scale);
    }

    #[test]
    fn fit_recovers_exact_gaussians(
        cx in -3.0..3.0f64,
        cy in -3.0..3.0f64,
        sx in 1.0..4.0f64,
        sy in 1.0..4.0f64,
        amp in 0.1..10.0f64,
    ) {
        let axis: Vec<f64> = (-16..16).map(f64::from).collect();
        let mut values = Vec::new();
        for &x in &axis {
            for &y in &axis {
                values.push(amp * (-(x - cx).powi(2) / (2.0 * sx * sx) - (y - cy).powi(2) / (2.0 * sy * sy)).exp());
            }
        }
        let data = FitData::grid(&[axis.clone(), axis], values).unwrap();
        let fit = gaussian_fit(&data, &FitOptions { fixed_offset: Some(0.0), ..FitOptions::default() }).unwrap();
        prop_assert!((fit.amplitude - amp).abs() < 1e-6 * amp);
        prop_assert!((fit.center[0] - cx).abs() < 1e-6 && (fit.center[1] - cy).abs() < 1e-6);
        prop_assert!((fit.sigma[0] - sx).abs() < 1e-6 && (fit.sigma[1] - sy).abs() < 1e-6);
    }

    #[test]
    fn oracle_is_even_and_bounded(
        corr in 1.0..10.0f64,
        spdc in 10.0..60.0f64,
        sx in -600.0..600.0f64,
        sy in -600.0..600.0f64,
    ) {
        let p = GaussianBiphotonParams::from_measured_widths(corr, spdc, 2.7).unwrap();
        let c = integrated_coincidence(sx, sy, &p);
        prop_assert!(c >= 0.0 && c <= p.c0() * (1.0 + 1e-12));
        prop_assert!((integrated_coincidence(-sx, sy, &p) - c).abs() <= 1e-12 * p.c0());
        prop_assert!((integrated_coincidence(sx, -sy, &p) - c).abs() <= 1e-12 * p.c0());
    }

    #[test]
    fn schmidt_estimate_is_symmetric_and_at_least_one(a in 1e-3..1.0f64, b in 1.0..100.0f64) {
        let k = law_eberly_k(a, b);
        prop_assert!(k >= 1.0);
        prop_assert!((law_eberly_k(b, a) - k).abs() <= 1e-12 * k);
        // the product alone sets the estimate
        prop_assert!((law_eberly_k(a * 2.0, b / 2.0) - k).abs() <= 1e-12 * k);
    }

    #[test]
    fn config_round_trips_through_toml(seed in any::<u64>(), n in 2usize..500, gain in 0.5..8.0f64) {
        let mut c = SimulationConfig::desk_scale();
        c.ensemble.seed = seed;
        c.ensemble.realizations = n;
        c.crystal.gain = gain;
        let back = SimulationConfig::from_toml_str(&c.to_toml_string()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn quadrature_matches_closed_form(sx in -3.0..3.0f64, sy in -3.0..3.0f64, corr in 2.0..8.0f64) {
        let p = GaussianBiphotonParams::from_measured_widths(corr, 38.2, 2.7).unwrap();
        let (qx, qy) = (sx * p.sigma_q, sy * p.sigma_spdc);
        let q = quadrature_coincidence(qx, qy, &p, 1e-8).unwrap().value;
        let c = integrated_coincidence(qx, qy, &p);
        prop_assert!((q - c).abs() <= 1e-6 * c.max(1e-3 * p.c0()));
    }
}
