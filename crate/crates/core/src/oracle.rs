//! Closed-form Gaussian biphoton model and a quadrature check of its
//! integrated coincidence rate.
//!
//! Momenta are angular (`q = 2 pi nu`, rad/mm). The wavefunction is
//! `phi0 * exp(-|q_s + q_i|^2 / (2 sigma_q^2)) * exp(-|q_s - q_i|^2 / (2 sigma_spdc^2))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBiphotonParams {
    /// Pump angular-spectrum width, rad/mm.
    pub sigma_q: f64,
    /// Phase-matching width, rad/mm.
    pub sigma_spdc: f64,
    /// Biphoton correlation time, ps.
    pub sigma_t: f64,
    pub phi0: f64,
}

impl GaussianBiphotonParams {
    pub fn new(sigma_q: f64, sigma_spdc: f64, sigma_t: f64, phi0: f64) -> Result<Self> {
        let p = GaussianBiphotonParams {
            sigma_q,
            sigma_spdc,
            sigma_t,
            phi0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_q", self.sigma_q),
            ("sigma_spdc", self.sigma_spdc),
            ("sigma_t", self.sigma_t),
            ("phi0", self.phi0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::config(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    /// Parameters matching measured widths, all as `exp(-u^2 / (2 s^2))`
    /// standard deviations in spatial-frequency units (mm^-1): the twin-beam
    /// correlation peak `corr_nu` (a function of `q_s + q_i`, so
    /// `sigma_q = sqrt(2) 2 pi corr_nu`) and the single-beam far-field
    /// width `spdc_nu` (`sigma_spdc = 2 sqrt(2) 2 pi spdc_nu`).
    pub fn from_measured_widths(corr_nu: f64, spdc_nu: f64, sigma_t: f64) -> Result<Self> {
        GaussianBiphotonParams::new(
            2f64.sqrt() * 2.0 * PI * corr_nu,
            2.0 * 2f64.sqrt() * 2.0 * PI * spdc_nu,
            sigma_t,
            1.0,
        )
    }

    /// Total twin-beam coincidences without the beamsplitter,
    /// `integral |phi|^2 d^2q_s d^2q_i`.
    pub fn c0(&self) -> f64 {
        let per_axis = PI * self.sigma_q * self.sigma_spdc / 2.0;
        2.0 * self.phi0 * self.phi0 * per_axis * per_axis
    }
}

fn norm2(v: [f64; 2]) -> f64 {
    v[0] * v[0] + v[1] * v[1]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn biphoton_wavefunction(q_s: [f64; 2], q_i: [f64; 2], p: &GaussianBiphotonParams) -> f64 {
    p.phi0
        * (-norm2(add(q_s, q_i)) / (2.0 * p.sigma_q * p.sigma_q)).exp()
        * (-norm2(sub(q_s, q_i)) / (2.0 * p.sigma_spdc * p.sigma_spdc)).exp()
}

/// Twin-beam coincidences versus momentum sum `dq = q_s + q_i`, integrated
/// over the signal momentum.
pub fn twin_beam_rate(dq: [f64; 2], p: &GaussianBiphotonParams) -> f64 {
    p.phi0 * p.phi0 * PI * p.sigma_spdc * p.sigma_spdc / 4.0 * (-norm2(dq) / (p.sigma_q * p.sigma_q)).exp()
}

/// Coincidences between the output ports at momentum sum `dq` for a delay
/// `delay` (ps).
pub fn temporal_rate(dq: [f64; 2], delay: f64, p: &GaussianBiphotonParams) -> f64 {
    twin_beam_rate(dq, p) / 2.0 * (1.0 - (-delay * delay / (p.sigma_t * p.sigma_t)).exp())
}

fn term(q_s: [f64; 2], dq: [f64; 2], shift_sum: [f64; 2], shift_diff: [f64; 2], p: &GaussianBiphotonParams) -> f64 {
    let a = sub(dq, shift_sum);
    let b = add(sub([2.0 * q_s[0], 2.0 * q_s[1]], dq), shift_diff);
    (-norm2(a) / (2.0 * p.sigma_q * p.sigma_q) - norm2(b) / (2.0 * p.sigma_spdc * p.sigma_spdc)).exp()
}

/// Joint detection probability for signal momentum `q_s` and momentum sum
/// `dq` when the tilted beamsplitter shifts the signal by `shift_s` and the
/// idler by `shift_i`.
pub fn joint_probability(
    q_s: [f64; 2],
    dq: [f64; 2],
    shift_s: [f64; 2],
    shift_i: [f64; 2],
    p: &GaussianBiphotonParams,
) -> f64 {
    let direct = term(q_s, dq, [0.0; 2], [0.0; 2], p);
    let crossed = term(q_s, dq, add(shift_s, shift_i), sub(shift_s, shift_i), p);
    0.5 * p.phi0 * p.phi0 * (direct - crossed).powi(2)
}

/// Closed-form total coincidences for a tilt that shifts the signal by
/// `(shift_x, shift_y)` and the idler by `(shift_x, -shift_y)`.
pub fn integrated_coincidence(shift_x: f64, shift_y: f64, p: &GaussianBiphotonParams) -> f64 {
    let overlap = (-shift_x * shift_x / (p.sigma_q * p.sigma_q)).exp()
        * (-shift_y * shift_y / (p.sigma_spdc * p.sigma_spdc)).exp();
    p.c0() / 2.0 * (1.0 - overlap)
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * z * p1 - k as f64 * p2) / (k + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss-Legendre rule: `panels` equal panels of `order` nodes.
fn composite_rule(lo: f64, hi: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(order);
    let h = (hi - lo) / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for k in 0..panels {
        let mid = lo + (k as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(&w) {
            out.push((mid + xi * h / 2.0, wi * h / 2.0));
        }
    }
    out
}

/// Quadrature result with the change of the last refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub last_change: f64,
    pub panels: usize,
}

const QUAD_ORDER: usize = 16;

/// Numerical integral of [`joint_probability`] over signal momentum and
/// momentum sum (4D) for the physical tilt shifts. The integrand is a sum of
/// products of per-axis Gaussians, so each product term is integrated as a
/// product of 2D per-axis integrals. Panels double until successive values
/// differ by less than `rel_tol` of the result.
pub fn quadrature_coincidence(shift_x: f64, shift_y: f64, p: &GaussianBiphotonParams, rel_tol: f64) -> Result<Quadrature> {
    p.validate()?;
    // per axis: (shift_s, shift_i)
    let axes = [(shift_x, shift_x), (shift_y, -shift_y)];
    let eval = |panels: usize| -> f64 {
        let mut dd = [0.0; 2];
        let mut cc = [0.0; 2];
        let mut dc = [0.0; 2];
        for (k, &(s, i)) in axes.iter().enumerate() {
            let (sum, diff) = (s + i, s - i);
            let dq_half = 12.0 * p.sigma_q + sum.abs();
            let qs_half = 12.0 * p.sigma_spdc / 2.0 + dq_half / 2.0 + diff.abs() / 2.0;
            let dq_rule = composite_rule(-dq_half, dq_half, panels, QUAD_ORDER);
            let qs_rule = composite_rule(-qs_half, qs_half, panels, QUAD_ORDER);
            for &(dq, wd) in &dq_rule {
                for &(qs, ws) in &qs_rule {
                    let g = |shift_sum: f64, shift_diff: f64| {
                        let a = dq - shift_sum;
                        let b = 2.0 * qs - dq + shift_diff;
                        (-a * a / (2.0 * p.sigma_q * p.sigma_q) - b * b / (2.0 * p.sigma_spdc * p.sigma_spdc)).exp()
                    };
                    let (d, c) = (g(0.0, 0.0), g(sum, diff));
                    let w = wd * ws;
                    dd[k] += w * d * d;
                    cc[k] += w * c * c;
                    dc[k] += w * d * c;
                }
            }
        }
        0.5 * p.phi0 * p.phi0 * (dd[0] * dd[1] + cc[0] * cc[1] - 2.0 * dc[0] * dc[1])
    };
    let mut panels = 2;
    let mut value = eval(panels);
    while panels < 1 << 12 {
        panels *= 2;
        let next = eval(panels);
        let change = (next - value).abs();
        value = next;
        if change <= rel_tol * p.c0() {
            return Ok(Quadrature {
                value,
                last_change: change,
                panels,
            });
        }
    }
    Err(SimError::Numerical(format!(
        "quadrature did not converge to {rel_tol:e} with {panels} panels"
    )))
}

/// One point of an oracle dip surface: relative rate `C / C_0` on a tilt
/// grid given in spatial-frequency shifts (mm^-1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub tilt_nu_x: f64,
    pub tilt_nu_y: f64,
    pub closed_form: f64,
    pub quadrature: f64,
}

pub fn oracle_surface(nu_x: &[f64], nu_y: &[f64], p: &GaussianBiphotonParams) -> Result<Vec<OraclePoint>> {
    let c0 = p.c0();
    let mut out = Vec::with_capacity(nu_x.len() * nu_y.len());
    for &vx in nu_x {
        for &vy in nu_y {
            let (sx, sy) = (2.0 * PI * vx, 2.0 * PI * vy);
            out.push(OraclePoint {
                tilt_nu_x: vx,
                tilt_nu_y: vy,
                closed_form: integrated_coincidence(sx, sy, p) / c0,
                quadrature: quadrature_coincidence(sx, sy, p, 1e-8)?.value / c0,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GaussianBiphotonParams {
        GaussianBiphotonParams::new(2.0 * PI * 5.1, 2.0 * PI * 38.2, 2.7, 1.3).unwrap()
    }

    #[test]
    fn wavefunction_examples() {
        let p = params();
        assert_eq!(biphoton_wavefunction([0.0; 2], [0.0; 2], &p), 1.3);
        let q = [12.0, -30.0];
        let ridge = biphoton_wavefunction(q, [-q[0], -q[1]], &p);
        let expected = 1.3 * (-norm2([24.0, -60.0]) / (2.0 * p.sigma_spdc.powi(2))).exp();
        assert!((ridge - expected).abs() < 1e-15);
        let qi = [3.0, 5.0];
        assert_eq!(biphoton_wavefunction(q, qi, &p), biphoton_wavefunction(qi, q, &p));
    }

    #[test]
    fn temporal_rate_examples() {
        let p = params();
        let r0 = twin_beam_rate([0.0; 2], &p);
        assert_eq!(temporal_rate([0.0; 2], 0.0, &p), 0.0);
        assert!((temporal_rate([0.0; 2], 1e3, &p) - r0 / 2.0).abs() < 1e-12 * r0);
        let at_sigma = temporal_rate([0.0; 2], 2.7, &p);
        assert!((at_sigma - r0 / 2.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-12 * r0);
        let mut last = -1.0;
        for k in 0..50 {
            let r = temporal_rate([0.0; 2], k as f64 * 0.3, &p);
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn joint_probability_vanishes_without_tilt() {
        let p = params();
        for (qs, dq) in [([1.0, 2.0], [0.5, -3.0]), ([-40.0, 7.0], [10.0, 0.0])] {
            assert_eq!(joint_probability(qs, dq, [0.0; 2], [0.0; 2], &p), 0.0);
        }
    }

    #[test]
    fn peaks_separate_by_the_shift_sum() {
        let p = params();
        let shift = [60.0, 0.0];
        // along dq_x at q_s chosen on each peak's ridge
        let mut best = (f64::MIN, 0.0);
        let mut second = (f64::MIN, 0.0);
        for k in 0..=4000 {
            let dq = -50.0 + k as f64 * 0.05;
            let v = joint_probability([dq / 2.0, 0.0], [dq, 0.0], shift, shift, &p);
            let (left, right) = if dq < 60.0 { (&mut best, v) } else { (&mut second, v) };
            if right > left.0 {
                *left = (right, dq);
            }
        }
        assert!((second.1 - best.1 - 120.0).abs() < 0.5, "{best:?} {second:?}");
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(16);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        let m30: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((m30 - 2.0 / 31.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_matches_closed_form_on_tilt_grid() {
        let p = params();
        for i in 0..5 {
            for j in 0..5 {
                let sx = 3.0 * p.sigma_q * i as f64 / 4.0;
                let sy = 3.0 * p.sigma_spdc * j as f64 / 4.0;
                let q = quadrature_coincidence(sx, sy, &p, 1e-8).unwrap().value;
                let c = integrated_coincidence(sx, sy, &p);
                assert!((q - c).abs() <= 1e-6 * c.abs().max(1e-300) || q == c, "{i} {j}: {q} {c}");
            }
        }
    }

    #[test]
    fn large_tilt_limit_is_half() {
        let p = params();
        let c = integrated_coincidence(10.0 * p.sigma_q, 0.0, &p);
        assert!((c - p.c0() / 2.0).abs() < 1e-12 * p.c0());
        assert_eq!(integrated_coincidence(0.0, 0.0, &p), 0.0);
    }

    #[test]
    fn measured_width_conversion() {
        let p = GaussianBiphotonParams::from_measured_widths(5.1, 38.2, 2.7).unwrap();
        // the dip in nu_x has the correlation width, the one in nu_y twice the
        // single-beam width
        let sx = p.sigma_q / (2f64.sqrt() * 2.0 * PI);
        let sy = p.sigma_spdc / (2f64.sqrt() * 2.0 * PI);
        assert!((sx - 5.1).abs() < 1e-12);
        assert!((sy - 2.0 * 38.2).abs() < 1e-12);
        assert!(GaussianBiphotonParams::new(0.0, 1.0, 1.0, 1.0).is_err());
    }
}
