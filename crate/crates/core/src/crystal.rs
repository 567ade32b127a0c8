//! Type-2 three-wave mixing in a BBO crystal, integrated with a symmetrized
//! split-step Fourier scheme: linear steps (diffraction, dispersion to second
//! order, walk-off, phase mismatch) in the far-field/frequency domain and a
//! pointwise nonlinear step in the near-field/time domain.
//!
//! Beam assignment: the pump and the idler are extraordinary waves, the
//! signal is ordinary (`e -> o + e`).

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::grid::{Beam, ComplexField3D, Domain, GridSpec, C_MM_PER_PS};

/// Sellmeier fit for beta barium borate (Eimerl et al., 1987), wavelength in um.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BboIndex;

impl BboIndex {
    pub fn n_o(&self, lambda_um: f64) -> f64 {
        let l2 = lambda_um * lambda_um;
        (2.7359 + 0.01878 / (l2 - 0.01822) - 0.01354 * l2).sqrt()
    }

    pub fn n_e_principal(&self, lambda_um: f64) -> f64 {
        let l2 = lambda_um * lambda_um;
        (2.3753 + 0.01224 / (l2 - 0.01667) - 0.01516 * l2).sqrt()
    }

    /// Extraordinary index for a wavevector at `theta` from the optic axis.
    pub fn n_e(&self, lambda_um: f64, theta: f64) -> f64 {
        let (no, ne) = (self.n_o(lambda_um), self.n_e_principal(lambda_um));
        let inv2 = theta.cos().powi(2) / (no * no) + theta.sin().powi(2) / (ne * ne);
        inv2.sqrt().recip()
    }

    /// Poynting walk-off angle of the extraordinary wave.
    pub fn walkoff(&self, lambda_um: f64, theta: f64) -> f64 {
        let (no, ne) = (self.n_o(lambda_um), self.n_e_principal(lambda_um));
        let n = self.n_e(lambda_um, theta);
        (0.5 * n * n * (1.0 / (ne * ne) - 1.0 / (no * no)) * (2.0 * theta).sin())
            .abs()
            .atan()
    }

    fn index(&self, lambda_um: f64, theta: f64, extraordinary: bool) -> f64 {
        if extraordinary {
            self.n_e(lambda_um, theta)
        } else {
            self.n_o(lambda_um)
        }
    }

    /// Cut angle giving collinear degenerate `e -> o + e` phase matching.
    pub fn type2_cut_angle(&self, pump_um: f64) -> Result<f64> {
        let signal_um = 2.0 * pump_um;
        let mismatch = |theta: f64| {
            2.0 * self.n_e(pump_um, theta) - self.n_o(signal_um) - self.n_e(signal_um, theta)
        };
        let (mut lo, mut hi) = (1e-3, PI / 2.0 - 1e-3);
        let (flo, fhi) = (mismatch(lo), mismatch(hi));
        if flo.signum() == fhi.signum() {
            return Err(SimError::config(format!(
                "no type-2 phase matching angle for a {pump_um} um pump"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mismatch(mid).signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Crystal section of the run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrystalParams {
    /// Parametric gain coefficient at the pump peak, mm^-1.
    pub gain: f64,
    /// mm
    pub length: f64,
    /// Transverse width, mm (soft aperture on the pump).
    pub width: f64,
    pub n_steps: usize,
    /// Replaces the Sellmeier walk-off of every extraordinary beam (rad).
    #[serde(default)]
    pub walkoff_override: Option<f64>,
    /// Imposed wavevector mismatch `k_p - k_s - k_i` (rad/mm).
    #[serde(default)]
    pub delta_k_override: Option<f64>,
    /// Group-velocity and GVD terms; off only for oracle tests.
    #[serde(default = "yes")]
    pub dispersion: bool,
    /// Paraxial diffraction; off only for oracle tests.
    #[serde(default = "yes")]
    pub diffraction: bool,
}

fn yes() -> bool {
    true
}

impl CrystalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return Err(SimError::config("crystal gain must be >= 0"));
        }
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(SimError::config("crystal length and width must be positive"));
        }
        if self.n_steps < 8 {
            return Err(SimError::config(format!(
                "n_steps = {} is below the minimum of 8",
                self.n_steps
            )));
        }
        Ok(())
    }
}

/// Carrier-resolved propagation constants of one beam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConstants {
    pub index: f64,
    /// rad/mm
    pub k0: f64,
    /// inverse group velocity, ps/mm
    pub k1: f64,
    /// group-velocity dispersion, ps^2/mm
    pub k2: f64,
    /// walk-off angle (rad), zero for the ordinary beam
    pub walkoff: f64,
    pub extraordinary: bool,
}

/// Dispersion and walk-off model of the cut crystal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrystalModel {
    pub theta_cut: f64,
    pub pump: BeamConstants,
    pub signal: BeamConstants,
    pub idler: BeamConstants,
    /// `k_p - k_s - k_i` at the carriers, rad/mm.
    pub delta_k: f64,
    /// Transverse drift of the simulation frame (rad); chosen so the mean
    /// pair birth position leaves the crystal on axis.
    pub frame_walkoff: f64,
}

impl CrystalModel {
    pub fn new(pump_wavelength_nm: f64, params: &CrystalParams) -> Result<Self> {
        let bbo = BboIndex;
        let pump_um = pump_wavelength_nm * 1e-3;
        let theta = bbo.type2_cut_angle(pump_um)?;
        let constants = |lambda_um: f64, extraordinary: bool| {
            let n = |l: f64| bbo.index(l, theta, extraordinary);
            let h = 1e-3 * lambda_um;
            let n0 = n(lambda_um);
            let dn = (n(lambda_um + h) - n(lambda_um - h)) / (2.0 * h);
            let d2n = (n(lambda_um + h) - 2.0 * n0 + n(lambda_um - h)) / (h * h);
            let lambda_mm = lambda_um * 1e-3;
            // dn/dl per um -> per mm: factor 1e3; d2n: 1e6
            let k1 = (n0 - lambda_um * dn) / C_MM_PER_PS;
            let k2 = lambda_mm.powi(3) / (2.0 * PI * C_MM_PER_PS.powi(2)) * d2n * 1e6;
            let walkoff = if extraordinary {
                params
                    .walkoff_override
                    .unwrap_or_else(|| bbo.walkoff(lambda_um, theta))
            } else {
                0.0
            };
            BeamConstants {
                index: n0,
                k0: 2.0 * PI * n0 / lambda_mm,
                k1,
                k2,
                walkoff,
                extraordinary,
            }
        };
        let pump = constants(pump_um, true);
        let signal = constants(2.0 * pump_um, false);
        let idler = constants(2.0 * pump_um, true);
        let natural_dk = pump.k0 - signal.k0 - idler.k0;
        if natural_dk.abs() * params.length > 1e-6 {
            return Err(SimError::Numerical(format!(
                "cut angle solve left |dk| L = {:.2e}",
                natural_dk.abs() * params.length
            )));
        }
        Ok(CrystalModel {
            theta_cut: theta,
            pump,
            signal,
            idler,
            delta_k: params.delta_k_override.unwrap_or(natural_dk),
            frame_walkoff: 0.5 * (pump.walkoff + 0.5 * idler.walkoff),
        })
    }

    pub fn beam(&self, beam: Beam) -> &BeamConstants {
        match beam {
            Beam::Pump => &self.pump,
            Beam::Signal => &self.signal,
            Beam::Idler => &self.idler,
        }
    }
}

/// Unit-modulus spectral multiplier for one linear step of one beam, laid
/// out like a far-field/frequency field.
#[derive(Debug, Clone)]
pub struct LinearStepOperator {
    pub beam: Beam,
    pub multiplier: Vec<Complex64>,
}

impl LinearStepOperator {
    pub fn apply(&self, field: ComplexField3D) -> Result<ComplexField3D> {
        if field.beam() != self.beam {
            return Err(SimError::GridMismatch(format!(
                "{:?} operator applied to a {:?} field",
                self.beam,
                field.beam()
            )));
        }
        let domain = field.domain();
        let mut f = field.into_domain(Domain::FarFieldFrequency);
        if f.data().len() != self.multiplier.len() {
            return Err(SimError::GridMismatch("operator and field sizes differ".into()));
        }
        for (a, m) in f.data_mut().iter_mut().zip(&self.multiplier) {
            *a *= m;
        }
        Ok(f.into_domain(domain))
    }
}

/// Phase accumulated by `beam` over `dz` in every far-field/frequency cell.
pub fn build_linear_operator(
    grid: &GridSpec,
    params: &CrystalParams,
    model: &CrystalModel,
    dz: f64,
    beam: Beam,
) -> LinearStepOperator {
    let c = model.beam(beam);
    let reference_k1 = model.pump.k1;
    let (nux, nuy) = (grid.nu_x_axis(), grid.nu_y_axis());
    // bin nu holds optical offset -nu
    let omegas: Vec<f64> = grid.nu_t_axis().iter().map(|nu| -2.0 * PI * nu).collect();

    let max_q = 2.0 * PI * nux[0].abs().hypot(nuy[0].abs());
    if params.diffraction && max_q >= c.k0 {
        log::warn!(
            "transverse frequencies up to {max_q:.1} rad/mm exceed k = {:.1}; clamping",
            c.k0
        );
    }

    let temporal: Vec<f64> = omegas
        .iter()
        .map(|&w| {
            if params.dispersion {
                (c.k1 - reference_k1) * w + 0.5 * c.k2 * w * w
            } else {
                0.0
            }
        })
        .collect();
    let mismatch = if beam == Beam::Pump { model.delta_k } else { 0.0 };
    let drift = c.walkoff - model.frame_walkoff;

    let mut multiplier = Vec::with_capacity(grid.len());
    for &vx in &nux {
        let qx = 2.0 * PI * vx;
        for &vy in &nuy {
            let qy = 2.0 * PI * vy;
            let q2 = (qx * qx + qy * qy).min(c.k0 * c.k0);
            let transverse = if params.diffraction {
                -q2 / (2.0 * c.k0)
            } else {
                0.0
            } - drift * qx;
            for &tp in &temporal {
                multiplier.push(Complex64::from_polar(1.0, (transverse + tp + mismatch) * dz));
            }
        }
    }
    LinearStepOperator { beam, multiplier }
}

/// Pointwise update of
/// `dS/dz = k P I*`, `dI/dz = k P S*`, `dP/dz = -k S I` over `dz`.
///
/// Cells whose pump changes by less than `1e-3` of `pump_scale` per step use
/// the closed-form solution with the pump frozen (plus a trapezoidal pump
/// update); the rest use RK4.
pub fn nonlinear_step_slices(
    pump: &mut [Complex64],
    signal: &mut [Complex64],
    idler: &mut [Complex64],
    coupling: f64,
    dz: f64,
    pump_scale: f64,
) {
    if coupling == 0.0 {
        return;
    }
    let threshold = 1e-3 * pump_scale;
    for ((p, s), i) in pump.iter_mut().zip(signal.iter_mut()).zip(idler.iter_mut()) {
        let depletion = coupling * s.norm() * i.norm() * dz;
        if depletion < threshold {
            let kp = *p * coupling;
            let a = kp.norm();
            let (ch, sh_phase) = if a > 0.0 {
                let x = a * dz;
                (x.cosh(), kp / a * x.sinh())
            } else {
                (1.0, Complex64::new(0.0, 0.0))
            };
            let s1 = *s * ch + sh_phase * i.conj();
            let i1 = *i * ch + sh_phase * s.conj();
            *p -= coupling * dz * 0.5 * (*s * *i + s1 * i1);
            *s = s1;
            *i = i1;
        } else {
            let (p1, s1, i1) = rk4_point(*p, *s, *i, coupling, dz);
            *p = p1;
            *s = s1;
            *i = i1;
        }
    }
}

fn rk4_point(
    p: Complex64,
    s: Complex64,
    i: Complex64,
    k: f64,
    dz: f64,
) -> (Complex64, Complex64, Complex64) {
    let f = |p: Complex64, s: Complex64, i: Complex64| (-k * s * i, k * p * i.conj(), k * p * s.conj());
    let substeps = 4;
    let h = dz / substeps as f64;
    let (mut p, mut s, mut i) = (p, s, i);
    for _ in 0..substeps {
        let (a1, b1, c1) = f(p, s, i);
        let (a2, b2, c2) = f(p + a1 * (h / 2.0), s + b1 * (h / 2.0), i + c1 * (h / 2.0));
        let (a3, b3, c3) = f(p + a2 * (h / 2.0), s + b2 * (h / 2.0), i + c2 * (h / 2.0));
        let (a4, b4, c4) = f(p + a3 * h, s + b3 * h, i + c3 * h);
        p += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        s += (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (h / 6.0);
        i += (c1 + c2 * 2.0 + c3 * 2.0 + c4) * (h / 6.0);
    }
    (p, s, i)
}

/// Field-level wrapper of [`nonlinear_step_slices`] with domain and grid checks.
pub fn nonlinear_step(
    pump: ComplexField3D,
    signal: ComplexField3D,
    idler: ComplexField3D,
    coupling: f64,
    dz: f64,
    pump_scale: f64,
) -> Result<(ComplexField3D, ComplexField3D, ComplexField3D)> {
    pump.ensure_same_grid(&signal)?;
    pump.ensure_same_grid(&idler)?;
    for f in [&pump, &signal, &idler] {
        f.require("nonlinear_step", |d| d == Domain::NearFieldTime)?;
    }
    let (mut p, mut s, mut i) = (pump, signal, idler);
    nonlinear_step_slices(p.data_mut(), s.data_mut(), i.data_mut(), coupling, dz, pump_scale);
    Ok((p, s, i))
}

/// Super-Gaussian transverse aperture of full width `width` (mm).
pub fn soft_aperture(x: f64, y: f64, width: f64) -> f64 {
    let h = width / 2.0;
    (-(x / h).powi(16) - (y / h).powi(16)).exp()
}

/// Precomputed split-step propagator for one grid and crystal.
#[derive(Debug, Clone)]
pub struct CrystalPropagator {
    pub params: CrystalParams,
    pub model: CrystalModel,
    grid: GridSpec,
    coupling: f64,
    pump_scale: f64,
    half: [LinearStepOperator; 3],
    full: [LinearStepOperator; 3],
}

/// Outcome of the step-doubling convergence guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConvergence {
    pub generated_photons: f64,
    pub generated_photons_doubled: f64,
    pub relative_change: f64,
}

impl CrystalPropagator {
    /// `pump_peak` is the pump's peak amplitude; the coupling is
    /// `gain / pump_peak` so that the peak gain coefficient equals `gain`.
    pub fn new(grid: &GridSpec, params: &CrystalParams, pump_peak: f64) -> Result<Self> {
        params.validate()?;
        if !(pump_peak > 0.0) {
            return Err(SimError::config("pump peak amplitude must be positive"));
        }
        let model = CrystalModel::new(grid.pump_wavelength_nm, params)?;
        let dz = params.length / params.n_steps as f64;
        let ops = |step: f64| {
            [Beam::Pump, Beam::Signal, Beam::Idler]
                .map(|b| build_linear_operator(grid, params, &model, step, b))
        };
        Ok(CrystalPropagator {
            params: *params,
            model,
            grid: *grid,
            coupling: params.gain / pump_peak,
            pump_scale: pump_peak,
            half: ops(dz / 2.0),
            full: ops(dz),
        })
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn pump_scale(&self) -> f64 {
        self.pump_scale
    }

    pub fn with_steps(&self, n_steps: usize) -> Result<Self> {
        let params = CrystalParams {
            n_steps,
            ..self.params
        };
        CrystalPropagator::new(&self.grid, &params, self.pump_scale)
    }

    /// Propagates pump, signal and idler from the input to the output face.
    /// Inputs are near-field/time; outputs are returned in the same domain.
    pub fn propagate(
        &self,
        pump: ComplexField3D,
        signal: ComplexField3D,
        idler: ComplexField3D,
    ) -> Result<(ComplexField3D, ComplexField3D, ComplexField3D)> {
        for (f, b) in [(&pump, Beam::Pump), (&signal, Beam::Signal), (&idler, Beam::Idler)] {
            if f.grid() != &self.grid {
                return Err(SimError::GridMismatch("field grid differs from the propagator's".into()));
            }
            if f.beam() != b {
                return Err(SimError::GridMismatch(format!(
                    "expected a {b:?} field, got {:?}",
                    f.beam()
                )));
            }
            f.require("propagate_crystal", |d| d == Domain::NearFieldTime)?;
        }
        let mut pump = pump;
        let (xs, ys) = (self.grid.x_axis(), self.grid.y_axis());
        let nt = self.grid.nt;
        for (cell, chunk) in pump.data_mut().chunks_exact_mut(nt).enumerate() {
            let a = soft_aperture(xs[cell / self.grid.ny], ys[cell % self.grid.ny], self.params.width);
            chunk.iter_mut().for_each(|v| *v *= a);
        }

        let mut fields = [pump, signal, idler];
        let linear = |fields: &mut [ComplexField3D; 3], ops: &[LinearStepOperator; 3]| -> Result<()> {
            for (f, op) in fields.iter_mut().zip(ops) {
                let taken = std::mem::replace(f, ComplexField3D::zeros(self.grid, op.beam, f.polarization(), Domain::NearFieldTime));
                *f = op.apply(taken)?;
            }
            Ok(())
        };

        linear(&mut fields, &self.half)?;
        for step in 0..self.params.n_steps {
            {
                let [p, s, i] = &mut fields;
                nonlinear_step_slices(
                    p.data_mut(),
                    s.data_mut(),
                    i.data_mut(),
                    self.coupling,
                    self.params.length / self.params.n_steps as f64,
                    self.pump_scale,
                );
            }
            let ops = if step + 1 == self.params.n_steps {
                &self.half
            } else {
                &self.full
            };
            linear(&mut fields, ops)?;
        }
        for f in &fields {
            if f.data().iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
                return Err(SimError::Numerical(format!(
                    "non-finite {:?} amplitude after the crystal",
                    f.beam()
                )));
            }
        }
        let [p, s, i] = fields;
        Ok((p, s, i))
    }

    /// Propagates once with `n_steps` and once with `2 n_steps`; errors if the
    /// generated signal photon number moves by 1% or more.
    pub fn check_step_convergence(
        &self,
        pump: &ComplexField3D,
        signal: &ComplexField3D,
        idler: &ComplexField3D,
    ) -> Result<StepConvergence> {
        let input = signal.power();
        let (_, s1, _) = self.propagate(pump.clone(), signal.clone(), idler.clone())?;
        let doubled = self.with_steps(2 * self.params.n_steps)?;
        let (_, s2, _) = doubled.propagate(pump.clone(), signal.clone(), idler.clone())?;
        let (g1, g2) = (s1.power() - input, s2.power() - input);
        let relative_change = if g2.abs() > 0.0 {
            (g1 - g2).abs() / g2.abs()
        } else {
            0.0
        };
        let result = StepConvergence {
            generated_photons: g1,
            generated_photons_doubled: g2,
            relative_change,
        };
        if relative_change >= 0.01 {
            return Err(SimError::Numerical(format!(
                "doubling n_steps from {} changes the generated signal power by {:.2}%; use finer steps",
                self.params.n_steps,
                relative_change * 100.0
            )));
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Polarization;

    fn params() -> CrystalParams {
        CrystalParams {
            gain: 4.2,
            length: 0.8,
            width: 1.0,
            n_steps: 16,
            walkoff_override: None,
            delta_k_override: None,
            dispersion: true,
            diffraction: true,
        }
    }

    #[test]
    fn bbo_cut_angle_and_walkoff_are_physical() {
        let m = CrystalModel::new(354.7, &params()).unwrap();
        let deg = m.theta_cut.to_degrees();
        assert!((35.0..50.0).contains(&deg), "theta = {deg}");
        assert!((m.pump.k0 - m.signal.k0 - m.idler.k0).abs() * 0.8 < 1e-6);
        for w in [m.pump.walkoff, m.idler.walkoff] {
            assert!((0.05..0.09).contains(&w), "walk-off {w}");
        }
        assert_eq!(m.signal.walkoff, 0.0);
        // group index of BBO in the UV/visible is ~1.7
        for b in [m.pump, m.signal, m.idler] {
            let ng = b.k1 * C_MM_PER_PS;
            assert!((1.6..1.8).contains(&ng), "group index {ng}");
            assert!(b.k2 > 0.0);
        }
    }

    fn grid() -> GridSpec {
        GridSpec::new([32, 32, 16], 7.8e-3, 7.8e-3, 2.3, 354.7).unwrap()
    }

    #[test]
    fn linear_operator_is_unit_modulus_and_trivial_at_origin() {
        let g = grid();
        let p = CrystalParams {
            walkoff_override: Some(0.0),
            dispersion: false,
            ..params()
        };
        let m = CrystalModel::new(354.7, &p).unwrap();
        let op = build_linear_operator(&g, &p, &m, 0.05, Beam::Signal);
        assert!(op.multiplier.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
        let origin = g.index(16, 16, 8);
        assert!((op.multiplier[origin] - Complex64::new(1.0, 0.0)).norm() < 1e-15);

        let full = build_linear_operator(&g, &params(), &m, 0.05, Beam::Idler);
        assert!(full.multiplier.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
    }

    fn centroid_and_width_x(f: &ComplexField3D) -> (f64, f64) {
        let g = f.grid();
        let xs = g.x_axis();
        let mut prof = vec![0.0; g.nx];
        for ix in 0..g.nx {
            for iy in 0..g.ny {
                for it in 0..g.nt {
                    prof[ix] += f.data()[g.index(ix, iy, it)].norm_sqr();
                }
            }
        }
        let w: f64 = prof.iter().sum();
        let m = prof.iter().zip(&xs).map(|(p, x)| p * x).sum::<f64>() / w;
        let v = prof.iter().zip(&xs).map(|(p, x)| p * (x - m).powi(2)).sum::<f64>() / w;
        (m, v.sqrt())
    }

    #[test]
    fn diffraction_matches_gaussian_beam_spreading() {
        let g = GridSpec::new([128, 8, 2], 4e-3, 4e-3, 2.3, 354.7).unwrap();
        let p = CrystalParams {
            walkoff_override: Some(0.0),
            dispersion: false,
            ..params()
        };
        let m = CrystalModel::new(354.7, &p).unwrap();
        let w0 = 0.02; // amplitude std, mm
        let f = ComplexField3D::from_fn(g, Beam::Signal, Polarization::H, |x, _, _| {
            Complex64::new((-x * x / (2.0 * w0 * w0)).exp(), 0.0)
        });
        let z = 0.8;
        let op = build_linear_operator(&g, &p, &m, z, Beam::Signal);
        let out = op.apply(f).unwrap();
        let (_, sigma_i) = centroid_and_width_x(&out);
        // intensity std: (w0/sqrt2) sqrt(1 + (z/zr)^2), zr = k w0^2
        let zr = m.signal.k0 * w0 * w0;
        let expected = w0 / 2f64.sqrt() * (1.0 + (z / zr).powi(2)).sqrt();
        assert!((sigma_i - expected).abs() / expected < 1e-6, "{sigma_i} vs {expected}");
    }

    #[test]
    fn walkoff_displaces_extraordinary_centroid() {
        let g = GridSpec::new([128, 4, 2], 7.8e-3, 7.8e-3, 2.3, 354.7).unwrap();
        let rho = 0.07;
        let p = CrystalParams {
            walkoff_override: Some(rho),
            dispersion: false,
            ..params()
        };
        let m = CrystalModel::new(354.7, &p).unwrap();
        let make = |b: Beam| {
            ComplexField3D::from_fn(g, b, Polarization::V, |x, _, _| {
                Complex64::new((-x * x / (2.0 * 0.05f64.powi(2))).exp(), 0.0)
            })
        };
        let idler = build_linear_operator(&g, &p, &m, p.length, Beam::Idler)
            .apply(make(Beam::Idler))
            .unwrap();
        let signal = build_linear_operator(&g, &p, &m, p.length, Beam::Signal)
            .apply(make(Beam::Signal))
            .unwrap();
        let (ci, _) = centroid_and_width_x(&idler);
        let (cs, _) = centroid_and_width_x(&signal);
        assert!((ci - cs - rho * p.length).abs() < 1e-9, "{}", ci - cs);
    }

    #[test]
    fn nonlinear_step_identity_without_gain() {
        let mut p = vec![Complex64::new(2.0, 0.5); 4];
        let mut s = vec![Complex64::new(0.1, -0.3); 4];
        let mut i = vec![Complex64::new(-0.2, 0.7); 4];
        let (p0, s0, i0) = (p.clone(), s.clone(), i.clone());
        nonlinear_step_slices(&mut p, &mut s, &mut i, 0.0, 0.1, 2.0);
        assert_eq!((p, s, i), (p0, s0, i0));
    }

    #[test]
    fn nonlinear_step_hyperbolic_plane_wave() {
        let (pump, eps, g, dz) = (1e6, 1e-3, 4.2e-6, 0.05);
        let mut p = vec![Complex64::new(pump, 0.0)];
        let mut s = vec![Complex64::new(eps, 0.0)];
        let mut i = vec![Complex64::new(0.0, 0.0)];
        nonlinear_step_slices(&mut p, &mut s, &mut i, g, dz, pump);
        let x: f64 = g * pump * dz;
        assert!((s[0].norm() - eps * x.cosh()).abs() < 1e-10 * eps);
        assert!((i[0].norm() - eps * x.sinh()).abs() < 1e-10 * eps);
    }

    #[test]
    fn nonlinear_step_conserves_photon_difference() {
        let mut p: Vec<Complex64> = (0..64).map(|k| Complex64::from_polar(50.0, k as f64 * 0.1)).collect();
        let mut s: Vec<Complex64> = (0..64).map(|k| Complex64::from_polar(1.0 + k as f64 * 0.1, k as f64)).collect();
        let mut i: Vec<Complex64> = (0..64).map(|k| Complex64::from_polar(0.5, -(k as f64))).collect();
        let diff = |s: &[Complex64], i: &[Complex64]| {
            s.iter().map(|a| a.norm_sqr()).sum::<f64>() - i.iter().map(|a| a.norm_sqr()).sum::<f64>()
        };
        let before = diff(&s, &i);
        // exact path
        nonlinear_step_slices(&mut p, &mut s, &mut i, 0.02, 0.05, 50.0);
        assert!((diff(&s, &i) - before).abs() / before.abs() < 1e-10);
        // RK4 path (tiny pump scale forces it)
        let before = diff(&s, &i);
        nonlinear_step_slices(&mut p, &mut s, &mut i, 0.02, 0.05, 1e-9);
        assert!((diff(&s, &i) - before).abs() / before.abs() < 1e-10);
    }

    #[test]
    fn rk4_path_conserves_pump_plus_signal() {
        let (mut p, mut s, mut i) = (
            vec![Complex64::new(1.0, 0.0)],
            vec![Complex64::new(0.3, 0.1)],
            vec![Complex64::new(0.2, -0.4)],
        );
        let before = p[0].norm_sqr() + s[0].norm_sqr();
        for _ in 0..20 {
            nonlinear_step_slices(&mut p, &mut s, &mut i, 2.0, 0.05, 1.0);
        }
        let after = p[0].norm_sqr() + s[0].norm_sqr();
        assert!((after - before).abs() < 1e-8, "{before} -> {after}");
        assert!(p[0].norm() < 1.0);
    }

    #[test]
    fn rejects_too_few_steps_and_mismatched_grids() {
        let bad = CrystalParams { n_steps: 4, ..params() };
        assert!(CrystalPropagator::new(&grid(), &bad, 1.0).is_err());

        let g = grid();
        let other = GridSpec::new([16, 16, 16], 7.8e-3, 7.8e-3, 2.3, 354.7).unwrap();
        let p = ComplexField3D::zeros(g, Beam::Pump, Polarization::V, Domain::NearFieldTime);
        let s = ComplexField3D::zeros(other, Beam::Signal, Polarization::H, Domain::NearFieldTime);
        let i = ComplexField3D::zeros(g, Beam::Idler, Polarization::V, Domain::NearFieldTime);
        assert!(matches!(
            nonlinear_step(p, s, i, 1.0, 0.1, 1.0),
            Err(SimError::GridMismatch(_))
        ));
    }
}
