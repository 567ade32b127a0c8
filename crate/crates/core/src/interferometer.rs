//! Hong-Ou-Mandel interferometer between the crystal and the two cameras:
//! defocus of the image planes, relative delay, half-wave plate, tilted 50/50
//! beamsplitter with reflection parity, interference filter and
//! time-integrated far-field detection.
//!
//! Camera 1 receives the transmitted idler and the reflected signal, camera 2
//! the transmitted signal and the reflected idler. Without the beamsplitter
//! (the reference arrangement) camera 1 sees the idler and camera 2 the signal.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::grid::{Beam, ComplexField3D, Domain, GridSpec, Image2D, ImageAxes, Polarization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferometerConfig {
    /// Delay of the signal arm, ps. Positive means the signal arrives later.
    #[serde(default)]
    pub delay: f64,
    /// Spatial-frequency shift of the reflected beams from the horizontal
    /// tilt of the beamsplitter, mm^-1 (same sign for both beams).
    #[serde(default)]
    pub tilt_nu_x: f64,
    /// Shift from the vertical tilt, mm^-1: `+tilt_nu_y` on the reflected
    /// signal and `-tilt_nu_y` on the reflected idler.
    #[serde(default)]
    pub tilt_nu_y: f64,
    /// Defocus of the signal image plane, mm.
    #[serde(default)]
    pub defocus_signal: f64,
    #[serde(default)]
    pub defocus_idler: f64,
    pub filter_center_nm: f64,
    /// Standard deviation of the filter's intensity transmission, nm.
    pub filter_sigma_nm: f64,
}

impl InterferometerConfig {
    /// Default filter, no delay, tilt or defocus.
    pub fn balanced(filter_center_nm: f64, filter_sigma_nm: f64) -> Self {
        InterferometerConfig {
            delay: 0.0,
            tilt_nu_x: 0.0,
            tilt_nu_y: 0.0,
            defocus_signal: 0.0,
            defocus_idler: 0.0,
            filter_center_nm,
            filter_sigma_nm,
        }
    }

    /// Shifts produced by beamsplitter tilts (rad) at the pump wavelength.
    pub fn tilt_from_angles(theta_bs: f64, phi_bs: f64, pump_wavelength_nm: f64) -> (f64, f64) {
        let lambda_mm = pump_wavelength_nm * 1e-6;
        (theta_bs / lambda_mm, phi_bs / lambda_mm)
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.filter_sigma_nm > 0.0 && self.filter_sigma_nm.is_finite()) {
            return Err(SimError::config("filter width must be positive"));
        }
        if !(self.defocus_signal >= 0.0 && self.defocus_idler >= 0.0) {
            return Err(SimError::config("defocus distances must be >= 0"));
        }
        check_passband(grid, self.filter_center_nm)?;
        check_delay(grid, self.delay)?;
        for v in [self.tilt_nu_x, self.tilt_nu_y] {
            if !v.is_finite() {
                return Err(SimError::config("tilt shifts must be finite"));
            }
        }
        Ok(())
    }
}

fn check_passband(grid: &GridSpec, center_nm: f64) -> Result<()> {
    let lambdas = grid.wavelength_axis_nm(Beam::Signal);
    let (lo, hi) = (lambdas[0], lambdas[lambdas.len() - 1]);
    if !(lo..=hi).contains(&center_nm) {
        return Err(SimError::config(format!(
            "filter centre {center_nm} nm lies outside the grid's {lo:.3}-{hi:.3} nm span"
        )));
    }
    Ok(())
}

fn check_delay(grid: &GridSpec, delay: f64) -> Result<()> {
    let limit = grid.nt as f64 * grid.dt / 4.0;
    if !(delay.abs() <= limit) {
        return Err(SimError::config(format!(
            "|delay| = {} ps exceeds a quarter of the {} ps window",
            delay.abs(),
            4.0 * limit
        )));
    }
    Ok(())
}

/// Pair of camera images for one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub image_1: Image2D,
    pub image_2: Image2D,
    pub realization: u64,
    /// `None` for the reference arrangement without beamsplitter.
    pub config: Option<InterferometerConfig>,
}

/// Translates the field by `delay` ps through the spectral phase
/// `exp(-i 2 pi nu_t delay)`. Returns the field in its input domain.
pub fn apply_delay(field: ComplexField3D, delay: f64) -> Result<ComplexField3D> {
    check_delay(field.grid(), delay)?;
    if delay == 0.0 {
        return Ok(field);
    }
    let domain = field.domain();
    let target = if domain.is_near_field() {
        Domain::NearFieldFrequency
    } else {
        Domain::FarFieldFrequency
    };
    let mut f = field.into_domain(target);
    let phases = delay_phases(f.grid(), delay);
    for line in f.data_mut().chunks_exact_mut(phases.len()) {
        for (a, p) in line.iter_mut().zip(&phases) {
            *a *= p;
        }
    }
    Ok(f.into_domain(domain))
}

fn delay_phases(grid: &GridSpec, delay: f64) -> Vec<Complex64> {
    grid.nu_t_axis()
        .iter()
        .map(|nu| Complex64::from_polar(1.0, -2.0 * PI * nu * delay))
        .collect()
}

/// Paraxial free-space propagation over `distance` mm, with the wavelength of
/// each temporal-frequency slice. Returns the field in its input domain.
pub fn apply_defocus(field: ComplexField3D, distance: f64) -> Result<ComplexField3D> {
    if !(distance >= 0.0) {
        return Err(SimError::config("defocus distance must be >= 0"));
    }
    if distance == 0.0 {
        return Ok(field);
    }
    let domain = field.domain();
    let mut f = field.into_domain(Domain::FarFieldFrequency);
    let mult = defocus_multiplier(f.grid(), f.beam(), distance);
    for (a, m) in f.data_mut().iter_mut().zip(&mult) {
        *a *= m;
    }
    Ok(f.into_domain(domain))
}

fn defocus_multiplier(grid: &GridSpec, beam: Beam, distance: f64) -> Vec<Complex64> {
    let lambdas_mm: Vec<f64> = grid
        .wavelength_axis_nm(beam)
        .iter()
        .map(|l| l * 1e-6)
        .collect();
    let mut out = Vec::with_capacity(grid.len());
    for vx in grid.nu_x_axis() {
        for vy in grid.nu_y_axis() {
            let r2 = vx * vx + vy * vy;
            out.extend(
                lambdas_mm
                    .iter()
                    .map(|l| Complex64::from_polar(1.0, -PI * l * distance * r2)),
            );
        }
    }
    out
}

/// Amplitude transmission of the interference filter for every temporal
/// frequency bin: the square root of a Gaussian intensity profile.
pub fn filter_transmission(grid: &GridSpec, beam: Beam, center_nm: f64, sigma_nm: f64) -> Vec<f64> {
    grid.wavelength_axis_nm(beam)
        .iter()
        .map(|l| (-(l - center_nm).powi(2) / (4.0 * sigma_nm * sigma_nm)).exp())
        .collect()
}

pub fn spectral_filter(field: ComplexField3D, center_nm: f64, sigma_nm: f64) -> Result<ComplexField3D> {
    field.require("spectral_filter", |d| !d.is_time())?;
    if !(sigma_nm > 0.0) {
        return Err(SimError::config("filter width must be positive"));
    }
    check_passband(field.grid(), center_nm)?;
    let mut f = field;
    let amp = filter_transmission(f.grid(), f.beam(), center_nm, sigma_nm);
    for line in f.data_mut().chunks_exact_mut(amp.len()) {
        for (a, t) in line.iter_mut().zip(&amp) {
            *a *= t;
        }
    }
    Ok(f)
}

/// Mirror `x -> -x` on the centred grid (index `n -> (N - n) mod N`).
/// Valid in the near and the far field alike.
fn mirror_x(field: ComplexField3D) -> ComplexField3D {
    let g = *field.grid();
    let plane = g.ny * g.nt;
    let mut f = field;
    let data = f.data_mut();
    for ix in 1..g.nx / 2 {
        let jx = g.nx - ix;
        let (a, b) = data.split_at_mut(jx * plane);
        a[ix * plane..(ix + 1) * plane].swap_with_slice(&mut b[..plane]);
    }
    f
}

fn whole_bins(shift: f64, step: f64) -> Option<i64> {
    let k = shift / step;
    let r = k.round();
    ((k - r).abs() < 1e-9).then_some(r as i64)
}

/// Circular shift of a far-field field by whole bins: `out(nu) = in(nu - k dnu)`.
fn roll_far_field(field: ComplexField3D, kx: i64, ky: i64) -> ComplexField3D {
    if kx == 0 && ky == 0 {
        return field;
    }
    let g = *field.grid();
    let src = field.data().to_vec();
    let mut f = field;
    let data = f.data_mut();
    let (nx, ny, nt) = (g.nx as i64, g.ny as i64, g.nt);
    for ix in 0..nx {
        let sx = (ix - kx).rem_euclid(nx) as usize;
        for iy in 0..ny {
            let sy = (iy - ky).rem_euclid(ny) as usize;
            let dst = g.index(ix as usize, iy as usize, 0);
            let from = g.index(sx, sy, 0);
            data[dst..dst + nt].copy_from_slice(&src[from..from + nt]);
        }
    }
    f
}

/// Multiplies a near-field field by `exp(i 2 pi (shift_x x + shift_y y))`.
fn ramp_near_field(field: ComplexField3D, shift_x: f64, shift_y: f64) -> ComplexField3D {
    let g = *field.grid();
    let rx: Vec<Complex64> = g
        .x_axis()
        .iter()
        .map(|x| Complex64::from_polar(1.0, 2.0 * PI * shift_x * x))
        .collect();
    let ry: Vec<Complex64> = g
        .y_axis()
        .iter()
        .map(|y| Complex64::from_polar(1.0, 2.0 * PI * shift_y * y))
        .collect();
    let mut f = field;
    for (cell, line) in f.data_mut().chunks_exact_mut(g.nt).enumerate() {
        let m = rx[cell / g.ny] * ry[cell % g.ny];
        line.iter_mut().for_each(|a| *a *= m);
    }
    f
}

/// Reflection at the beamsplitter: mirror in `x`, then a momentum shift of
/// `(shift_x, shift_y)` mm^-1. Whole-bin shifts of a far-field input are done
/// by index rotation; anything else uses the near-field phase ramp.
pub fn reflect(field: ComplexField3D, shift_x: f64, shift_y: f64) -> ComplexField3D {
    let domain = field.domain();
    let g = *field.grid();
    let mirrored = mirror_x(field);
    if !domain.is_near_field() {
        if let (Some(kx), Some(ky)) = (whole_bins(shift_x, g.dnu_x()), whole_bins(shift_y, g.dnu_y())) {
            return roll_far_field(mirrored, kx, ky);
        }
    }
    let near = if domain.is_near_field() {
        domain
    } else if domain.is_time() {
        Domain::NearFieldTime
    } else {
        Domain::NearFieldFrequency
    };
    ramp_near_field(mirrored.into_domain(near), shift_x, shift_y).into_domain(domain)
}

/// Same as [`reflect`] but always through the near-field phase ramp.
pub fn reflect_by_ramp(field: ComplexField3D, shift_x: f64, shift_y: f64) -> ComplexField3D {
    let domain = field.domain();
    let near = if domain.is_time() {
        Domain::NearFieldTime
    } else {
        Domain::NearFieldFrequency
    };
    ramp_near_field(mirror_x(field).into_domain(near), shift_x, shift_y).into_domain(domain)
}

/// Adjoint of [`reflect`]: shift by `-(shift_x, shift_y)`, then mirror.
///
/// On the periodic grid this equals `reflect` with `(shift_x, -shift_y)`
/// except on the unpaired edge column, where only the adjoint form keeps the
/// beamsplitter exactly unitary for shifts that are not whole bins.
pub fn reflect_adjoint(field: ComplexField3D, shift_x: f64, shift_y: f64) -> ComplexField3D {
    let domain = field.domain();
    let g = *field.grid();
    if !domain.is_near_field() {
        if let (Some(kx), Some(ky)) = (whole_bins(shift_x, g.dnu_x()), whole_bins(shift_y, g.dnu_y())) {
            return mirror_x(roll_far_field(field, -kx, -ky));
        }
    }
    let near = if domain.is_near_field() {
        domain
    } else if domain.is_time() {
        Domain::NearFieldTime
    } else {
        Domain::NearFieldFrequency
    };
    mirror_x(ramp_near_field(field.into_domain(near), -shift_x, -shift_y)).into_domain(domain)
}

fn combine(transmitted: &ComplexField3D, reflected: &ComplexField3D, beam: Beam) -> Result<ComplexField3D> {
    let i = Complex64::new(0.0, 1.0);
    let data = transmitted
        .data()
        .iter()
        .zip(reflected.data())
        .map(|(t, r)| (t + i * r) * FRAC_1_SQRT_2)
        .collect();
    ComplexField3D::from_vec(
        *transmitted.grid(),
        beam,
        transmitted.polarization(),
        transmitted.domain(),
        data,
    )
}

/// Lossless 50/50 beamsplitter. Returns `(E_1, E_2)` with
/// `E_1 = (E_i + i R[E_s]) / sqrt 2` and `E_2 = (E_s + i R[E_i]) / sqrt 2`,
/// where the reflected signal is mirrored in `x` and shifted by
/// `(tilt_x, tilt_y)` and the reflected idler is mirrored and shifted by
/// `(tilt_x, -tilt_y)` (implemented as the adjoint of the signal's
/// reflection). The outputs carry the idler and signal beam labels.
pub fn beamsplitter_mix(
    signal: ComplexField3D,
    idler: ComplexField3D,
    tilt_nu_x: f64,
    tilt_nu_y: f64,
) -> Result<(ComplexField3D, ComplexField3D)> {
    signal.ensure_same_grid(&idler)?;
    if signal.domain() != idler.domain() {
        return Err(SimError::GridMismatch(format!(
            "beamsplitter inputs in different domains ({:?}, {:?})",
            signal.domain(),
            idler.domain()
        )));
    }
    if signal.polarization() != idler.polarization() {
        return Err(SimError::config(
            "beamsplitter inputs are orthogonally polarized; apply the half-wave plate first",
        ));
    }
    let rs = reflect(signal.clone(), tilt_nu_x, tilt_nu_y);
    let ri = reflect_adjoint(idler.clone(), tilt_nu_x, tilt_nu_y);
    let e1 = combine(&idler, &rs, Beam::Idler)?;
    let e2 = combine(&signal, &ri, Beam::Signal)?;
    Ok((e1, e2))
}

/// Half-wave plate on the idler arm: V becomes H.
pub fn half_wave_plate(field: ComplexField3D) -> ComplexField3D {
    let p = match field.polarization() {
        Polarization::H => Polarization::V,
        Polarization::V => Polarization::H,
    };
    field.with_polarization(p)
}

/// Far-field camera: `fft_xy`, then `sum |a|^2` over the temporal axis.
pub fn detect_far_field(field: ComplexField3D) -> Result<Image2D> {
    field.require("detect_far_field", |d| d.is_near_field())?;
    Ok(integrate_image(&field.fft_xy()?))
}

/// Time-integrated intensity image of a field already in a far-field domain
/// (or, for near-field images, of a near-field one). The sum over `t` equals
/// the sum over `nu_t`, so either temporal representation works.
pub fn integrate_image(field: &ComplexField3D) -> Image2D {
    let g = field.grid();
    let axes = if field.domain().is_near_field() {
        ImageAxes::Position { dx: g.dx, dy: g.dy }
    } else {
        ImageAxes::SpatialFrequency {
            dnu_x: g.dnu_x(),
            dnu_y: g.dnu_y(),
        }
    };
    let values = field
        .data()
        .chunks_exact(g.nt)
        .map(|line| line.iter().map(|a| a.norm_sqr()).sum())
        .collect();
    Image2D {
        values,
        nx: g.nx,
        ny: g.ny,
        axes,
    }
}

/// Transverse-integrated intensity versus time (time domains) or versus
/// frequency offset (frequency domains), as an `nt x 1` trace.
pub fn integrate_trace(field: &ComplexField3D) -> Image2D {
    let g = field.grid();
    let axes = if field.domain().is_time() {
        ImageAxes::Time { dt: g.dt }
    } else {
        ImageAxes::TemporalFrequency { dnu_t: g.dnu_t() }
    };
    let mut values = vec![0.0; g.nt];
    for line in field.data().chunks_exact(g.nt) {
        for (v, a) in values.iter_mut().zip(line) {
            *v += a.norm_sqr();
        }
    }
    Image2D {
        values,
        nx: g.nt,
        ny: 1,
        axes,
    }
}

/// Full pipeline from crystal-output fields (near-field, any temporal domain)
/// to the two camera images.
pub fn run_interferometer(
    signal: ComplexField3D,
    idler: ComplexField3D,
    config: &InterferometerConfig,
    realization: u64,
) -> Result<DetectorOutput> {
    config.validate(signal.grid())?;
    signal.require("run_interferometer", |d| d.is_near_field())?;
    idler.require("run_interferometer", |d| d.is_near_field())?;
    let signal = apply_defocus(signal, config.defocus_signal)?;
    let idler = apply_defocus(idler, config.defocus_idler)?;
    let signal = apply_delay(signal, config.delay)?;
    let idler = half_wave_plate(idler);
    let (e1, e2) = beamsplitter_mix(signal, idler, config.tilt_nu_x, config.tilt_nu_y)?;
    let e1 = spectral_filter(e1.into_domain(Domain::NearFieldFrequency), config.filter_center_nm, config.filter_sigma_nm)?;
    let e2 = spectral_filter(e2.into_domain(Domain::NearFieldFrequency), config.filter_center_nm, config.filter_sigma_nm)?;
    Ok(DetectorOutput {
        image_1: detect_far_field(e1)?,
        image_2: detect_far_field(e2)?,
        realization,
        config: Some(*config),
    })
}

/// One realization's crystal output, filtered and moved to the
/// far-field/frequency domain once, so that many interferometer settings
/// can be evaluated cheaply. All interferometer elements act diagonally in
/// temporal frequency, so filtering first gives the same images as
/// [`run_interferometer`].
#[derive(Debug, Clone)]
pub struct PreparedPair {
    signal: ComplexField3D,
    idler: ComplexField3D,
    realization: u64,
}

impl PreparedPair {
    pub fn new(
        signal: ComplexField3D,
        idler: ComplexField3D,
        filter_center_nm: f64,
        filter_sigma_nm: f64,
        realization: u64,
    ) -> Result<Self> {
        signal.ensure_same_grid(&idler)?;
        let signal = spectral_filter(signal.into_domain(Domain::FarFieldFrequency), filter_center_nm, filter_sigma_nm)?;
        let idler = spectral_filter(idler.into_domain(Domain::FarFieldFrequency), filter_center_nm, filter_sigma_nm)?;
        Ok(PreparedPair {
            signal,
            idler,
            realization,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        self.signal.grid()
    }

    pub fn realization(&self) -> u64 {
        self.realization
    }

    /// Filtered far-field/frequency signal and idler.
    pub fn fields(&self) -> (&ComplexField3D, &ComplexField3D) {
        (&self.signal, &self.idler)
    }

    /// Reference arrangement without beamsplitter: idler on camera 1,
    /// signal on camera 2.
    pub fn reference(&self) -> DetectorOutput {
        DetectorOutput {
            image_1: integrate_image(&self.idler),
            image_2: integrate_image(&self.signal),
            realization: self.realization,
            config: None,
        }
    }

    /// Camera images for `config`. The filter settings of `config` are
    /// ignored; the pair was filtered when it was prepared.
    pub fn detect(&self, config: &InterferometerConfig) -> Result<DetectorOutput> {
        check_delay(self.grid(), config.delay)?;
        let g = *self.grid();
        let mut signal = self.signal.clone();
        let mut idler = self.idler.clone();
        if config.defocus_signal > 0.0 || config.delay != 0.0 {
            let phases = delay_phases(&g, config.delay);
            let defocus = (config.defocus_signal > 0.0)
                .then(|| defocus_multiplier(&g, Beam::Signal, config.defocus_signal));
            for (cell, line) in signal.data_mut().chunks_exact_mut(g.nt).enumerate() {
                for (k, a) in line.iter_mut().enumerate() {
                    *a *= phases[k];
                    if let Some(d) = &defocus {
                        *a *= d[cell * g.nt + k];
                    }
                }
            }
        }
        if config.defocus_idler > 0.0 {
            let d = defocus_multiplier(&g, Beam::Idler, config.defocus_idler);
            for (a, m) in idler.data_mut().iter_mut().zip(&d) {
                *a *= m;
            }
        }
        let idler = half_wave_plate(idler);
        let (e1, e2) = beamsplitter_mix(signal, idler, config.tilt_nu_x, config.tilt_nu_y)?;
        Ok(DetectorOutput {
            image_1: integrate_image(&e1),
            image_2: integrate_image(&e2),
            realization: self.realization,
            config: Some(*config),
        })
    }
}
