//! Wigner-representation vacuum inputs and the deterministic pump pulse.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Result, SimError};
use crate::grid::{Beam, ComplexField3D, Domain, GridSpec, Polarization};

/// Gaussian pump pulse. Widths are amplitude standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpParams {
    /// ps
    pub sigma_t: f64,
    /// mm, applied to both transverse axes
    pub sigma_xy: f64,
    pub wavelength_nm: f64,
    /// Peak amplitude in photon-amplitude units per grid cell. The crystal's
    /// coupling is `gain / peak_amplitude`, so `gain * length` is the peak
    /// parametric gain-length product whatever this is set to; it only
    /// controls how strongly the pump can deplete.
    pub peak_amplitude: f64,
}

impl PumpParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pump sigma_t", self.sigma_t),
            ("pump sigma_xy", self.sigma_xy),
            ("pump wavelength", self.wavelength_nm),
            ("pump peak amplitude", self.peak_amplitude),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::config(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Mean `|a|^2` per mode; 1/2 is the symmetric-ordering vacuum.
    pub variance_per_mode: f64,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            variance_per_mode: 0.5,
            seed: 1,
        }
    }
}

/// Independent random stream for one beam of one realization.
///
/// The key is the base seed; the 64-bit ChaCha stream id packs the
/// realization index and the beam so that streams never overlap.
pub fn realization_rng(seed: u64, realization: u64, beam: Beam) -> ChaCha12Rng {
    let lane = match beam {
        Beam::Signal => 0,
        Beam::Idler => 1,
        Beam::Pump => 2,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(realization.wrapping_mul(4).wrapping_add(lane));
    rng
}

/// Vacuum field for `beam` in realization `realization`: independent
/// circular complex Gaussians of variance `noise.variance_per_mode` per cell.
pub fn gen_vacuum_field(
    grid: &GridSpec,
    noise: &NoiseParams,
    beam: Beam,
    realization: u64,
) -> Result<ComplexField3D> {
    let polarization = match beam {
        Beam::Signal => Polarization::H,
        Beam::Idler => Polarization::V,
        Beam::Pump => {
            return Err(SimError::config(
                "the pump is deterministic; no vacuum field is generated for it",
            ))
        }
    };
    if !(noise.variance_per_mode > 0.0 && noise.variance_per_mode.is_finite()) {
        return Err(SimError::config("variance_per_mode must be positive"));
    }
    let quad = (noise.variance_per_mode / 2.0).sqrt();
    let mut rng = realization_rng(noise.seed, realization, beam);
    let data = (0..grid.len())
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(quad * re, quad * im)
        })
        .collect();
    ComplexField3D::from_vec(*grid, beam, polarization, Domain::NearFieldTime, data)
}

/// Fraction of the pump's integrated intensity that falls outside the grid.
pub fn pump_clipped_fraction(grid: &GridSpec, pump: &PumpParams) -> f64 {
    // intensity exp(-u^2/s^2) keeps erf(W/s) of its power inside +-W
    let inside = |half: f64, s: f64| erf(half / s);
    let wx = grid.nx as f64 * grid.dx / 2.0;
    let wy = grid.ny as f64 * grid.dy / 2.0;
    let wt = grid.nt as f64 * grid.dt / 2.0;
    1.0 - inside(wx, pump.sigma_xy) * inside(wy, pump.sigma_xy) * inside(wt, pump.sigma_t)
}

/// Deterministic separable Gaussian pump, centred, flat phase.
pub fn gen_pump(grid: &GridSpec, pump: &PumpParams) -> Result<ComplexField3D> {
    pump.validate()?;
    if (pump.wavelength_nm - grid.pump_wavelength_nm).abs() > 1e-9 * pump.wavelength_nm {
        return Err(SimError::config(format!(
            "pump wavelength {} nm differs from the grid carrier {} nm",
            pump.wavelength_nm, grid.pump_wavelength_nm
        )));
    }
    let clipped = pump_clipped_fraction(grid, pump);
    if clipped > 0.5 {
        return Err(SimError::config(format!(
            "grid window clips {:.0}% of the pump power",
            clipped * 100.0
        )));
    }
    let windows = [
        ("x", grid.nx as f64 * grid.dx, pump.sigma_xy),
        ("y", grid.ny as f64 * grid.dy, pump.sigma_xy),
        ("t", grid.nt as f64 * grid.dt, pump.sigma_t),
    ];
    for (axis, window, sigma) in windows {
        if window < 4.0 * sigma {
            log::warn!(
                "pump window along {axis} is {:.2} sigma (< 4); {:.2e} of the power is clipped",
                window / sigma,
                clipped
            );
        }
    }
    let (sx2, st2) = (2.0 * pump.sigma_xy.powi(2), 2.0 * pump.sigma_t.powi(2));
    let peak = pump.peak_amplitude;
    Ok(ComplexField3D::from_fn(
        *grid,
        Beam::Pump,
        Polarization::V,
        |x, y, t| Complex64::new(peak * (-(x * x + y * y) / sx2 - t * t / st2).exp(), 0.0),
    ))
}
