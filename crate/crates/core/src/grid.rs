//! Space-time computational domain, complex field containers and the
//! unitary, zero-centred Fourier transforms that move fields between the
//! near/far-field and time/frequency representations.
//!
//! Storage order of every 3D array is `(x, y, t)` with `t` fastest:
//! `index = (ix * ny + iy) * nt + it`. Sample `i` of an axis with `n` points
//! and step `d` sits at `(i - n/2) * d`; spectral bins use the same centred
//! indexing with step `1 / (n d)`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Speed of light in nm/ps, so that `C_NM_PER_PS / lambda_nm` is in THz.
pub const C_NM_PER_PS: f64 = 299_792.458;
/// Speed of light in mm/ps.
pub const C_MM_PER_PS: f64 = 0.299_792_458;

/// Sampling of the `(x, y, t)` window. Lengths in mm, times in ps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    /// Pump carrier wavelength. Signal and idler are degenerate at twice this.
    pub pump_wavelength_nm: f64,
}

impl GridSpec {
    pub fn new(
        counts: [usize; 3],
        dx: f64,
        dy: f64,
        dt: f64,
        pump_wavelength_nm: f64,
    ) -> Result<Self> {
        for (name, n) in ["n_x", "n_y", "n_t"].iter().zip(counts) {
            if n < 2 || !n.is_power_of_two() {
                return Err(SimError::config(format!(
                    "{name} = {n} must be a power of two >= 2"
                )));
            }
        }
        for (name, v) in [
            ("dx", dx),
            ("dy", dy),
            ("dt", dt),
            ("pump wavelength", pump_wavelength_nm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::config(format!("{name} = {v} must be positive")));
            }
        }
        let grid = GridSpec {
            nx: counts[0],
            ny: counts[1],
            nt: counts[2],
            dx,
            dy,
            dt,
            pump_wavelength_nm,
        };
        // The optical frequency must stay positive across the temporal band.
        if grid.nu_t_axis()[grid.nt - 1] >= grid.carrier_frequency_thz(Beam::Signal) {
            return Err(SimError::config(
                "temporal sampling too fine: spectral window exceeds the signal carrier",
            ));
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nt]
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, it: usize) -> usize {
        (ix * self.ny + iy) * self.nt + it
    }

    pub fn dnu_x(&self) -> f64 {
        1.0 / (self.nx as f64 * self.dx)
    }

    pub fn dnu_y(&self) -> f64 {
        1.0 / (self.ny as f64 * self.dy)
    }

    /// Temporal frequency step in THz.
    pub fn dnu_t(&self) -> f64 {
        1.0 / (self.nt as f64 * self.dt)
    }

    pub fn x_axis(&self) -> Vec<f64> {
        centered_axis(self.nx, self.dx)
    }

    pub fn y_axis(&self) -> Vec<f64> {
        centered_axis(self.ny, self.dy)
    }

    pub fn t_axis(&self) -> Vec<f64> {
        centered_axis(self.nt, self.dt)
    }

    pub fn nu_x_axis(&self) -> Vec<f64> {
        centered_axis(self.nx, self.dnu_x())
    }

    pub fn nu_y_axis(&self) -> Vec<f64> {
        centered_axis(self.ny, self.dnu_y())
    }

    pub fn nu_t_axis(&self) -> Vec<f64> {
        centered_axis(self.nt, self.dnu_t())
    }

    pub fn wavelength_nm(&self, beam: Beam) -> f64 {
        match beam {
            Beam::Pump => self.pump_wavelength_nm,
            Beam::Signal | Beam::Idler => 2.0 * self.pump_wavelength_nm,
        }
    }

    pub fn carrier_frequency_thz(&self, beam: Beam) -> f64 {
        C_NM_PER_PS / self.wavelength_nm(beam)
    }

    /// Optical-frequency offset (THz) of each temporal-frequency bin.
    ///
    /// Envelopes carry `exp(-i w0 t)`, so the forward-DFT bin `nu` holds the
    /// optical frequency `nu0 - nu`.
    pub fn optical_offset_axis(&self) -> Vec<f64> {
        self.nu_t_axis().into_iter().map(|nu| -nu).collect()
    }

    /// Vacuum wavelength (nm) of each temporal-frequency bin of `beam`.
    /// Strictly increasing with the bin index.
    pub fn wavelength_axis_nm(&self, beam: Beam) -> Vec<f64> {
        let nu0 = self.carrier_frequency_thz(beam);
        self.nu_t_axis()
            .into_iter()
            .map(|nu| C_NM_PER_PS / (nu0 - nu))
            .collect()
    }
}

/// `n` samples of step `d`, zero at index `n/2`.
pub fn centered_axis(n: usize, d: f64) -> Vec<f64> {
    let half = (n / 2) as f64;
    (0..n).map(|i| (i as f64 - half) * d).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Beam {
    Pump,
    Signal,
    Idler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    H,
    V,
}

/// Representation a field is currently stored in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    NearFieldTime,
    FarFieldTime,
    NearFieldFrequency,
    FarFieldFrequency,
}

impl Domain {
    pub fn is_near_field(self) -> bool {
        matches!(self, Domain::NearFieldTime | Domain::NearFieldFrequency)
    }

    pub fn is_time(self) -> bool {
        matches!(self, Domain::NearFieldTime | Domain::FarFieldTime)
    }

    fn with_spatial(self, near: bool) -> Domain {
        match (near, self.is_time()) {
            (true, true) => Domain::NearFieldTime,
            (true, false) => Domain::NearFieldFrequency,
            (false, true) => Domain::FarFieldTime,
            (false, false) => Domain::FarFieldFrequency,
        }
    }

    fn with_temporal(self, time: bool) -> Domain {
        match (self.is_near_field(), time) {
            (true, true) => Domain::NearFieldTime,
            (true, false) => Domain::NearFieldFrequency,
            (false, true) => Domain::FarFieldTime,
            (false, false) => Domain::FarFieldFrequency,
        }
    }
}

/// Complex amplitude on the `(x, y, t)` grid, in photon-amplitude units:
/// with the unitary transforms, `sum |a|^2` is a photon number in every domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField3D {
    data: Vec<Complex64>,
    grid: GridSpec,
    beam: Beam,
    polarization: Polarization,
    domain: Domain,
}

impl ComplexField3D {
    pub fn from_vec(
        grid: GridSpec,
        beam: Beam,
        polarization: Polarization,
        domain: Domain,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(SimError::GridMismatch(format!(
                "amplitude has {} samples, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(ComplexField3D {
            data,
            grid,
            beam,
            polarization,
            domain,
        })
    }

    pub fn zeros(grid: GridSpec, beam: Beam, polarization: Polarization, domain: Domain) -> Self {
        ComplexField3D {
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
            grid,
            beam,
            polarization,
            domain,
        }
    }

    /// Builds a near-field/time field by evaluating `f(x, y, t)` on the grid.
    pub fn from_fn(
        grid: GridSpec,
        beam: Beam,
        polarization: Polarization,
        f: impl Fn(f64, f64, f64) -> Complex64,
    ) -> Self {
        let (xs, ys, ts) = (grid.x_axis(), grid.y_axis(), grid.t_axis());
        let mut data = Vec::with_capacity(grid.len());
        for &x in &xs {
            for &y in &ys {
                for &t in &ts {
                    data.push(f(x, y, t));
                }
            }
        }
        ComplexField3D {
            data,
            grid,
            beam,
            polarization,
            domain: Domain::NearFieldTime,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn beam(&self) -> Beam {
        self.beam
    }

    pub fn polarization(&self) -> Polarization {
        self.polarization
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn with_polarization(mut self, polarization: Polarization) -> Self {
        self.polarization = polarization;
        self
    }

    pub fn with_beam(mut self, beam: Beam) -> Self {
        self.beam = beam;
        self
    }

    /// Total photon number, `sum |a|^2`.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn ensure_same_grid(&self, other: &ComplexField3D) -> Result<()> {
        if self.grid != other.grid {
            return Err(SimError::GridMismatch(format!(
                "{:?} and {:?} fields live on different grids",
                self.beam, other.beam
            )));
        }
        Ok(())
    }

    pub(crate) fn require(&self, op: &'static str, ok: impl Fn(Domain) -> bool) -> Result<()> {
        if ok(self.domain) {
            Ok(())
        } else {
            Err(SimError::WrongDomain {
                op,
                found: self.domain,
            })
        }
    }

    pub fn fft_xy(mut self) -> Result<Self> {
        self.require("fft_xy", Domain::is_near_field)?;
        transform_xy(&mut self.data, self.grid.shape(), FftDirection::Forward);
        self.domain = self.domain.with_spatial(false);
        Ok(self)
    }

    pub fn ifft_xy(mut self) -> Result<Self> {
        self.require("ifft_xy", |d| !d.is_near_field())?;
        transform_xy(&mut self.data, self.grid.shape(), FftDirection::Inverse);
        self.domain = self.domain.with_spatial(true);
        Ok(self)
    }

    pub fn fft_t(mut self) -> Result<Self> {
        self.require("fft_t", Domain::is_time)?;
        transform_t(&mut self.data, self.grid.nt, FftDirection::Forward);
        self.domain = self.domain.with_temporal(false);
        Ok(self)
    }

    pub fn ifft_t(mut self) -> Result<Self> {
        self.require("ifft_t", |d| !d.is_time())?;
        transform_t(&mut self.data, self.grid.nt, FftDirection::Inverse);
        self.domain = self.domain.with_temporal(true);
        Ok(self)
    }

    /// Moves the field to `target` through the transform state machine.
    pub fn into_domain(self, target: Domain) -> Self {
        let mut f = self;
        if f.domain.is_near_field() != target.is_near_field() {
            let dir = if target.is_near_field() {
                FftDirection::Inverse
            } else {
                FftDirection::Forward
            };
            transform_xy(&mut f.data, f.grid.shape(), dir);
            f.domain = f.domain.with_spatial(target.is_near_field());
        }
        if f.domain.is_time() != target.is_time() {
            let dir = if target.is_time() {
                FftDirection::Inverse
            } else {
                FftDirection::Forward
            };
            transform_t(&mut f.data, f.grid.nt, dir);
            f.domain = f.domain.with_temporal(target.is_time());
        }
        f
    }
}

/// Non-negative, time-integrated detector image on an `nx x ny` grid,
/// stored row-major with `y` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub values: Vec<f64>,
    pub nx: usize,
    pub ny: usize,
    pub axes: ImageAxes,
}

/// Physical sampling of an image; both axes are centred on zero.
///
/// The `Time` and `TemporalFrequency` variants describe one-dimensional
/// traces stored as `n x 1` images (spatially integrated time or spectral
/// profiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ImageAxes {
    /// Transverse spatial frequencies in mm^-1.
    SpatialFrequency { dnu_x: f64, dnu_y: f64 },
    /// Transverse positions in mm.
    Position { dx: f64, dy: f64 },
    /// Time in ps.
    Time { dt: f64 },
    /// Temporal frequency in THz.
    TemporalFrequency { dnu_t: f64 },
}

impl ImageAxes {
    /// Sample steps along the two image axes; 1D traces report 1 for the second.
    pub fn steps(&self) -> [f64; 2] {
        match *self {
            ImageAxes::SpatialFrequency { dnu_x, dnu_y } => [dnu_x, dnu_y],
            ImageAxes::Position { dx, dy } => [dx, dy],
            ImageAxes::Time { dt } => [dt, 1.0],
            ImageAxes::TemporalFrequency { dnu_t } => [dnu_t, 1.0],
        }
    }

    /// Far-field and spectral coordinates are anticorrelated for twin beams.
    pub fn is_conjugate(&self) -> bool {
        matches!(self, ImageAxes::SpatialFrequency { .. } | ImageAxes::TemporalFrequency { .. })
    }

    pub fn is_trace(&self) -> bool {
        matches!(self, ImageAxes::Time { .. } | ImageAxes::TemporalFrequency { .. })
    }
}

impl Image2D {
    pub fn zeros(nx: usize, ny: usize, axes: ImageAxes) -> Self {
        Image2D {
            values: vec![0.0; nx * ny],
            nx,
            ny,
            axes,
        }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.ny + iy]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_layout(&self, other: &Image2D) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.axes == other.axes
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(n, direction))
}

/// Unitary DFT with both sample and frequency indices centred on `n/2`.
///
/// With `s_i = (-1)^i` this is `c * s_k * DFT(s_n * x_n) / sqrt(n)` where
/// `c = exp(-/+ i pi n / 2)`; no index shuffling is needed.
struct CenteredDft {
    fft: Arc<dyn Fft<f64>>,
    post: Complex64,
    n: usize,
}

impl CenteredDft {
    fn new(n: usize, direction: FftDirection) -> Self {
        let sign = match direction {
            FftDirection::Forward => -1.0,
            FftDirection::Inverse => 1.0,
        };
        let post = Complex64::from_polar(1.0 / (n as f64).sqrt(), sign * PI * n as f64 / 2.0);
        CenteredDft {
            fft: plan(n, direction),
            post,
            n,
        }
    }

    /// Transforms every consecutive length-`n` line of `buf` in place.
    fn process_lines(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        for line in buf.chunks_exact_mut(self.n) {
            for a in line.iter_mut().skip(1).step_by(2) {
                *a = -*a;
            }
        }
        scratch.resize(self.fft.get_inplace_scratch_len(), Complex64::default());
        self.fft.process_with_scratch(buf, scratch);
        for line in buf.chunks_exact_mut(self.n) {
            for (k, a) in line.iter_mut().enumerate() {
                *a *= if k % 2 == 0 { self.post } else { -self.post };
            }
        }
    }
}

/// Centred unitary transform along `t` of every `(x, y)` line.
pub(crate) fn transform_t(data: &mut [Complex64], nt: usize, direction: FftDirection) {
    let dft = CenteredDft::new(nt, direction);
    let mut scratch = Vec::new();
    dft.process_lines(data, &mut scratch);
}

/// Centred unitary transform along `x` and `y`.
pub(crate) fn transform_xy(data: &mut [Complex64], shape: [usize; 3], direction: FftDirection) {
    let [nx, ny, nt] = shape;
    let mut scratch = Vec::new();

    let dft_y = CenteredDft::new(ny, direction);
    let mut buf = vec![Complex64::default(); ny * nt];
    for ix in 0..nx {
        let plane = &mut data[ix * ny * nt..(ix + 1) * ny * nt];
        for iy in 0..ny {
            for it in 0..nt {
                buf[it * ny + iy] = plane[iy * nt + it];
            }
        }
        dft_y.process_lines(&mut buf, &mut scratch);
        for iy in 0..ny {
            for it in 0..nt {
                plane[iy * nt + it] = buf[it * ny + iy];
            }
        }
    }

    let dft_x = CenteredDft::new(nx, direction);
    let mut buf = vec![Complex64::default(); nx * nt];
    for iy in 0..ny {
        for ix in 0..nx {
            let base = (ix * ny + iy) * nt;
            for it in 0..nt {
                buf[it * nx + ix] = data[base + it];
            }
        }
        dft_x.process_lines(&mut buf, &mut scratch);
        for ix in 0..nx {
            let base = (ix * ny + iy) * nt;
            for it in 0..nt {
                data[base + it] = buf[it * nx + ix];
            }
        }
    }
}
