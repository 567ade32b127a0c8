//! Intensity-fluctuation correlations between camera pairs, Gaussian peak
//! fits, Schmidt numbers and HOM dip rates.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::grid::{Image2D, ImageAxes, C_NM_PER_PS};
use crate::interferometer::DetectorOutput;

/// Which arrangement an ensemble was recorded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceLabel {
    WithBs,
    NoBs,
}

/// `N` image pairs with a shared layout. Pairs are kept in realization order.
#[derive(Debug, Clone)]
pub struct ImagePairEnsemble {
    pub pairs: Vec<(Image2D, Image2D)>,
    pub realizations: Vec<u64>,
    pub label: ReferenceLabel,
}

impl ImagePairEnsemble {
    pub fn new(pairs: Vec<(Image2D, Image2D)>, realizations: Vec<u64>, label: ReferenceLabel) -> Result<Self> {
        if pairs.len() != realizations.len() {
            return Err(SimError::GridMismatch("one realization index per pair expected".into()));
        }
        if let Some((a0, _)) = pairs.first() {
            for (a, b) in &pairs {
                if !a.same_layout(a0) || !b.same_layout(a0) {
                    return Err(SimError::GridMismatch("ensemble images differ in layout".into()));
                }
            }
        }
        Ok(ImagePairEnsemble {
            pairs,
            realizations,
            label,
        })
    }

    pub fn from_outputs(outputs: Vec<DetectorOutput>) -> Result<Self> {
        let label = if outputs.iter().all(|o| o.config.is_none()) {
            ReferenceLabel::NoBs
        } else {
            ReferenceLabel::WithBs
        };
        let realizations = outputs.iter().map(|o| o.realization).collect();
        let pairs = outputs.into_iter().map(|o| (o.image_1, o.image_2)).collect();
        ImagePairEnsemble::new(pairs, realizations, label)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn layout(&self) -> Option<&Image2D> {
        self.pairs.first().map(|p| &p.0)
    }
}

/// Subtracts the per-pixel ensemble mean from every image of both cameras.
pub fn fluctuation_stack(ensemble: &ImagePairEnsemble) -> Result<ImagePairEnsemble> {
    let n = ensemble.len();
    if n < 2 {
        return Err(SimError::config(format!(
            "fluctuations need at least 2 realizations, got {n}"
        )));
    }
    let mean = |pick: fn(&(Image2D, Image2D)) -> &Image2D| {
        let mut m = vec![0.0; pick(&ensemble.pairs[0]).values.len()];
        for p in &ensemble.pairs {
            for (a, v) in m.iter_mut().zip(&pick(p).values) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= n as f64);
        m
    };
    let m1 = mean(|p| &p.0);
    let m2 = mean(|p| &p.1);
    let sub = |img: &Image2D, m: &[f64]| Image2D {
        values: img.values.iter().zip(m).map(|(v, a)| v - a).collect(),
        ..img.clone()
    };
    Ok(ImagePairEnsemble {
        pairs: ensemble
            .pairs
            .iter()
            .map(|(a, b)| (sub(a, &m1), sub(b, &m2)))
            .collect(),
        realizations: ensemble.realizations.clone(),
        label: ensemble.label,
    })
}

/// How camera-2 coordinates are paired with camera-1 coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// `u_2 = -u_1 + offset`: far field and spectra.
    Sum,
    /// `u_2 = u_1 + offset`: near field and time.
    Difference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Normalization {
    /// Mean over realizations of the summed fluctuation products.
    Covariance,
    /// Divided by the maximum value.
    PeakNormalized,
    /// Divided by the reference peak total given.
    Relative { reference_total: f64 },
}

/// Correlation of fluctuations versus coordinate offset on an `nx x ny`
/// grid (`ny = 1` for traces), zero offset at index `(nx/2, ny/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub values: Vec<f64>,
    /// Standard error of each value over realizations.
    pub std_error: Vec<f64>,
    pub nx: usize,
    pub ny: usize,
    pub axes: ImageAxes,
    pub pairing: Pairing,
    pub normalization: Normalization,
    pub realizations: usize,
}

impl CorrelationMap {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.ny + iy]
    }

    pub fn offset_axes(&self) -> [Vec<f64>; 2] {
        let [sx, sy] = self.axes.steps();
        let axis = |n: usize, d: f64| (0..n).map(|i| (i as f64 - (n / 2) as f64) * d).collect();
        [axis(self.nx, sx), axis(self.ny, if self.ny == 1 { 0.0 } else { sy })]
    }

    pub fn peak_normalized(&self) -> CorrelationMap {
        let peak = self.values.iter().cloned().fold(f64::MIN, f64::max);
        let scale = if peak != 0.0 { 1.0 / peak } else { 1.0 };
        self.scaled(scale, Normalization::PeakNormalized)
    }

    pub fn relative_to(&self, reference_total: f64) -> CorrelationMap {
        self.scaled(1.0 / reference_total, Normalization::Relative { reference_total })
    }

    fn scaled(&self, k: f64, normalization: Normalization) -> CorrelationMap {
        CorrelationMap {
            values: self.values.iter().map(|v| v * k).collect(),
            std_error: self.std_error.iter().map(|v| v * k.abs()).collect(),
            normalization,
            ..self.clone()
        }
    }

    /// Largest `|value| / std_error` over the map.
    pub fn max_z_score(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.std_error)
            .filter(|(_, s)| **s > 0.0)
            .map(|(v, s)| (v / s).abs())
            .fold(0.0, f64::max)
    }
}

/// Zero-padded FFT engine for linear correlations of `nx x ny` images.
struct Correlator {
    nx: usize,
    ny: usize,
    px: usize,
    py: usize,
    planner: FftPlanner<f64>,
}

impl Correlator {
    fn new(nx: usize, ny: usize) -> Self {
        let pad = |n: usize| if n == 1 { 1 } else { 2 * n };
        Correlator {
            nx,
            ny,
            px: pad(nx),
            py: pad(ny),
            planner: FftPlanner::new(),
        }
    }

    fn fft2(&mut self, buf: &mut [Complex64], dir: FftDirection) {
        let (px, py) = (self.px, self.py);
        if py > 1 {
            let f = self.planner.plan_fft(py, dir);
            f.process(buf);
        }
        if px > 1 {
            let f = self.planner.plan_fft(px, dir);
            let mut col = vec![Complex64::default(); px];
            for iy in 0..py {
                for ix in 0..px {
                    col[ix] = buf[ix * py + iy];
                }
                f.process(&mut col);
                for ix in 0..px {
                    buf[ix * py + iy] = col[ix];
                }
            }
        }
    }

    fn padded(&mut self, values: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::default(); self.px * self.py];
        for ix in 0..self.nx {
            for iy in 0..self.ny {
                buf[ix * self.py + iy] = Complex64::new(values[ix * self.ny + iy], 0.0);
            }
        }
        self.fft2(&mut buf, FftDirection::Forward);
        buf
    }

    /// Linear correlation cropped to `nx x ny` centred offsets.
    fn correlate(&mut self, a: &[f64], b: &[f64], pairing: Pairing) -> Vec<f64> {
        let fa = self.padded(a);
        let fb = self.padded(b);
        let mut prod: Vec<Complex64> = match pairing {
            Pairing::Sum => fa.iter().zip(&fb).map(|(x, y)| x * y).collect(),
            Pairing::Difference => fa.iter().zip(&fb).map(|(x, y)| x.conj() * y).collect(),
        };
        self.fft2(&mut prod, FftDirection::Inverse);
        let norm = (self.px * self.py) as f64;
        let (nx, ny, px, py) = (self.nx, self.ny, self.px, self.py);
        let lag = |j: usize, n: usize, p: usize| -> usize {
            let half = (n / 2) as i64;
            let k = match pairing {
                // centred indices: u1 + u2 = (i1 + i2 - n) d, so index j <-> k = j + n/2
                Pairing::Sum => j as i64 + half,
                Pairing::Difference => j as i64 - half,
            };
            k.rem_euclid(p as i64) as usize
        };
        let mut out = vec![0.0; nx * ny];
        for jx in 0..nx {
            let kx = if px == 1 { 0 } else { lag(jx, nx, px) };
            for jy in 0..ny {
                let ky = if py == 1 { 0 } else { lag(jy, ny, py) };
                out[jx * ny + jy] = prod[kx * py + ky].re / norm;
            }
        }
        out
    }
}

fn check_pairing(axes: &ImageAxes, pairing: Pairing) -> Result<()> {
    let expected = if axes.is_conjugate() {
        Pairing::Sum
    } else {
        Pairing::Difference
    };
    if pairing != expected {
        return Err(SimError::config(format!(
            "{pairing:?} pairing does not apply to {axes:?} images"
        )));
    }
    Ok(())
}

/// Per-realization correlation maps of the fluctuation stack.
pub fn realization_maps(ensemble: &ImagePairEnsemble, pairing: Pairing) -> Result<Vec<Vec<f64>>> {
    let layout = ensemble
        .layout()
        .ok_or_else(|| SimError::config("empty ensemble"))?
        .clone();
    check_pairing(&layout.axes, pairing)?;
    let fl = fluctuation_stack(ensemble)?;
    let mut corr = Correlator::new(layout.nx, layout.ny);
    Ok(fl
        .pairs
        .iter()
        .map(|(a, b)| corr.correlate(&a.values, &b.values, pairing))
        .collect())
}

fn summarize(maps: &[Vec<f64>], layout: &Image2D, pairing: Pairing) -> CorrelationMap {
    let n = maps.len() as f64;
    let len = maps[0].len();
    let mut mean = vec![0.0; len];
    for m in maps {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v / n;
        }
    }
    let mut var = vec![0.0; len];
    for m in maps {
        for ((a, v), mu) in var.iter_mut().zip(m).zip(&mean) {
            *a += (v - mu).powi(2) / (n - 1.0);
        }
    }
    CorrelationMap {
        values: mean,
        std_error: var.iter().map(|v| (v / n).sqrt()).collect(),
        nx: layout.nx,
        ny: layout.ny,
        axes: layout.axes,
        pairing,
        normalization: Normalization::Covariance,
        realizations: maps.len(),
    }
}

/// `values(offset) = (1/N) sum_n sum_u dI_1(u) dI_2(+-u + offset)`.
pub fn momentum_correlation(ensemble: &ImagePairEnsemble, pairing: Pairing) -> Result<CorrelationMap> {
    let maps = realization_maps(ensemble, pairing)?;
    Ok(summarize(&maps, ensemble.layout().expect("non-empty"), pairing))
}

/// Same as [`momentum_correlation`] for ensembles of time or spectral traces.
pub fn temporal_spectral_correlation(ensemble: &ImagePairEnsemble, pairing: Pairing) -> Result<CorrelationMap> {
    let layout = ensemble
        .layout()
        .ok_or_else(|| SimError::config("empty ensemble"))?;
    if !layout.axes.is_trace() {
        return Err(SimError::config("temporal/spectral correlation needs 1D traces"));
    }
    momentum_correlation(ensemble, pairing)
}

/// Samples for a Gaussian fit: one coordinate vector per value.
#[derive(Debug, Clone)]
pub struct FitData {
    pub coords: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub dims: usize,
}

impl FitData {
    /// Row-major grid over `axes` (the first axis slowest).
    pub fn grid(axes: &[Vec<f64>], values: Vec<f64>) -> Result<Self> {
        let expected: usize = axes.iter().map(Vec::len).product();
        if expected != values.len() || axes.is_empty() {
            return Err(SimError::config("fit grid and values differ in size"));
        }
        let mut coords = Vec::with_capacity(values.len());
        for k in 0..values.len() {
            let mut rem = k;
            let mut c = vec![0.0; axes.len()];
            for d in (0..axes.len()).rev() {
                c[d] = axes[d][rem % axes[d].len()];
                rem /= axes[d].len();
            }
            coords.push(c);
        }
        Ok(FitData {
            coords,
            values,
            dims: axes.len(),
        })
    }

    /// A correlation map as fit data, dropping the degenerate axis of traces.
    pub fn from_map(map: &CorrelationMap) -> Result<Self> {
        let [ax, ay] = map.offset_axes();
        if map.ny == 1 {
            FitData::grid(&[ax], map.values.clone())
        } else {
            FitData::grid(&[ax, ay], map.values.clone())
        }
    }

    /// Keeps samples with every coordinate within `half_width` of `center`.
    pub fn window(&self, center: &[f64], half_width: &[f64]) -> FitData {
        let keep: Vec<usize> = (0..self.values.len())
            .filter(|&k| {
                self.coords[k]
                    .iter()
                    .zip(center)
                    .zip(half_width)
                    .all(|((c, m), h)| (c - m).abs() <= *h)
            })
            .collect();
        FitData {
            coords: keep.iter().map(|&k| self.coords[k].clone()).collect(),
            values: keep.iter().map(|&k| self.values[k]).collect(),
            dims: self.dims,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Holds the offset at this value instead of fitting it.
    pub fixed_offset: Option<f64>,
    /// Minimum `(peak - background) / noise` required before fitting, with
    /// the noise taken as the median absolute deviation of the samples.
    pub min_peak_snr: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            fixed_offset: None,
            min_peak_snr: Some(3.0),
        }
    }
}

/// `amplitude * exp(-sum (u_k - center_k)^2 / (2 sigma_k^2)) + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub sigma: Vec<f64>,
    pub offset: f64,
    /// Euclidean norm of the residuals.
    pub residual_norm: f64,
    pub iterations: usize,
}

impl GaussianFit {
    pub fn eval(&self, u: &[f64]) -> f64 {
        let e: f64 = u
            .iter()
            .zip(&self.center)
            .zip(&self.sigma)
            .map(|((x, c), s)| (x - c).powi(2) / (2.0 * s * s))
            .sum();
        self.amplitude * (-e).exp() + self.offset
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Levenberg-Marquardt least-squares Gaussian fit with moment-style
/// initialization (peak position, half-maximum extent).
pub fn gaussian_fit(data: &FitData, options: &FitOptions) -> Result<GaussianFit> {
    let d = data.dims;
    let n = data.values.len();
    let free_offset = options.fixed_offset.is_none();
    let n_par = 2 + 2 * d - usize::from(!free_offset);
    if n <= n_par {
        return Err(SimError::FitFailed(format!("{n} samples for {n_par} parameters")));
    }
    if data.values.iter().any(|v| !v.is_finite()) {
        return Err(SimError::FitFailed("non-finite samples".into()));
    }
    let background = options.fixed_offset.unwrap_or_else(|| median(&data.values));
    let (imax, &vmax) = data
        .values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let height = vmax - background;
    let deviations: Vec<f64> = data.values.iter().map(|v| (v - background).abs()).collect();
    let noise = 1.4826 * median(&deviations);
    if !(height > 0.0) {
        return Err(SimError::FitFailed("no peak above the background".into()));
    }
    if let Some(snr) = options.min_peak_snr {
        if noise > 0.0 && height < snr * noise {
            return Err(SimError::FitFailed(format!(
                "peak {:.3e} is below {snr} x noise {:.3e}",
                height, noise
            )));
        }
    }

    // initial widths: extent of the above-half-maximum samples around the peak
    let peak = data.coords[imax].clone();
    let mut sigma0 = vec![0.0; d];
    for k in 0..d {
        let mut spread: f64 = 0.0;
        let mut step = f64::INFINITY;
        for (c, v) in data.coords.iter().zip(&data.values) {
            let dk = (c[k] - peak[k]).abs();
            if dk > 0.0 {
                step = step.min(dk);
            }
            let on_line = (0..d).all(|j| j == k || (c[j] - peak[j]).abs() < 1e-12);
            if on_line && v - background >= height / 2.0 {
                spread = spread.max(dk);
            }
        }
        let step = if step.is_finite() { step } else { 1.0 };
        sigma0[k] = (spread + step / 2.0) / (2.0 * 2f64.ln()).sqrt();
    }

    let mut p = Vec::with_capacity(n_par);
    p.push(height);
    p.extend(&peak);
    p.extend(&sigma0);
    if free_offset {
        p.push(background);
    }
    let unpack = |p: &[f64]| -> GaussianFit {
        GaussianFit {
            amplitude: p[0],
            center: p[1..1 + d].to_vec(),
            sigma: p[1 + d..1 + 2 * d].to_vec(),
            offset: if free_offset { p[1 + 2 * d] } else { background },
            residual_norm: 0.0,
            iterations: 0,
        }
    };
    let residuals = |p: &[f64]| -> DVector<f64> {
        let g = unpack(p);
        DVector::from_iterator(n, data.coords.iter().zip(&data.values).map(|(c, v)| g.eval(c) - v))
    };
    let jacobian = |p: &[f64]| -> DMatrix<f64> {
        let g = unpack(p);
        let mut j = DMatrix::zeros(n, n_par);
        for (row, c) in data.coords.iter().enumerate() {
            let mut e = 0.0;
            for k in 0..d {
                e += (c[k] - g.center[k]).powi(2) / (2.0 * g.sigma[k].powi(2));
            }
            let ex = (-e).exp();
            j[(row, 0)] = ex;
            for k in 0..d {
                let u = c[k] - g.center[k];
                let s = g.sigma[k];
                j[(row, 1 + k)] = g.amplitude * ex * u / (s * s);
                j[(row, 1 + d + k)] = g.amplitude * ex * u * u / (s * s * s);
            }
            if free_offset {
                j[(row, 1 + 2 * d)] = 1.0;
            }
        }
        j
    };

    let mut r = residuals(&p);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let j = jacobian(&p);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        if g.amax() <= 1e-15 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..n_par {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = residuals(&trial);
            let ct = rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let rel_step = step
                    .iter()
                    .zip(&p)
                    .map(|(s, v)| s.abs() / (v.abs() + 1e-300))
                    .fold(0.0, f64::max);
                let drop = cost - ct;
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                if rel_step < 1e-12 || drop <= 1e-15 * cost.max(1e-300) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent possible: at a minimum to working precision
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(SimError::FitFailed(format!(
            "no convergence in {} iterations",
            options.max_iterations
        )));
    }
    let mut fit = unpack(&p);
    fit.sigma.iter_mut().for_each(|s| *s = s.abs());
    fit.residual_norm = cost.sqrt();
    fit.iterations = iterations;
    if !(fit.amplitude > 0.0) || fit.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(SimError::FitFailed(format!("degenerate fit {fit:?}")));
    }
    Ok(fit)
}

/// Per-dimension Schmidt numbers `K = 1 / (4 sigma_u^2 sigma_nu^2)` and the
/// space-time dimensionality `sqrt(K_x K_y K_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchmidtNumbers {
    pub k_x: f64,
    pub k_y: f64,
    pub k_t: f64,
    pub dimensionality: f64,
}

/// Widths in mm, mm^-1, ps and THz.
pub fn schmidt_numbers(
    sigma_x: f64,
    sigma_y: f64,
    sigma_t: f64,
    sigma_nu_x: f64,
    sigma_nu_y: f64,
    sigma_nu_t: f64,
) -> Result<SchmidtNumbers> {
    for v in [sigma_x, sigma_y, sigma_t, sigma_nu_x, sigma_nu_y, sigma_nu_t] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SimError::config(format!("width {v} must be positive")));
        }
    }
    let k = |a: f64, b: f64| 1.0 / (4.0 * a * a * b * b);
    let (k_x, k_y, k_t) = (k(sigma_x, sigma_nu_x), k(sigma_y, sigma_nu_y), k(sigma_t, sigma_nu_t));
    Ok(SchmidtNumbers {
        k_x,
        k_y,
        k_t,
        dimensionality: (k_x * k_y * k_t).sqrt(),
    })
}

/// Schmidt number of a Gaussian pump of width `sigma_pump` (mm) and a
/// phase-matching function of spatial-frequency width `sigma_nu` (mm^-1):
/// `(b + 1/b)^2 / 4` with `b = 2 pi sigma_pump sigma_nu`.
pub fn law_eberly_k(sigma_pump: f64, sigma_nu: f64) -> f64 {
    let b = sigma_pump * 2.0 * PI * sigma_nu;
    0.25 * (b + 1.0 / b).powi(2)
}

/// Spectral width in THz to wavelength width in nm around `lambda_nm`.
pub fn frequency_to_wavelength_width(sigma_nu_thz: f64, lambda_nm: f64) -> f64 {
    lambda_nm * lambda_nm / C_NM_PER_PS * sigma_nu_thz
}

/// Elliptical window of `n_sigma` fitted widths around a peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakWindow {
    pub center: [f64; 2],
    pub sigma: [f64; 2],
    pub n_sigma: f64,
}

impl PeakWindow {
    pub fn contains(&self, u: [f64; 2]) -> bool {
        let q: f64 = (0..2)
            .map(|k| ((u[k] - self.center[k]) / self.sigma[k]).powi(2))
            .sum();
        q <= self.n_sigma * self.n_sigma
    }

    /// Window of the reflected-reflected peak for a horizontal shift: the
    /// centre is mirrored in `x` and moved by `2 tilt_nu_x`.
    pub fn reflected(&self, tilt_nu_x: f64) -> PeakWindow {
        PeakWindow {
            center: [-self.center[0] + 2.0 * tilt_nu_x, self.center[1]],
            ..*self
        }
    }
}

/// Boolean mask over a map for the union of `windows`.
pub fn window_mask(map_like: (&[Vec<f64>; 2], usize, usize), windows: &[PeakWindow]) -> Vec<bool> {
    let (axes, nx, ny) = map_like;
    let mut mask = vec![false; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let u = [axes[0][ix], axes[1][iy]];
            mask[ix * ny + iy] = windows.iter().any(|w| w.contains(u));
        }
    }
    mask
}

/// No-BS reference: fitted twin-beam peak, its window and the total
/// coincidences inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePeak {
    pub map: CorrelationMap,
    pub fit: GaussianFit,
    pub window: PeakWindow,
    pub total: f64,
}

pub fn reference_peak(reference: &ImagePairEnsemble, n_sigma: f64) -> Result<ReferencePeak> {
    if reference.label != ReferenceLabel::NoBs {
        return Err(SimError::config("reference ensemble must be recorded without the beamsplitter"));
    }
    let map = momentum_correlation(reference, Pairing::Sum)?;
    let fit = gaussian_fit(&FitData::from_map(&map)?, &FitOptions::default())?;
    let window = PeakWindow {
        center: [fit.center[0], fit.center[1]],
        sigma: [fit.sigma[0], fit.sigma[1]],
        n_sigma,
    };
    let axes = map.offset_axes();
    let mask = window_mask((&axes, map.nx, map.ny), &[window]);
    let total: f64 = map.values.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum();
    if !(total > 0.0) {
        return Err(SimError::Numerical("reference coincidence total is not positive".into()));
    }
    Ok(ReferencePeak {
        map,
        fit,
        window,
        total,
    })
}

/// Relative coincidence rate of one scan point.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub rate: f64,
    pub std_error: f64,
    pub map: CorrelationMap,
}

/// Sum of the with-BS correlation map over the reference window and the
/// reflected-peak window, divided by the reference total.
pub fn relative_rate(ensemble: &ImagePairEnsemble, reference: &ReferencePeak, tilt_nu_x: f64) -> Result<RatePoint> {
    let maps = realization_maps(ensemble, Pairing::Sum)?;
    let layout = ensemble.layout().expect("non-empty");
    if layout.nx != reference.map.nx || layout.ny != reference.map.ny || layout.axes != reference.map.axes {
        return Err(SimError::GridMismatch("scan images differ from the reference layout".into()));
    }
    let map = summarize(&maps, layout, Pairing::Sum);
    let axes = map.offset_axes();
    let windows = [reference.window, reference.window.reflected(tilt_nu_x)];
    let mask = window_mask((&axes, map.nx, map.ny), &windows);
    let sums: Vec<f64> = maps
        .iter()
        .map(|m| m.iter().zip(&mask).filter(|(_, k)| **k).map(|(v, _)| v).sum::<f64>() / reference.total)
        .collect();
    let n = sums.len() as f64;
    let rate = sums.iter().sum::<f64>() / n;
    let var = sums.iter().map(|s| (s - rate).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RatePoint {
        rate,
        std_error: (var / n).sqrt(),
        map,
    })
}

/// Relative rates along a scan and the Gaussian fit of `1 - 2 rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct DipScanResult {
    /// Scan coordinates of every point (one or two per point).
    pub points: Vec<Vec<f64>>,
    pub rates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub fit: Option<GaussianFit>,
    pub fit_error: Option<String>,
    pub window: Option<PeakWindow>,
}

/// Fits `1 - 2 rate` with a zero-offset Gaussian (the distinguishable
/// plateau is 1/2 by the normalization). `axes` gives the scan grid; pass one
/// axis for a 1D scan.
pub fn fit_dip(axes: &[Vec<f64>], rates: &[f64], std_errors: &[f64]) -> Result<DipScanResult> {
    let y: Vec<f64> = rates.iter().map(|r| 1.0 - 2.0 * r).collect();
    let data = FitData::grid(axes, y)?;
    let options = FitOptions {
        fixed_offset: Some(0.0),
        min_peak_snr: None,
        ..FitOptions::default()
    };
    let (fit, fit_error) = match gaussian_fit(&data, &options) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(DipScanResult {
        points: data.coords,
        rates: rates.to_vec(),
        std_errors: std_errors.to_vec(),
        fit,
        fit_error,
        window: None,
    })
}

/// Location of the strongest peak of a coincidence map outside
/// `exclude`, refined by a Gaussian fit over `n_sigma` of the window widths.
pub fn locate_secondary_peak(map: &CorrelationMap, exclude: &PeakWindow) -> Result<[f64; 2]> {
    let axes = map.offset_axes();
    let mut best = (f64::MIN, [0.0, 0.0]);
    for ix in 0..map.nx {
        for iy in 0..map.ny {
            let u = [axes[0][ix], axes[1][iy]];
            if !exclude.contains(u) && map.at(ix, iy) > best.0 {
                best = (map.at(ix, iy), u);
            }
        }
    }
    let data = FitData::from_map(map)?.window(&best.1, &[exclude.n_sigma * exclude.sigma[0], exclude.n_sigma * exclude.sigma[1]]);
    let fit = gaussian_fit(&data, &FitOptions { min_peak_snr: None, ..FitOptions::default() })?;
    Ok([fit.center[0], fit.center[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn axes() -> ImageAxes {
        ImageAxes::SpatialFrequency { dnu_x: 1.0, dnu_y: 1.0 }
    }

    fn image(values: Vec<f64>, n: usize) -> Image2D {
        Image2D {
            values,
            nx: n,
            ny: n,
            axes: axes(),
        }
    }

    #[test]
    fn fluctuations_of_constant_and_two_image_ensembles() {
        let a = image(vec![2.0; 16], 4);
        let e = ImagePairEnsemble::new(vec![(a.clone(), a.clone()); 3], vec![0, 1, 2], ReferenceLabel::NoBs).unwrap();
        let f = fluctuation_stack(&e).unwrap();
        assert!(f.pairs.iter().all(|(x, y)| x.values.iter().chain(&y.values).all(|v| *v == 0.0)));

        let b = image((0..16).map(|k| k as f64).collect(), 4);
        let e = ImagePairEnsemble::new(vec![(a.clone(), a.clone()), (b.clone(), b.clone())], vec![0, 1], ReferenceLabel::NoBs).unwrap();
        let f = fluctuation_stack(&e).unwrap();
        for k in 0..16 {
            let half = (a.values[k] - b.values[k]) / 2.0;
            assert!((f.pairs[0].0.values[k] - half).abs() < 1e-15);
            assert!((f.pairs[1].0.values[k] + half).abs() < 1e-15);
        }
        let single = ImagePairEnsemble::new(vec![(a.clone(), a)], vec![0], ReferenceLabel::NoBs).unwrap();
        assert!(fluctuation_stack(&single).is_err());
    }

    #[test]
    fn fluctuation_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<_> = (0..7)
            .map(|_| {
                let v: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
                (image(v.clone(), 4), image(v, 4))
            })
            .collect();
        let e = ImagePairEnsemble::new(pairs, (0..7).collect(), ReferenceLabel::NoBs).unwrap();
        let f = fluctuation_stack(&e).unwrap();
        for k in 0..16 {
            let m: f64 = f.pairs.iter().map(|p| p.0.values[k]).sum();
            assert!(m.abs() < 1e-14);
        }
    }

    /// Direct O(n^4) evaluation of one realization's pairing sum.
    fn brute(a: &[f64], b: &[f64], n: usize, pairing: Pairing) -> Vec<f64> {
        let h = (n / 2) as i64;
        let mut out = vec![0.0; n * n];
        for jx in 0..n as i64 {
            for jy in 0..n as i64 {
                let (dx, dy) = (jx - h, jy - h);
                let mut s = 0.0;
                for ix in 0..n as i64 {
                    for iy in 0..n as i64 {
                        let (ux, uy) = (ix - h, iy - h);
                        let (vx, vy) = match pairing {
                            Pairing::Sum => (-ux + dx, -uy + dy),
                            Pairing::Difference => (ux + dx, uy + dy),
                        };
                        let (kx, ky) = (vx + h, vy + h);
                        if (0..n as i64).contains(&kx) && (0..n as i64).contains(&ky) {
                            s += a[(ix * n as i64 + iy) as usize] * b[(kx * n as i64 + ky) as usize];
                        }
                    }
                }
                out[(jx * n as i64 + jy) as usize] = s;
            }
        }
        out
    }

    #[test]
    fn fft_correlation_matches_direct_sums() {
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut c = Correlator::new(n, n);
        for pairing in [Pairing::Sum, Pairing::Difference] {
            let fast = c.correlate(&a, &b, pairing);
            let slow = brute(&a, &b, n, pairing);
            for (x, y) in fast.iter().zip(&slow) {
                assert!((x - y).abs() < 1e-12, "{pairing:?}");
            }
        }
    }

    #[test]
    fn anticorrelated_pixels_give_peak_at_zero_sum() {
        // camera 2 fluctuates at the mirror pixel of camera 1
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pairs = Vec::new();
        for _ in 0..50 {
            let a: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let mut b = vec![0.0; n * n];
            for ix in 0..n {
                for iy in 0..n {
                    let (mx, my) = ((n - ix) % n, (n - iy) % n);
                    b[mx * n + my] = a[ix * n + iy];
                }
            }
            pairs.push((image(a, n), image(b, n)));
        }
        let e = ImagePairEnsemble::new(pairs, (0..50).collect(), ReferenceLabel::NoBs).unwrap();
        let map = momentum_correlation(&e, Pairing::Sum).unwrap();
        let (imax, _) = map.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(imax, (n / 2) * n + n / 2);
        assert!(momentum_correlation(&e, Pairing::Difference).is_err());
    }

    #[test]
    fn independent_stacks_are_white() {
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = (0..200)
            .map(|_| {
                let a: Vec<f64> = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let b: Vec<f64> = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                (image(a, n), image(b, n))
            })
            .collect();
        let e = ImagePairEnsemble::new(pairs, (0..200).collect(), ReferenceLabel::NoBs).unwrap();
        let map = momentum_correlation(&e, Pairing::Sum).unwrap();
        assert!(map.max_z_score() < 5.0, "{}", map.max_z_score());
    }

    #[test]
    fn gaussian_fit_recovers_exact_parameters() {
        let ax: Vec<f64> = (0..41).map(|k| (k as f64 - 20.0) * 0.5).collect();
        let ay: Vec<f64> = (0..31).map(|k| (k as f64 - 15.0) * 0.7).collect();
        let truth = GaussianFit {
            amplitude: 3.0,
            center: vec![1.3, -0.8],
            sigma: vec![2.1, 3.4],
            offset: 0.25,
            residual_norm: 0.0,
            iterations: 0,
        };
        let mut v = Vec::new();
        for x in &ax {
            for y in &ay {
                v.push(truth.eval(&[*x, *y]));
            }
        }
        let fit = gaussian_fit(&FitData::grid(&[ax, ay], v).unwrap(), &FitOptions::default()).unwrap();
        assert!((fit.amplitude - 3.0).abs() < 1e-8);
        assert!((fit.offset - 0.25).abs() < 1e-8);
        for k in 0..2 {
            assert!((fit.center[k] - truth.center[k]).abs() < 1e-8);
            assert!((fit.sigma[k] - truth.sigma[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn gaussian_fit_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ax: Vec<f64> = (0..101).map(|k| (k as f64 - 50.0) * 0.2).collect();
        let v: Vec<f64> = ax
            .iter()
            .map(|x| (-(x - 0.5) * (x - 0.5) / (2.0 * 1.5 * 1.5)).exp() + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let fit = gaussian_fit(&FitData::grid(&[ax], v).unwrap(), &FitOptions::default()).unwrap();
        assert!((fit.sigma[0] - 1.5).abs() / 1.5 < 0.05, "{}", fit.sigma[0]);
    }

    #[test]
    fn flat_map_fails_to_fit() {
        let ax: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let r = gaussian_fit(&FitData::grid(&[ax], vec![1.0; 20]).unwrap(), &FitOptions::default());
        assert!(matches!(r, Err(SimError::FitFailed(_))));
    }

    #[test]
    fn schmidt_number_examples() {
        let k = schmidt_numbers(8.9e-3, 7.6e-3, 2.7, 5.1, 4.5, 5.6e-3).unwrap();
        assert!((k.k_x - 121.0).abs() < 1.0, "{}", k.k_x);
        assert!((k.k_y - 213.0).abs() < 1.0, "{}", k.k_y);
        assert!((k.k_t - 1094.0).abs() < 5.0, "{}", k.k_t);
        let v = (121.0f64 * 213.0 * 1094.0).sqrt();
        assert!((v - 5310.0).abs() / 5310.0 < 0.01);
        let m = 1.0 / (4.0 * PI);
        let k = schmidt_numbers(m, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((k.k_x - 4.0 * PI * PI).abs() < 1e-12);
        assert!(schmidt_numbers(0.0, 1.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn law_eberly_minimum_and_symmetry() {
        let s = 1.0 / (2.0 * PI * 0.1);
        assert!((law_eberly_k(0.1, s) - 1.0).abs() < 1e-12);
        let b = 3.7;
        let at = |b: f64| law_eberly_k(1.0, b / (2.0 * PI));
        assert!((at(b) - at(1.0 / b)).abs() < 1e-12);
    }

    #[test]
    fn dip_fit_recovers_width() {
        let ax: Vec<f64> = (0..11).map(|k| (k as f64 - 5.0) * 3.4).collect();
        let rates: Vec<f64> = ax.iter().map(|t| 0.5 * (1.0 - (-t * t / (2.0 * 2.95f64.powi(2))).exp())).collect();
        let r = fit_dip(&[ax], &rates, &[0.0; 11]).unwrap();
        let fit = r.fit.unwrap();
        assert!((fit.sigma[0] - 2.95).abs() < 1e-8);
        assert!((fit.amplitude - 1.0).abs() < 1e-8);
    }

    #[test]
    fn peak_windows() {
        let w = PeakWindow {
            center: [0.5, 0.0],
            sigma: [2.0, 1.0],
            n_sigma: 3.0,
        };
        assert!(w.contains([6.4, 0.0]));
        assert!(!w.contains([6.6, 0.0]));
        assert!(!w.contains([0.5, 3.1]));
        assert_eq!(w.reflected(4.0).center, [7.5, 0.0]);
    }

    #[test]
    fn wavelength_width_conversion() {
        // 5.6 GHz at 709.4 nm is about 9.4e-3 nm
        let s = frequency_to_wavelength_width(5.6e-3, 709.4);
        assert!((s - 9.4e-3).abs() < 1e-4, "{s}");
    }
}
