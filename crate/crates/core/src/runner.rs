//! Seeded ensembles and scans: generate, propagate, interfere, detect,
//! analyse and persist, with realization-level parallelism.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    fit_dip, gaussian_fit, law_eberly_k, momentum_correlation, reference_peak, relative_rate,
    schmidt_numbers, temporal_spectral_correlation, CorrelationMap, DipScanResult, FitData,
    FitOptions, GaussianFit, ImagePairEnsemble, Pairing, ReferenceLabel, ReferencePeak,
    SchmidtNumbers,
};
use crate::config::{ScanParameter, SimulationConfig};
use crate::crystal::{CrystalPropagator, StepConvergence};
use crate::error::{Result, SimError};
use crate::grid::{Beam, ComplexField3D, Domain, GridSpec, Image2D, C_NM_PER_PS};
use crate::interferometer::{
    filter_transmission, integrate_image, integrate_trace, DetectorOutput, InterferometerConfig,
    PreparedPair,
};
use crate::io::{write_correlation_map, write_csv, write_image_stack, write_text};
use crate::stochastic::{gen_pump, gen_vacuum_field, NoiseParams};

/// Everything that is shared by the realizations of one configuration.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: SimulationConfig,
    pub grid: GridSpec,
    pub noise: NoiseParams,
    pump: ComplexField3D,
    propagator: CrystalPropagator,
}

impl Pipeline {
    pub fn new(config: &SimulationConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid.build()?;
        let pump = gen_pump(&grid, &config.pump)?;
        let propagator = CrystalPropagator::new(&grid, &config.crystal, config.pump.peak_amplitude)?;
        Ok(Pipeline {
            config: config.clone(),
            grid,
            noise: config.ensemble.noise(),
            pump,
            propagator,
        })
    }

    pub fn propagator(&self) -> &CrystalPropagator {
        &self.propagator
    }

    fn inputs(&self, realization: u64) -> Result<(ComplexField3D, ComplexField3D)> {
        Ok((
            gen_vacuum_field(&self.grid, &self.noise, Beam::Signal, realization)?,
            gen_vacuum_field(&self.grid, &self.noise, Beam::Idler, realization)?,
        ))
    }

    /// Near-field/time signal and idler at the crystal output.
    pub fn crystal_output(&self, realization: u64) -> Result<(ComplexField3D, ComplexField3D)> {
        let (s, i) = self.inputs(realization)?;
        let (_, s, i) = self.propagator.propagate(self.pump.clone(), s, i)?;
        Ok((s, i))
    }

    pub fn prepared(&self, realization: u64) -> Result<PreparedPair> {
        let (s, i) = self.crystal_output(realization)?;
        let f = &self.config.interferometer;
        PreparedPair::new(s, i, f.filter_center_nm, f.filter_sigma_nm, realization)
    }

    /// Step-doubling guard on realization 0.
    pub fn check_convergence(&self) -> Result<StepConvergence> {
        let (s, i) = self.inputs(0)?;
        self.propagator.check_step_convergence(&self.pump, &s, &i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRealization {
    pub realization: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub total_s: f64,
    /// Summed over workers.
    pub realizations_s: f64,
    pub analysis_s: f64,
    pub output_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedInfo {
    pub base_seed: u64,
    pub generator: String,
    /// Realization indices that entered the results.
    pub realizations: Vec<u64>,
}

/// Record of one run, written as `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub label: String,
    pub config_hash: String,
    pub software_version: String,
    pub workers: usize,
    pub seeds: SeedInfo,
    pub failed: Vec<FailedRealization>,
    pub step_convergence_change: Option<f64>,
    pub timings: StageTimings,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
    pub results: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: &SimulationConfig, workers: usize) -> Self {
        RunManifest {
            command: command.into(),
            label: config.label.clone(),
            config_hash: config.hash(),
            software_version: env!("CARGO_PKG_VERSION").into(),
            workers,
            seeds: SeedInfo {
                base_seed: config.ensemble.seed,
                generator: "ChaCha12 keyed by base_seed; stream 4 * realization + (0 signal, 1 idler)".into(),
                realizations: Vec::new(),
            },
            failed: Vec::new(),
            step_convergence_change: None,
            timings: StageTimings::default(),
            files: Vec::new(),
            results: BTreeMap::new(),
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    /// Output directory; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
}

struct Writer<'a> {
    dir: Option<&'a Path>,
    files: Vec<String>,
    elapsed: Duration,
    hash: String,
}

impl<'a> Writer<'a> {
    fn new(dir: Option<&'a Path>, hash: String) -> Self {
        Writer {
            dir,
            files: Vec::new(),
            elapsed: Duration::ZERO,
            hash,
        }
    }

    fn record(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        let dir = self.dir.expect("records only with an output directory");
        for p in paths {
            let rel = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
            self.files.push(rel);
        }
    }

    fn run(&mut self, f: impl FnOnce(&Path, &str) -> Result<Vec<PathBuf>>) -> Result<()> {
        if let Some(dir) = self.dir {
            let t = Instant::now();
            let paths = f(dir, &self.hash)?;
            self.record(paths);
            self.elapsed += t.elapsed();
        }
        Ok(())
    }

    fn stack(&mut self, name: &str, images: &[&Image2D], description: &str) -> Result<()> {
        self.run(|dir, hash| Ok(write_image_stack(&dir.join(name), images, description, hash)?.to_vec()))
    }

    fn map(&mut self, name: &str, map: &CorrelationMap, description: &str) -> Result<()> {
        self.run(|dir, hash| write_correlation_map(&dir.join(name), map, description, hash))
    }

    fn finish(mut self, manifest: &mut RunManifest, config: &SimulationConfig) -> Result<()> {
        let Some(dir) = self.dir else {
            return Ok(());
        };
        let t = Instant::now();
        let cfg = write_text(&dir.join("config.toml"), &config.to_toml_string())?;
        self.record([cfg]);
        self.files.push("manifest.toml".into());
        manifest.files = self.files.clone();
        manifest.timings.output_s += (self.elapsed + t.elapsed()).as_secs_f64();
        let text = toml::to_string(manifest).expect("manifest serializes");
        write_text(&dir.join("manifest.toml"), &text)?;
        Ok(())
    }
}

/// Runs `task` for every realization on `workers` threads. Results come back
/// in realization order whatever the scheduling. Failed realizations are
/// dropped with a warning; more than 1% failures aborts.
fn map_realizations<T: Send>(
    n: usize,
    workers: usize,
    task: impl Fn(u64) -> Result<T> + Sync,
) -> Result<(Vec<(u64, T)>, Vec<FailedRealization>, Duration)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SimError::config(format!("cannot start {workers} workers: {e}")))?;
    let results: Vec<(u64, Result<T>, Duration)> = pool.install(|| {
        (0..n as u64)
            .into_par_iter()
            .map(|r| {
                let t = Instant::now();
                let out = task(r);
                (r, out, t.elapsed())
            })
            .collect()
    });
    let mut ok = Vec::with_capacity(n);
    let mut failed = Vec::new();
    let mut busy = Duration::ZERO;
    for (r, out, dt) in results {
        busy += dt;
        match out {
            Ok(v) => ok.push((r, v)),
            Err(SimError::Config(msg)) => return Err(SimError::Config(msg)),
            Err(e) => {
                log::warn!("realization {r} failed and is excluded: {e}");
                failed.push(FailedRealization {
                    realization: r,
                    error: e.to_string(),
                });
            }
        }
    }
    if failed.len() * 100 > n {
        return Err(SimError::Numerical(format!(
            "{} of {n} realizations failed (more than 1%)",
            failed.len()
        )));
    }
    if ok.len() < 2 {
        return Err(SimError::Numerical("fewer than 2 realizations succeeded".into()));
    }
    Ok((ok, failed, busy))
}

fn start(command: &str, config: &SimulationConfig, options: &RunOptions) -> Result<(Pipeline, RunManifest)> {
    let pipeline = Pipeline::new(config)?;
    if let Some(dir) = &options.out {
        std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    }
    let mut manifest = RunManifest::new(command, config, options.workers);
    if config.ensemble.check_convergence {
        let c = pipeline.check_convergence()?;
        log::info!(
            "step doubling changes the generated signal power by {:.3}%",
            100.0 * c.relative_change
        );
        manifest.step_convergence_change = Some(c.relative_change);
    }
    Ok((pipeline, manifest))
}

/// Camera images of an ensemble at the configured interferometer settings.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub outputs: Vec<DetectorOutput>,
    pub manifest: RunManifest,
}

pub fn run_ensemble(config: &SimulationConfig, options: &RunOptions) -> Result<EnsembleRun> {
    let t0 = Instant::now();
    let (pipeline, mut manifest) = start("ensemble", config, options)?;
    let setting = config.interferometer;
    let (ok, failed, busy) = map_realizations(config.ensemble.realizations, options.workers, |r| {
        pipeline.prepared(r)?.detect(&setting)
    })?;
    manifest.failed = failed;
    manifest.timings.realizations_s = busy.as_secs_f64();
    manifest.seeds.realizations = ok.iter().map(|(r, _)| *r).collect();
    let outputs: Vec<DetectorOutput> = ok.into_iter().map(|(_, o)| o).collect();

    let mut w = Writer::new(options.out.as_deref(), manifest.config_hash.clone());
    if config.output.images {
        let cam1: Vec<&Image2D> = outputs.iter().map(|o| &o.image_1).collect();
        let cam2: Vec<&Image2D> = outputs.iter().map(|o| &o.image_2).collect();
        w.stack("camera_1", &cam1, "far-field camera 1 (transmitted idler + reflected signal)")?;
        w.stack("camera_2", &cam2, "far-field camera 2 (transmitted signal + reflected idler)")?;
    }
    manifest.timings.total_s = t0.elapsed().as_secs_f64();
    w.finish(&mut manifest, config)?;
    Ok(EnsembleRun { outputs, manifest })
}

/// One scan point.
#[derive(Debug, Clone)]
pub struct ScanPoint {
    pub setting: InterferometerConfig,
    pub rate: f64,
    pub std_error: f64,
    pub map: CorrelationMap,
}

#[derive(Debug, Clone)]
pub struct ScanRun {
    pub reference: ReferencePeak,
    pub points: Vec<ScanPoint>,
    pub dip: DipScanResult,
    pub manifest: RunManifest,
}

/// Row of a dip table; simulated and oracle surfaces share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipRow {
    pub source: String,
    pub index: usize,
    pub delay_ps: f64,
    pub tilt_nu_x: f64,
    pub tilt_nu_y: f64,
    pub defocus_mm: f64,
    pub rate: f64,
    pub std_error: f64,
    /// `(1 - fitted dip) / 2` at this point.
    pub fit_rate: Option<f64>,
    pub fit_amplitude: Option<f64>,
    pub fit_center_1: Option<f64>,
    pub fit_sigma_1: Option<f64>,
    pub fit_center_2: Option<f64>,
    pub fit_sigma_2: Option<f64>,
    pub fit_residual: Option<f64>,
}

impl DipRow {
    pub fn new(source: &str, index: usize, setting: &InterferometerConfig, rate: f64, std_error: f64) -> Self {
        DipRow {
            source: source.into(),
            index,
            delay_ps: setting.delay,
            tilt_nu_x: setting.tilt_nu_x,
            tilt_nu_y: setting.tilt_nu_y,
            defocus_mm: setting.defocus_signal,
            rate,
            std_error,
            fit_rate: None,
            fit_amplitude: None,
            fit_center_1: None,
            fit_sigma_1: None,
            fit_center_2: None,
            fit_sigma_2: None,
            fit_residual: None,
        }
    }

    pub fn with_fit(mut self, fit: Option<&GaussianFit>, coords: &[f64]) -> Self {
        if let Some(f) = fit {
            self.fit_rate = Some((1.0 - f.eval(coords)) / 2.0);
            self.fit_amplitude = Some(f.amplitude);
            self.fit_center_1 = f.center.first().copied();
            self.fit_sigma_1 = f.sigma.first().copied();
            self.fit_center_2 = f.center.get(1).copied();
            self.fit_sigma_2 = f.sigma.get(1).copied();
            self.fit_residual = Some(f.residual_norm);
        }
        self
    }
}

/// Scan of the `[scan]` section. Every realization is propagated once and
/// detected at every scan point and in the reference arrangement, so all
/// points share their seeds.
pub fn run_scan(config: &SimulationConfig, options: &RunOptions) -> Result<ScanRun> {
    let t0 = Instant::now();
    let scan = config
        .scan
        .clone()
        .ok_or_else(|| SimError::config("run_scan needs a [scan] section"))?;
    let (pipeline, mut manifest) = start("scan", config, options)?;
    let settings = scan.points(&config.interferometer);
    let (ok, failed, busy) = map_realizations(config.ensemble.realizations, options.workers, |r| {
        let prepared = pipeline.prepared(r)?;
        let points = settings
            .iter()
            .map(|s| prepared.detect(s))
            .collect::<Result<Vec<_>>>()?;
        Ok((prepared.reference(), points))
    })?;
    manifest.failed = failed;
    manifest.timings.realizations_s = busy.as_secs_f64();
    let realizations: Vec<u64> = ok.iter().map(|(r, _)| *r).collect();
    manifest.seeds.realizations = realizations.clone();

    let ta = Instant::now();
    let mut reference_outputs = Vec::with_capacity(ok.len());
    let mut per_point: Vec<Vec<DetectorOutput>> = vec![Vec::with_capacity(ok.len()); settings.len()];
    for (_, (reference, points)) in ok {
        reference_outputs.push(reference);
        for (k, p) in points.into_iter().enumerate() {
            per_point[k].push(p);
        }
    }
    let reference_ensemble = ImagePairEnsemble::from_outputs(reference_outputs)?;
    let reference = reference_peak(&reference_ensemble, config.analysis.window_sigma)?;
    let ensembles: Vec<ImagePairEnsemble> = per_point
        .into_iter()
        .map(ImagePairEnsemble::from_outputs)
        .collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| SimError::config(format!("cannot start workers: {e}")))?;
    let rates = pool.install(|| {
        ensembles
            .par_iter()
            .zip(&settings)
            .map(|(e, s)| relative_rate(e, &reference, s.tilt_nu_x))
            .collect::<Vec<_>>()
    });
    let mut points = Vec::with_capacity(settings.len());
    for (r, s) in rates.into_iter().zip(&settings) {
        let r = r?;
        points.push(ScanPoint {
            setting: *s,
            rate: r.rate,
            std_error: r.std_error,
            map: r.map,
        });
    }
    let axes = scan.axes();
    let rate_values: Vec<f64> = points.iter().map(|p| p.rate).collect();
    let errors: Vec<f64> = points.iter().map(|p| p.std_error).collect();
    let mut dip = fit_dip(&axes, &rate_values, &errors)?;
    dip.window = Some(reference.window);
    manifest.timings.analysis_s = ta.elapsed().as_secs_f64();

    manifest.results.insert("reference_total".into(), reference.total);
    manifest.results.insert("reference_sigma_nu_x".into(), reference.fit.sigma[0]);
    manifest.results.insert("reference_sigma_nu_y".into(), reference.fit.sigma[1]);
    manifest.results.insert("window_sigma".into(), config.analysis.window_sigma);
    match &dip.fit {
        Some(f) => {
            for (k, s) in f.sigma.iter().enumerate() {
                manifest.results.insert(format!("dip_sigma_{}", k + 1), *s);
                manifest.results.insert(format!("dip_center_{}", k + 1), f.center[k]);
            }
            manifest.results.insert("dip_amplitude".into(), f.amplitude);
        }
        None => manifest.notes.push(format!(
            "dip fit failed: {}",
            dip.fit_error.clone().unwrap_or_default()
        )),
    }
    manifest.notes.push(format!("scan parameter: {:?}", scan.parameter));

    let mut w = Writer::new(options.out.as_deref(), manifest.config_hash.clone());
    let rows: Vec<DipRow> = points
        .iter()
        .enumerate()
        .map(|(k, p)| DipRow::new("simulation", k, &p.setting, p.rate, p.std_error).with_fit(dip.fit.as_ref(), &dip.points[k]))
        .collect();
    w.run(|dir, _| Ok(vec![write_csv(&dir.join("dip.csv"), &rows)?]))?;
    if config.output.maps {
        w.map("maps/reference", &reference.map, "no-beamsplitter far-field coincidence map")?;
        for (k, p) in points.iter().enumerate() {
            w.map(&format!("maps/point_{k:03}"), &p.map, "far-field coincidence map between the output ports")?;
        }
    }
    if config.output.images {
        let cam1: Vec<&Image2D> = reference_ensemble.pairs.iter().map(|p| &p.0).collect();
        let cam2: Vec<&Image2D> = reference_ensemble.pairs.iter().map(|p| &p.1).collect();
        w.stack("images/reference_idler", &cam1, "far-field idler without beamsplitter")?;
        w.stack("images/reference_signal", &cam2, "far-field signal without beamsplitter")?;
        for (k, e) in ensembles.iter().enumerate() {
            let cam1: Vec<&Image2D> = e.pairs.iter().map(|p| &p.0).collect();
            let cam2: Vec<&Image2D> = e.pairs.iter().map(|p| &p.1).collect();
            w.stack(&format!("images/point_{k:03}_camera_1"), &cam1, "far-field camera 1")?;
            w.stack(&format!("images/point_{k:03}_camera_2"), &cam2, "far-field camera 2")?;
        }
    }
    manifest.timings.total_s = t0.elapsed().as_secs_f64();
    w.finish(&mut manifest, config)?;
    Ok(ScanRun {
        reference,
        points,
        dip,
        manifest,
    })
}

/// Standard deviations of one beam's mean photon distribution (vacuum
/// removed) after the filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamWidths {
    pub x: f64,
    pub y: f64,
    pub nu_x: f64,
    pub nu_y: f64,
    pub t: f64,
    pub lambda_nm: f64,
    /// Mean generated photons per realization inside the filter.
    pub photons: f64,
}

/// Gaussian-fit standard deviations of the twin-beam correlation peaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationWidths {
    pub x: f64,
    pub y: f64,
    pub nu_x: f64,
    pub nu_y: f64,
    pub t: f64,
    /// THz
    pub nu_t: f64,
    pub lambda_nm: f64,
    /// Fitted peak positions `[x, y, nu_x, nu_y, t, nu_t]`.
    pub centers: [f64; 6],
}

#[derive(Debug, Clone)]
pub struct Characterization {
    pub signal: BeamWidths,
    pub idler: BeamWidths,
    pub correlation: CorrelationWidths,
    pub schmidt: SchmidtNumbers,
    /// Schmidt number of the pump width and the measured signal far-field width.
    pub law_eberly: f64,
    pub near_map: CorrelationMap,
    pub far_map: CorrelationMap,
    pub time_map: CorrelationMap,
    pub spectrum_map: CorrelationMap,
    pub manifest: RunManifest,
}

/// Camera-plane samples of one realization: (idler, signal) pairs.
#[derive(Debug, Clone)]
pub struct CharacterizationSample {
    pub near: (Image2D, Image2D),
    pub far: (Image2D, Image2D),
    pub time: (Image2D, Image2D),
    pub spectrum: (Image2D, Image2D),
}

pub fn characterization_sample(prepared: &PreparedPair) -> CharacterizationSample {
    let (s, i) = prepared.fields();
    let far = (integrate_image(i), integrate_image(s));
    let spectrum = (integrate_trace(i), integrate_trace(s));
    let sn = s.clone().into_domain(Domain::NearFieldTime);
    let inn = i.clone().into_domain(Domain::NearFieldTime);
    CharacterizationSample {
        near: (integrate_image(&inn), integrate_image(&sn)),
        far,
        time: (integrate_trace(&inn), integrate_trace(&sn)),
        spectrum,
    }
}

fn mean_values(images: &[&Image2D]) -> Vec<f64> {
    let n = images.len() as f64;
    let mut m = vec![0.0; images[0].values.len()];
    for img in images {
        for (a, v) in m.iter_mut().zip(&img.values) {
            *a += v / n;
        }
    }
    m
}

fn weighted_std(weights: &[f64], coords: &[f64]) -> f64 {
    let w: f64 = weights.iter().sum();
    let mean = weights.iter().zip(coords).map(|(a, x)| a * x).sum::<f64>() / w;
    (weights.iter().zip(coords).map(|(a, x)| a * (x - mean).powi(2)).sum::<f64>() / w).sqrt()
}

/// Marginal of an `nx x ny` image along axis 0 or 1.
fn marginal(values: &[f64], nx: usize, ny: usize, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; if axis == 0 { nx } else { ny }];
    for ix in 0..nx {
        for iy in 0..ny {
            out[if axis == 0 { ix } else { iy }] += values[ix * ny + iy];
        }
    }
    out
}

fn beam_widths(grid: &GridSpec, beam: Beam, samples: &[CharacterizationSample], pick: fn(&(Image2D, Image2D)) -> &Image2D, config: &SimulationConfig) -> BeamWidths {
    let f = &config.interferometer;
    let t2: Vec<f64> = filter_transmission(grid, beam, f.filter_center_nm, f.filter_sigma_nm)
        .iter()
        .map(|a| a * a)
        .collect();
    let half = config.ensemble.variance_per_mode;
    let sum_t2: f64 = t2.iter().sum();
    let cells = (grid.nx * grid.ny) as f64;
    // filtered vacuum per image pixel and per trace bin
    let pixel_vacuum = half * sum_t2;
    let near: Vec<f64> = mean_values(&samples.iter().map(|s| pick(&s.near)).collect::<Vec<_>>())
        .iter()
        .map(|v| v - pixel_vacuum)
        .collect();
    let far: Vec<f64> = mean_values(&samples.iter().map(|s| pick(&s.far)).collect::<Vec<_>>())
        .iter()
        .map(|v| v - pixel_vacuum)
        .collect();
    let time: Vec<f64> = mean_values(&samples.iter().map(|s| pick(&s.time)).collect::<Vec<_>>())
        .iter()
        .map(|v| v - half * cells * sum_t2 / grid.nt as f64)
        .collect();
    let spectrum: Vec<f64> = mean_values(&samples.iter().map(|s| pick(&s.spectrum)).collect::<Vec<_>>())
        .iter()
        .zip(&t2)
        .map(|(v, t)| v - half * cells * t)
        .collect();
    let (nx, ny) = (grid.nx, grid.ny);
    BeamWidths {
        x: weighted_std(&marginal(&near, nx, ny, 0), &grid.x_axis()),
        y: weighted_std(&marginal(&near, nx, ny, 1), &grid.y_axis()),
        nu_x: weighted_std(&marginal(&far, nx, ny, 0), &grid.nu_x_axis()),
        nu_y: weighted_std(&marginal(&far, nx, ny, 1), &grid.nu_y_axis()),
        t: weighted_std(&time, &grid.t_axis()),
        lambda_nm: weighted_std(&spectrum, &grid.wavelength_axis_nm(beam)),
        photons: spectrum.iter().sum(),
    }
}

fn fit_map(map: &CorrelationMap, what: &str) -> Result<GaussianFit> {
    gaussian_fit(&FitData::from_map(map)?, &FitOptions::default())
        .map_err(|e| SimError::FitFailed(format!("{what} correlation peak: {e}")))
}

/// Single-beam widths, twin-beam correlation widths and Schmidt numbers
/// from `config.ensemble.realizations` realizations.
pub fn characterize(config: &SimulationConfig, options: &RunOptions) -> Result<Characterization> {
    let t0 = Instant::now();
    let (pipeline, mut manifest) = start("characterize", config, options)?;
    let (ok, failed, busy) = map_realizations(config.ensemble.realizations, options.workers, |r| {
        Ok(characterization_sample(&pipeline.prepared(r)?))
    })?;
    manifest.failed = failed;
    manifest.timings.realizations_s = busy.as_secs_f64();
    manifest.seeds.realizations = ok.iter().map(|(r, _)| *r).collect();
    let realizations = manifest.seeds.realizations.clone();
    let samples: Vec<CharacterizationSample> = ok.into_iter().map(|(_, s)| s).collect();

    let ta = Instant::now();
    let grid = pipeline.grid;
    let signal = beam_widths(&grid, Beam::Signal, &samples, |p| &p.1, config);
    let idler = beam_widths(&grid, Beam::Idler, &samples, |p| &p.0, config);
    let ensemble = |pick: fn(&CharacterizationSample) -> &(Image2D, Image2D)| {
        ImagePairEnsemble::new(
            samples.iter().map(|s| pick(s).clone()).collect(),
            realizations.clone(),
            ReferenceLabel::NoBs,
        )
    };
    let near_map = momentum_correlation(&ensemble(|s| &s.near)?, Pairing::Difference)?;
    let far_map = momentum_correlation(&ensemble(|s| &s.far)?, Pairing::Sum)?;
    let time_map = temporal_spectral_correlation(&ensemble(|s| &s.time)?, Pairing::Difference)?;
    let spectrum_map = temporal_spectral_correlation(&ensemble(|s| &s.spectrum)?, Pairing::Sum)?;
    let near = fit_map(&near_map, "near-field")?;
    let far = fit_map(&far_map, "far-field")?;
    let time = fit_map(&time_map, "time")?;
    let spec = fit_map(&spectrum_map, "spectral")?;
    let lambda = grid.wavelength_nm(Beam::Signal);
    let correlation = CorrelationWidths {
        x: near.sigma[0],
        y: near.sigma[1],
        nu_x: far.sigma[0],
        nu_y: far.sigma[1],
        t: time.sigma[0],
        nu_t: spec.sigma[0],
        lambda_nm: lambda * lambda / C_NM_PER_PS * spec.sigma[0],
        centers: [near.center[0], near.center[1], far.center[0], far.center[1], time.center[0], spec.center[0]],
    };
    let schmidt = schmidt_numbers(
        correlation.x,
        correlation.y,
        correlation.t,
        correlation.nu_x,
        correlation.nu_y,
        correlation.nu_t,
    )?;
    let law_eberly = law_eberly_k(config.pump.sigma_xy, signal.nu_x);
    manifest.timings.analysis_s = ta.elapsed().as_secs_f64();

    let results = [
        ("spdc_sigma_x_mm", signal.x),
        ("spdc_sigma_y_mm", signal.y),
        ("spdc_sigma_nu_x_per_mm", signal.nu_x),
        ("spdc_sigma_nu_y_per_mm", signal.nu_y),
        ("spdc_sigma_t_ps", signal.t),
        ("spdc_sigma_lambda_nm", signal.lambda_nm),
        ("corr_sigma_x_mm", correlation.x),
        ("corr_sigma_y_mm", correlation.y),
        ("corr_sigma_nu_x_per_mm", correlation.nu_x),
        ("corr_sigma_nu_y_per_mm", correlation.nu_y),
        ("corr_sigma_t_ps", correlation.t),
        ("corr_sigma_nu_t_thz", correlation.nu_t),
        ("corr_sigma_lambda_nm", correlation.lambda_nm),
        ("schmidt_k_x", schmidt.k_x),
        ("schmidt_k_y", schmidt.k_y),
        ("schmidt_k_t", schmidt.k_t),
        ("dimensionality", schmidt.dimensionality),
        ("law_eberly_k_x", law_eberly),
    ];
    for (k, v) in results {
        manifest.results.insert(k.into(), v);
    }

    #[derive(Serialize)]
    struct WidthRow<'a> {
        quantity: &'a str,
        value: f64,
        unit: &'a str,
    }
    let units = |k: &str| match k {
        _ if k.ends_with("_mm") => "mm",
        _ if k.ends_with("_per_mm") => "1/mm",
        _ if k.ends_with("_ps") => "ps",
        _ if k.ends_with("_nm") => "nm",
        _ if k.ends_with("_thz") => "THz",
        _ => "",
    };
    let rows: Vec<WidthRow> = results
        .iter()
        .map(|(k, v)| WidthRow {
            quantity: k,
            value: *v,
            unit: units(k),
        })
        .collect();
    let mut w = Writer::new(options.out.as_deref(), manifest.config_hash.clone());
    w.run(|dir, _| Ok(vec![write_csv(&dir.join("widths.csv"), &rows)?]))?;
    if config.output.maps {
        w.map("maps/near_field", &near_map, "near-field position-difference correlation")?;
        w.map("maps/far_field", &far_map, "far-field momentum-sum correlation")?;
        w.map("maps/time", &time_map, "time-difference correlation")?;
        w.map("maps/spectrum", &spectrum_map, "frequency-sum correlation")?;
    }
    if config.output.images {
        for (name, pick) in [
            ("near", (|s: &CharacterizationSample| &s.near) as fn(&CharacterizationSample) -> &(Image2D, Image2D)),
            ("far", |s| &s.far),
            ("time", |s| &s.time),
            ("spectrum", |s| &s.spectrum),
        ] {
            let idl: Vec<&Image2D> = samples.iter().map(|s| &pick(s).0).collect();
            let sig: Vec<&Image2D> = samples.iter().map(|s| &pick(s).1).collect();
            w.stack(&format!("images/{name}_idler"), &idl, &format!("{name} idler after the filter"))?;
            w.stack(&format!("images/{name}_signal"), &sig, &format!("{name} signal after the filter"))?;
        }
    }
    manifest.timings.total_s = t0.elapsed().as_secs_f64();
    w.finish(&mut manifest, config)?;
    Ok(Characterization {
        signal,
        idler,
        correlation,
        schmidt,
        law_eberly,
        near_map,
        far_map,
        time_map,
        spectrum_map,
        manifest,
    })
}

/// One realization with every intermediate field persisted.
pub fn single_run(config: &SimulationConfig, realization: u64, out: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    let pipeline = Pipeline::new(config)?;
    let mut manifest = RunManifest::new("single-run", config, 1);
    manifest.seeds.realizations = vec![realization];
    let mut w = Writer::new(Some(out), manifest.config_hash.clone());
    let field = |w: &mut Writer, name: &str, f: &ComplexField3D| -> Result<()> {
        let g = f.grid();
        let values: Vec<f64> = f.data().iter().flat_map(|a| [a.re, a.im]).collect();
        let header = crate::io::ArrayHeader::new(
            &format!("{name}: {:?} {:?} field in the {:?} domain, (re, im) pairs", f.beam(), f.polarization(), f.domain()),
            vec![g.nx, g.ny, g.nt, 2],
            vec![
                crate::io::AxisInfo::index("x or nu_x"),
                crate::io::AxisInfo::index("y or nu_y"),
                crate::io::AxisInfo::index("t or nu_t"),
                crate::io::AxisInfo::index("re/im"),
            ],
            "photon amplitude per cell",
            &manifest.config_hash,
        );
        w.run(|dir, _| Ok(crate::io::write_array(&dir.join("fields").join(name), &values, &header)?.to_vec()))
    };
    let (s0, i0) = pipeline.inputs(realization)?;
    field(&mut w, "signal_input", &s0)?;
    field(&mut w, "idler_input", &i0)?;
    field(&mut w, "pump_input", &pipeline.pump)?;
    let (p, s, i) = pipeline.propagator.propagate(pipeline.pump.clone(), s0, i0)?;
    field(&mut w, "pump_output", &p)?;
    field(&mut w, "signal_output", &s)?;
    field(&mut w, "idler_output", &i)?;
    let f = &config.interferometer;
    let prepared = PreparedPair::new(s, i, f.filter_center_nm, f.filter_sigma_nm, realization)?;
    let (fs, fi) = prepared.fields();
    field(&mut w, "signal_filtered_far_field", fs)?;
    field(&mut w, "idler_filtered_far_field", fi)?;
    let sample = characterization_sample(&prepared);
    for (name, pair) in [("near", &sample.near), ("far", &sample.far), ("time", &sample.time), ("spectrum", &sample.spectrum)] {
        w.stack(&format!("images/{name}_idler"), &[&pair.0], &format!("{name} idler after the filter"))?;
        w.stack(&format!("images/{name}_signal"), &[&pair.1], &format!("{name} signal after the filter"))?;
    }
    let out_bs = prepared.detect(f)?;
    w.stack("images/camera_1", &[&out_bs.image_1], "far-field camera 1")?;
    w.stack("images/camera_2", &[&out_bs.image_2], "far-field camera 2")?;
    manifest.timings.total_s = t0.elapsed().as_secs_f64();
    w.finish(&mut manifest, config)?;
    Ok(manifest)
}

/// Scan points of the `[scan]` section evaluated with the closed-form
/// model and by quadrature, as dip-table rows (`rate = C / C_0`).
pub fn oracle_rows(config: &SimulationConfig, params: &crate::oracle::GaussianBiphotonParams) -> Result<Vec<DipRow>> {
    use std::f64::consts::PI;
    let scan = config
        .scan
        .as_ref()
        .ok_or_else(|| SimError::config("the oracle needs a [scan] section"))?;
    let c0 = params.c0();
    let mut rows = Vec::new();
    for (k, s) in scan.points(&config.interferometer).iter().enumerate() {
        let delay_factor = 1.0 - (-s.delay * s.delay / (params.sigma_t * params.sigma_t)).exp();
        let (sx, sy) = (2.0 * PI * s.tilt_nu_x, 2.0 * PI * s.tilt_nu_y);
        let tilt_closed = crate::oracle::integrated_coincidence(sx, sy, params) / c0;
        let tilt_quad = crate::oracle::quadrature_coincidence(sx, sy, params, 1e-8)?.value / c0;
        // a delay alone: the whole dip is the temporal one
        let (closed, quad) = if scan.parameter == ScanParameter::Delay {
            (0.5 * delay_factor, 0.5 * delay_factor)
        } else {
            (tilt_closed, tilt_quad)
        };
        rows.push(DipRow::new("closed-form", k, s, closed, 0.0));
        rows.push(DipRow::new("quadrature", k, s, quad, 0.0));
    }
    Ok(rows)
}
