//! Run configuration: TOML schema, presets and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crystal::CrystalParams;
use crate::error::{Result, SimError};
use crate::grid::GridSpec;
use crate::interferometer::InterferometerConfig;
use crate::stochastic::{NoiseParams, PumpParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub counts: [usize; 3],
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub pump_wavelength_nm: f64,
}

impl GridSection {
    pub fn build(&self) -> Result<GridSpec> {
        GridSpec::new(self.counts, self.dx, self.dy, self.dt, self.pump_wavelength_nm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub realizations: usize,
    pub seed: u64,
    #[serde(default = "half")]
    pub variance_per_mode: f64,
    /// Run the step-doubling guard once before the ensemble.
    #[serde(default = "yes")]
    pub check_convergence: bool,
}

fn half() -> f64 {
    0.5
}

fn yes() -> bool {
    true
}

impl EnsembleSection {
    pub fn noise(&self) -> NoiseParams {
        NoiseParams {
            variance_per_mode: self.variance_per_mode,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanParameter {
    Delay,
    TiltX,
    TiltY,
    TiltGrid,
    /// Defocus of both image planes, mm.
    Defocus,
}

/// Scanned interferometer setting; every other setting comes from the
/// `[interferometer]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub parameter: ScanParameter,
    pub values: Vec<f64>,
    /// Second axis of a `tilt-grid` scan (`tilt_nu_y`); `values` is `tilt_nu_x`.
    #[serde(default)]
    pub values_y: Vec<f64>,
}

impl ScanSection {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(SimError::config("scan needs at least one value"));
        }
        match (self.parameter, self.values_y.is_empty()) {
            (ScanParameter::TiltGrid, true) => Err(SimError::config("tilt-grid scan needs values_y")),
            (ScanParameter::TiltGrid, false) => Ok(()),
            (_, false) => Err(SimError::config("values_y only applies to tilt-grid scans")),
            _ => Ok(()),
        }
    }

    /// Scan axes: one for 1D scans, `[x, y]` for tilt grids.
    pub fn axes(&self) -> Vec<Vec<f64>> {
        if self.parameter == ScanParameter::TiltGrid {
            vec![self.values.clone(), self.values_y.clone()]
        } else {
            vec![self.values.clone()]
        }
    }

    /// Interferometer settings of every scan point, x slowest for grids.
    pub fn points(&self, base: &InterferometerConfig) -> Vec<InterferometerConfig> {
        let mut out = Vec::new();
        for &v in &self.values {
            let mut c = *base;
            match self.parameter {
                ScanParameter::Delay => c.delay = v,
                ScanParameter::TiltX => c.tilt_nu_x = v,
                ScanParameter::TiltY => c.tilt_nu_y = v,
                ScanParameter::Defocus => {
                    c.defocus_signal = v;
                    c.defocus_idler = v;
                }
                ScanParameter::TiltGrid => {
                    for &w in &self.values_y {
                        out.push(InterferometerConfig {
                            tilt_nu_x: v,
                            tilt_nu_y: w,
                            ..*base
                        });
                    }
                    continue;
                }
            }
            out.push(c);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Half-axes of the coincidence window in fitted standard deviations.
    pub window_sigma: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { window_sigma: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Camera image stacks of every ensemble.
    #[serde(default = "yes")]
    pub images: bool,
    /// Correlation maps.
    #[serde(default = "yes")]
    pub maps: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("homsim-out"),
            images: true,
            maps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Free-form preset label carried into manifests.
    #[serde(default)]
    pub label: String,
    pub grid: GridSection,
    pub pump: PumpParams,
    pub crystal: CrystalParams,
    pub interferometer: InterferometerConfig,
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub scan: Option<ScanSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "HOMSIM_WORKERS";

impl SimulationConfig {
    /// Parameters of the reference simulation: 128^3 grid, gain 4.2 mm^-1,
    /// 0.8 mm crystal, 0.2 nm filter at 709.4 nm, 1000 realizations.
    pub fn full_scale() -> Self {
        SimulationConfig {
            label: "full-scale".into(),
            grid: GridSection {
                counts: [128, 128, 128],
                dx: 7.8e-3,
                dy: 7.8e-3,
                dt: 2.3,
                pump_wavelength_nm: 354.7,
            },
            pump: PumpParams {
                sigma_t: 42.0,
                sigma_xy: 0.1,
                wavelength_nm: 354.7,
                peak_amplitude: 1e4,
            },
            crystal: CrystalParams {
                gain: 4.2,
                length: 0.8,
                width: 1.0,
                n_steps: 16,
                walkoff_override: None,
                delta_k_override: None,
                dispersion: true,
                diffraction: true,
            },
            interferometer: InterferometerConfig::balanced(709.4, 0.2),
            ensemble: EnsembleSection {
                realizations: 1000,
                seed: 1,
                variance_per_mode: 0.5,
                check_convergence: true,
            },
            scan: None,
            analysis: AnalysisSection::default(),
            output: OutputSection::default(),
        }
    }

    /// Reference parameters on a 64^3 grid with the same steps, 100
    /// realizations.
    pub fn desk_scale() -> Self {
        let mut c = SimulationConfig::full_scale();
        c.label = "desk-scale".into();
        c.grid.counts = [64, 64, 64];
        c.ensemble.realizations = 100;
        c
    }

    /// Desk-scale run at a gain of 8 mm^-1 (an implementation choice; the
    /// reference only says the gain is "significantly increased") for
    /// single-realization pictures of the twin-beam fluctuations.
    pub fn high_gain() -> Self {
        let mut c = SimulationConfig::desk_scale();
        c.label = "high-gain (gain chosen by this implementation)".into();
        c.crystal.gain = 8.0;
        c.crystal.n_steps = 32;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full-scale" => Ok(SimulationConfig::full_scale()),
            "desk-scale" => Ok(SimulationConfig::desk_scale()),
            "high-gain" => Ok(SimulationConfig::high_gain()),
            _ => Err(SimError::config(format!(
                "unknown preset `{name}` (full-scale, desk-scale, high-gain)"
            ))),
        }
    }

    /// Eleven delays spanning +-17 ps.
    pub fn with_delay_scan(mut self) -> Self {
        self.scan = Some(ScanSection {
            parameter: ScanParameter::Delay,
            values: (0..11).map(|k| -17.0 + 3.4 * k as f64).collect(),
            values_y: Vec::new(),
        });
        self
    }

    /// 5 x 5 tilt grid. Horizontal shifts are whole far-field bins up to
    /// four bins; vertical ones go to a quarter of the far-field window so
    /// that the relative shift `2 tilt_nu_y` of the reflected beams stays
    /// within half of it.
    pub fn with_tilt_grid(mut self) -> Result<Self> {
        let grid = self.grid.build()?;
        let (bx, by) = (grid.dnu_x(), grid.dnu_y());
        let qy = (grid.ny / 16) as f64;
        self.scan = Some(ScanSection {
            parameter: ScanParameter::TiltGrid,
            values: [-4.0, -2.0, 0.0, 2.0, 4.0].iter().map(|k| k * bx).collect(),
            values_y: [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|k| k * qy * by).collect(),
        });
        Ok(self)
    }

    /// Tilt grid behind 5 mm of defocus of both image planes, with a finer
    /// vertical axis.
    pub fn with_defocus_grid(mut self) -> Result<Self> {
        let grid = self.grid.build()?;
        let bx = grid.dnu_x();
        self.interferometer.defocus_signal = 5.0;
        self.interferometer.defocus_idler = 5.0;
        self.scan = Some(ScanSection {
            parameter: ScanParameter::TiltGrid,
            values: [-4.0, -2.0, 0.0, 2.0, 4.0].iter().map(|k| k * bx).collect(),
            values_y: vec![-6.0, -3.0, 0.0, 3.0, 6.0],
        });
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: SimulationConfig =
            toml::from_str(text).map_err(|e| SimError::config(format!("invalid config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        SimulationConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every section; nothing is computed before this passes.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.build()?;
        self.pump.validate()?;
        if (self.pump.wavelength_nm - grid.pump_wavelength_nm).abs() > 1e-9 * grid.pump_wavelength_nm {
            return Err(SimError::config("pump and grid wavelengths differ"));
        }
        self.crystal.validate()?;
        self.interferometer.validate(&grid)?;
        if self.ensemble.realizations < 2 {
            return Err(SimError::config("an ensemble needs at least 2 realizations"));
        }
        if !(self.ensemble.variance_per_mode > 0.0) {
            return Err(SimError::config("variance_per_mode must be positive"));
        }
        if !(self.analysis.window_sigma > 0.0) {
            return Err(SimError::config("window_sigma must be positive"));
        }
        if let Some(scan) = &self.scan {
            scan.validate()?;
            for point in scan.points(&self.interferometer) {
                point.validate(&grid)?;
            }
        }
        Ok(())
    }
}

/// Worker count from `requested`, else the environment, else all cores.
pub fn resolve_workers(requested: Option<usize>) -> Result<usize> {
    if let Some(n) = requested {
        return if n == 0 {
            Err(SimError::config("--workers must be at least 1"))
        } else {
            Ok(n)
        };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| SimError::config(format!("{WORKERS_ENV}={v} is not a positive integer"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["full-scale", "desk-scale", "high-gain"] {
            let c = SimulationConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = SimulationConfig::from_toml_str(&c.to_toml_string()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        let d = SimulationConfig::desk_scale();
        assert_eq!(d.grid.counts, [64, 64, 64]);
        assert_eq!(d.ensemble.realizations, 100);
        assert_ne!(d.hash(), SimulationConfig::full_scale().hash());
        assert!(SimulationConfig::preset("nope").is_err());
    }

    #[test]
    fn full_scale_window_sizes() {
        let g = SimulationConfig::full_scale().grid.build().unwrap();
        assert!((g.nx as f64 * g.dx - 0.9984).abs() < 1e-12);
        assert!((g.dnu_x() - 1.0016).abs() < 1e-4);
        assert!((g.nt as f64 * g.dt - 294.4).abs() < 1e-9);
        assert!((g.dnu_t() * 1e3 - 3.397).abs() < 1e-3);
    }

    #[test]
    fn scans_expand_to_points() {
        let c = SimulationConfig::desk_scale().with_delay_scan();
        let pts = c.scan.as_ref().unwrap().points(&c.interferometer);
        assert_eq!(pts.len(), 11);
        assert!((pts[0].delay + 17.0).abs() < 1e-12 && (pts[10].delay - 17.0).abs() < 1e-12);
        let c = SimulationConfig::desk_scale().with_tilt_grid().unwrap();
        c.validate().unwrap();
        let scan = c.scan.as_ref().unwrap();
        let pts = scan.points(&c.interferometer);
        assert_eq!(pts.len(), 25);
        assert_eq!(pts[1].tilt_nu_x, scan.values[0]);
        assert_eq!(pts[1].tilt_nu_y, scan.values_y[1]);
        let d = SimulationConfig::desk_scale().with_defocus_grid().unwrap();
        assert_eq!(d.interferometer.defocus_signal, 5.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SimulationConfig::desk_scale();
        c.grid.counts = [60, 64, 64];
        assert!(matches!(c.validate(), Err(SimError::Config(_))));
        let mut c = SimulationConfig::desk_scale();
        c.ensemble.realizations = 1;
        assert!(c.validate().is_err());
        let mut c = SimulationConfig::desk_scale();
        c.scan = Some(ScanSection {
            parameter: ScanParameter::Delay,
            values: vec![500.0],
            values_y: vec![],
        });
        assert!(c.validate().is_err());
        let text = SimulationConfig::desk_scale().to_toml_string().replace("[grid]", "[grid]\nbogus = 1");
        assert!(SimulationConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn worker_resolution() {
        assert_eq!(resolve_workers(Some(3)).unwrap(), 3);
        assert!(resolve_workers(Some(0)).is_err());
    }
}
