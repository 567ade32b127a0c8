//! `homsim`: ensemble simulations of a spatially resolved Hong-Ou-Mandel
//! experiment with bright twin beams.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hom_sim::analysis::frequency_to_wavelength_width;
use hom_sim::config::{resolve_workers, ScanParameter, SimulationConfig};
use hom_sim::oracle::GaussianBiphotonParams;
use hom_sim::runner::{self, RunOptions, ScanRun};
use hom_sim::{io, validate, SimError};

#[derive(Parser)]
#[command(name = "homsim", version, about = "Stochastic twin-beam Hong-Ou-Mandel simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file (defaults to the full-scale preset)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset: full-scale, desk-scale or high-gain
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,
    /// 64 x 64 x 64 grid with 100 realizations
    #[arg(long, global = true, conflicts_with_all = ["config", "preset"])]
    desk_scale: bool,
    /// Base seed of the realization streams
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the number of realizations
    #[arg(long, global = true)]
    realizations: Option<usize>,
    /// Worker threads (default: $HOMSIM_WORKERS, else all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (default: <output.directory>/<command>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One realization with every intermediate field written to disk
    SingleRun {
        #[arg(long, default_value_t = 0)]
        realization: u64,
    },
    /// Single-beam and twin-beam correlation widths and Schmidt numbers
    Characterize,
    /// Coincidence dip against the idler delay
    HomTemporal,
    /// Coincidence dip over a grid of beamsplitter tilts
    HomSpatial,
    /// Tilt grid with both image planes defocused
    HomDefocus,
    /// Closed-form and quadrature dip surfaces of the Gaussian biphoton model
    Oracle {
        /// Far-field correlation width (mm^-1)
        #[arg(long, default_value_t = 5.1)]
        corr_nu: f64,
        /// Single-beam far-field width (mm^-1)
        #[arg(long, default_value_t = 38.2)]
        spdc_nu: f64,
        /// Temporal dip width (ps)
        #[arg(long, default_value_t = 2.7)]
        sigma_t: f64,
    },
    /// Solver oracles and structural invariants
    Validate,
}

fn base_config(c: &Common) -> hom_sim::Result<SimulationConfig> {
    let mut config = match (&c.config, &c.preset) {
        (Some(path), _) => SimulationConfig::load(path)?,
        (None, Some(name)) => SimulationConfig::preset(name)?,
        (None, None) if c.desk_scale => SimulationConfig::desk_scale(),
        (None, None) => SimulationConfig::full_scale(),
    };
    if let Some(seed) = c.seed {
        config.ensemble.seed = seed;
    }
    if let Some(n) = c.realizations {
        config.ensemble.realizations = n;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(c: &Common, config: &SimulationConfig, command: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| config.output.directory.join(command))
}

fn scan_kind(config: &SimulationConfig) -> Option<ScanParameter> {
    config.scan.as_ref().map(|s| s.parameter)
}

fn report_scan(run: &ScanRun, dir: &Path) {
    println!("reference total {:.4e} inside the {}-sigma window", run.reference.total, run.reference.window.n_sigma);
    for p in &run.points {
        let s = &p.setting;
        println!(
            "delay {:8.3} ps  tilt ({:8.3}, {:8.3}) mm^-1  rate {:.4} +- {:.4}",
            s.delay, s.tilt_nu_x, s.tilt_nu_y, p.rate, p.std_error
        );
    }
    match (&run.dip.fit, &run.dip.fit_error) {
        (Some(f), _) => println!("dip fit: visibility {:.3}, sigma {:?}, centre {:?}", f.amplitude, f.sigma, f.center),
        (None, Some(e)) => println!("dip fit failed: {e}"),
        _ => {}
    }
    println!("results in {}", dir.display());
}

fn run(cli: Cli) -> hom_sim::Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Validate => {
            let checks = validate::run_all()?;
            let mut failed = 0;
            for k in &checks {
                println!(
                    "{} {} ({:.3e} < {:.0e}) {}",
                    if k.passed { "PASS" } else { "FAIL" },
                    k.name,
                    k.value,
                    k.tolerance,
                    k.detail
                );
                failed += usize::from(!k.passed);
            }
            if failed > 0 {
                return Err(SimError::Numerical(format!("{failed} of {} checks failed", checks.len())));
            }
            println!("all {} checks passed", checks.len());
        }
        Command::Oracle { corr_nu, spdc_nu, sigma_t } => {
            let mut config = base_config(c)?;
            if !matches!(scan_kind(&config), Some(ScanParameter::TiltGrid | ScanParameter::TiltX | ScanParameter::TiltY)) {
                config = config.with_tilt_grid()?;
            }
            let params = GaussianBiphotonParams::from_measured_widths(corr_nu, spdc_nu, sigma_t)?;
            let rows = runner::oracle_rows(&config, &params)?;
            let worst = rows
                .chunks_exact(2)
                .map(|p| (p[0].rate - p[1].rate).abs())
                .fold(0.0, f64::max);
            let path = out_dir(c, &config, "oracle").join("oracle_dip.csv");
            io::write_csv(&path, &rows)?;
            println!("{} tilt points; largest closed-form/quadrature difference {worst:.2e} C0", rows.len() / 2);
            println!("wrote {}", path.display());
        }
        Command::SingleRun { realization } => {
            let config = base_config(c)?;
            let dir = out_dir(c, &config, "single-run");
            let m = runner::single_run(&config, realization, &dir)?;
            println!("realization {realization}: {} files in {}", m.files.len(), dir.display());
        }
        Command::Characterize => {
            let config = base_config(c)?;
            let dir = out_dir(c, &config, "characterize");
            let opts = RunOptions { workers: resolve_workers(c.workers)?, out: Some(dir.clone()) };
            let ch = runner::characterize(&config, &opts)?;
            let w = &ch.correlation;
            for (name, b) in [("signal", &ch.signal), ("idler", &ch.idler)] {
                println!(
                    "{name}: x {:.4} mm, y {:.4} mm, nu_x {:.2} mm^-1, nu_y {:.2} mm^-1, t {:.2} ps, lambda {:.3} nm, {:.3e} photons",
                    b.x, b.y, b.nu_x, b.nu_y, b.t, b.lambda_nm, b.photons
                );
            }
            println!(
                "correlation: x {:.2} um, y {:.2} um, nu_x {:.2} mm^-1, nu_y {:.2} mm^-1, t {:.3} ps, nu_t {:.2} GHz ({:.4} nm)",
                w.x * 1e3,
                w.y * 1e3,
                w.nu_x,
                w.nu_y,
                w.t,
                w.nu_t * 1e3,
                frequency_to_wavelength_width(w.nu_t, config.interferometer.filter_center_nm)
            );
            let k = &ch.schmidt;
            println!(
                "Schmidt numbers: K_x {:.1}, K_y {:.1}, K_t {:.1}, total {:.3e}; pump/spectrum estimate {:.1}",
                k.k_x, k.k_y, k.k_t, k.dimensionality, ch.law_eberly
            );
            println!("results in {}", dir.display());
        }
        Command::HomTemporal | Command::HomSpatial | Command::HomDefocus => {
            let (name, config) = match cli.command {
                Command::HomTemporal => {
                    let config = base_config(c)?;
                    let config = if scan_kind(&config) == Some(ScanParameter::Delay) { config } else { config.with_delay_scan() };
                    ("hom-temporal", config)
                }
                Command::HomSpatial => {
                    let config = base_config(c)?;
                    let config = if scan_kind(&config).is_some_and(|k| k != ScanParameter::Delay) { config } else { config.with_tilt_grid()? };
                    ("hom-spatial", config)
                }
                _ => {
                    let config = base_config(c)?;
                    let defocused = config.interferometer.defocus_signal > 0.0 || config.interferometer.defocus_idler > 0.0;
                    let config = if defocused && config.scan.is_some() { config } else { config.with_defocus_grid()? };
                    ("hom-defocus", config)
                }
            };
            config.validate()?;
            let dir = out_dir(c, &config, name);
            let opts = RunOptions { workers: resolve_workers(c.workers)?, out: Some(dir.clone()) };
            let scan = runner::run_scan(&config, &opts)?;
            report_scan(&scan, &dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
