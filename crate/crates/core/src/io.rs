//! On-disk formats: flat little-endian f64 arrays with a TOML sidecar
//! header, CSV tables and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::CorrelationMap;
use crate::error::{Result, SimError};
use crate::grid::{Image2D, ImageAxes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisInfo {
    pub name: String,
    pub unit: String,
    /// Coordinate of index 0.
    pub start: f64,
    pub step: f64,
}

impl AxisInfo {
    /// Centred axis of `n` samples with step `step`.
    pub fn centered(name: &str, unit: &str, n: usize, step: f64) -> Self {
        AxisInfo {
            name: name.into(),
            unit: unit.into(),
            start: -((n / 2) as f64) * step,
            step,
        }
    }

    pub fn index(name: &str) -> Self {
        AxisInfo {
            name: name.into(),
            unit: "index".into(),
            start: 0.0,
            step: 1.0,
        }
    }
}

/// Sidecar description of a flat array; the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub description: String,
    pub dtype: String,
    pub byte_order: String,
    pub shape: Vec<usize>,
    pub axes: Vec<AxisInfo>,
    pub value_unit: String,
    pub config_hash: String,
}

impl ArrayHeader {
    pub fn new(description: &str, shape: Vec<usize>, axes: Vec<AxisInfo>, value_unit: &str, config_hash: &str) -> Self {
        ArrayHeader {
            description: description.into(),
            dtype: "float64".into(),
            byte_order: "little-endian".into(),
            shape,
            axes,
            value_unit: value_unit.into(),
            config_hash: config_hash.into(),
        }
    }
}

/// Axis descriptions of an image layout (x slowest).
pub fn image_axes(nx: usize, ny: usize, axes: &ImageAxes) -> Vec<AxisInfo> {
    match *axes {
        ImageAxes::SpatialFrequency { dnu_x, dnu_y } => vec![
            AxisInfo::centered("nu_x", "1/mm", nx, dnu_x),
            AxisInfo::centered("nu_y", "1/mm", ny, dnu_y),
        ],
        ImageAxes::Position { dx, dy } => vec![
            AxisInfo::centered("x", "mm", nx, dx),
            AxisInfo::centered("y", "mm", ny, dy),
        ],
        ImageAxes::Time { dt } => vec![AxisInfo::centered("t", "ps", nx, dt)],
        ImageAxes::TemporalFrequency { dnu_t } => vec![AxisInfo::centered("nu_t", "THz", nx, dnu_t)],
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    }
    Ok(())
}

/// Writes `<base>.f64` and `<base>.toml`; returns both paths.
pub fn write_array(base: &Path, values: &[f64], header: &ArrayHeader) -> Result<[PathBuf; 2]> {
    let expected: usize = header.shape.iter().product();
    if expected != values.len() {
        return Err(SimError::GridMismatch(format!(
            "header shape {:?} does not hold {} values",
            header.shape,
            values.len()
        )));
    }
    let data = base.with_extension("f64");
    let side = base.with_extension("toml");
    create_parent(&data)?;
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data, bytes).map_err(|e| SimError::io(&data, e))?;
    let text = toml::to_string(header).expect("header serializes");
    fs::write(&side, text).map_err(|e| SimError::io(&side, e))?;
    Ok([data, side])
}

/// Reads an array written by [`write_array`] given either file's path.
pub fn read_array(path: &Path) -> Result<(Vec<f64>, ArrayHeader)> {
    let data = path.with_extension("f64");
    let side = path.with_extension("toml");
    let text = fs::read_to_string(&side).map_err(|e| SimError::io(&side, e))?;
    let header: ArrayHeader =
        toml::from_str(&text).map_err(|e| SimError::config(format!("bad sidecar {}: {e}", side.display())))?;
    let bytes = fs::read(&data).map_err(|e| SimError::io(&data, e))?;
    if bytes.len() != header.shape.iter().product::<usize>() * 8 {
        return Err(SimError::config(format!("{} does not match its sidecar shape", data.display())));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((values, header))
}

/// Stacks images into one `(n, nx, ny)` array.
pub fn write_image_stack(base: &Path, images: &[&Image2D], description: &str, config_hash: &str) -> Result<[PathBuf; 2]> {
    let first = images
        .first()
        .ok_or_else(|| SimError::config("no images to write"))?;
    let mut values = Vec::with_capacity(images.len() * first.values.len());
    for img in images {
        if !img.same_layout(first) {
            return Err(SimError::GridMismatch("image stack layouts differ".into()));
        }
        values.extend_from_slice(&img.values);
    }
    let mut axes = vec![AxisInfo::index("realization")];
    axes.extend(image_axes(first.nx, first.ny, &first.axes));
    let mut shape = vec![images.len(), first.nx];
    if !first.axes.is_trace() {
        shape.push(first.ny);
    }
    let header = ArrayHeader::new(description, shape, axes, "photons per pixel (symmetric ordering)", config_hash);
    write_array(base, &values, &header)
}

/// Writes a correlation map and its standard error as `<base>` and
/// `<base>_stderr`.
pub fn write_correlation_map(base: &Path, map: &CorrelationMap, description: &str, config_hash: &str) -> Result<Vec<PathBuf>> {
    let axes = image_axes(map.nx, map.ny, &map.axes)
        .into_iter()
        .map(|mut a| {
            a.name = format!("offset_{}", a.name);
            a
        })
        .collect::<Vec<_>>();
    let shape = if map.ny == 1 { vec![map.nx] } else { vec![map.nx, map.ny] };
    let unit = format!("{:?} covariance, {:?}", map.pairing, map.normalization);
    let header = ArrayHeader::new(description, shape.clone(), axes.clone(), &unit, config_hash);
    let mut out = write_array(base, &map.values, &header)?.to_vec();
    let se_base = PathBuf::from(format!("{}_stderr", base.display()));
    let se_header = ArrayHeader::new(&format!("{description} (standard error)"), shape, axes, &unit, config_hash);
    out.extend(write_array(&se_base, &map.std_error, &se_header)?);
    Ok(out)
}

/// Serializes `rows` as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| SimError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn csv_error(path: &Path, e: csv::Error) -> SimError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SimError::io(path, io),
        other => SimError::Numerical(format!("CSV encoding of {}: {other:?}", path.display())),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    create_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| SimError::io(path, e))?;
    Ok(path.to_path_buf())
}
