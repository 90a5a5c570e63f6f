//! Forward operator: the leadfield matrix and noise-free topographies.
//!
//! The leadfield maps dipole moments at grid locations to sensor readings.
//! It is treated as a known linear operator: it can be loaded from disk
//! (CSV or raw binary plus a JSON sidecar) or synthesized deterministically
//! for self-contained experiments.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stage};
use crate::source_space::SourceGrid;

/// Shape sidecar stored next to every leadfield file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeadfieldSidecar {
    pub n_sensors: usize,
    pub n_points: usize,
}

/// The forward operator `G`: `n_sensors x (3 * n_points)`, in sensor units
/// per A·m. Column block `[3r, 3r+3)` holds the gain of grid point `r`.
#[derive(Debug, Clone)]
pub struct Leadfield {
    matrix: DMatrix<f64>,
    grid_id: String,
}

impl Leadfield {
    /// Wrap a matrix, validating its shape against the grid and rejecting
    /// non-finite entries.
    pub fn from_matrix(matrix: DMatrix<f64>, grid: &SourceGrid) -> Result<Self> {
        let expected_cols = 3 * grid.n_points();
        if matrix.ncols() != expected_cols || matrix.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                what: "leadfield".into(),
                expected: format!("n_sensors x {expected_cols}"),
                found: format!("{} x {}", matrix.nrows(), matrix.ncols()),
            });
        }
        for col in 0..matrix.ncols() {
            for row in 0..matrix.nrows() {
                if !matrix[(row, col)].is_finite() {
                    return Err(Error::NonFinite {
                        what: "leadfield".into(),
                        row,
                        col,
                    });
                }
            }
        }
        Ok(Leadfield {
            matrix,
            grid_id: grid.id().to_string(),
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.matrix.ncols() / 3
    }

    /// Identifier of the grid this leadfield was validated against.
    pub fn grid_id(&self) -> &str {
        &self.grid_id
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// The `n_sensors x 3` gain block of grid point `r`.
    pub fn block(&self, r: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.matrix.view((0, 3 * r), (self.n_sensors(), 3))
    }

    /// Assemble the `n_sensors x 3*n_D` gain matrix of a dipole configuration.
    pub fn gain_for(&self, locations: &[usize]) -> DMatrix<f64> {
        let n_s = self.n_sensors();
        let mut gain = DMatrix::zeros(n_s, 3 * locations.len());
        for (d, &r) in locations.iter().enumerate() {
            gain.view_mut((0, 3 * d), (n_s, 3))
                .copy_from(&self.block(r));
        }
        gain
    }

    /// Noise-free topography of a dipole configuration: the superposition of
    /// `G(r_d) * q_d` over dipoles. Empty configurations map to zero.
    pub fn field_of(&self, locations: &[usize], moments: &[Vector3<f64>]) -> DVector<f64> {
        assert_eq!(
            locations.len(),
            moments.len(),
            "one moment per dipole location"
        );
        let mut field = DVector::zeros(self.n_sensors());
        for (&r, q) in locations.iter().zip(moments) {
            field += self.block(r) * q;
        }
        field
    }

    /// Deterministic synthetic leadfield. Each sensor gets a seeded random
    /// characteristic orientation `o`; the gain row-block of grid point `r`
    /// seen from sensor position `p` is `o^t (3 n n^t - I) / |p - r|^2` with
    /// `n = (p - r)/|p - r|`: inverse-square falloff, smooth in direction.
    ///
    /// Sensor orientations depend only on the seed and the sensor index, so
    /// two grids synthesized with the same seed and sensors see consistent
    /// sensor characteristics.
    pub fn synth(grid: &SourceGrid, sensors: &[Point3<f64>], seed: u64) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::InvalidConfig("no sensor positions given".into()));
        }
        // Bounding sphere of the grid: centroid plus maximal radius.
        let n = grid.n_points() as f64;
        let centroid = grid
            .points()
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords)
            / n;
        let radius = grid
            .points()
            .iter()
            .map(|p| (p.coords - centroid).norm())
            .fold(0.0, f64::max);
        for (s, pos) in sensors.iter().enumerate() {
            for (r, pt) in grid.points().iter().enumerate() {
                if (pos - pt).norm() == 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "singular geometry: sensor {s} coincides with grid point {r}"
                    )));
                }
            }
            if (pos.coords - centroid).norm() <= radius {
                return Err(Error::InvalidConfig(format!(
                    "sensor {s} lies inside the grid bounding sphere (radius {radius:.4} m)"
                )));
            }
        }

        let n_s = sensors.len();
        let mut matrix = DMatrix::zeros(n_s, 3 * grid.n_points());
        for (s, pos) in sensors.iter().enumerate() {
            let mut rng = rng::substream(seed, stage::SYNTH_LEADFIELD, s as u64, 0);
            let o: [f64; 3] = UnitSphere.sample(&mut rng);
            let o = Vector3::new(o[0], o[1], o[2]);
            for (r, pt) in grid.points().iter().enumerate() {
                let d = pos - pt;
                let dist = d.norm();
                let nrm = d / dist;
                // row = (3 (o . n) n - o)^t / dist^2
                let row = (nrm * (3.0 * o.dot(&nrm)) - o) / (dist * dist);
                for k in 0..3 {
                    matrix[(s, 3 * r + k)] = row[k];
                }
            }
        }
        Leadfield::from_matrix(matrix, grid)
    }

    /// Write the leadfield: CSV for `.csv` paths, raw row-major little-endian
    /// f64 otherwise, plus a `<path>.json` sidecar with the dimensions.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_csv(path) {
            write_matrix_csv(path, &self.matrix)?;
        } else {
            write_matrix_binary(path, &self.matrix)?;
        }
        let sidecar = LeadfieldSidecar {
            n_sensors: self.n_sensors(),
            n_points: self.n_points(),
        };
        let sidecar_path = sidecar_path(path);
        let text =
            serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&sidecar_path, e))?;
        fs::write(&sidecar_path, text).map_err(|e| Error::io(&sidecar_path, e))?;
        Ok(())
    }

    /// Load a leadfield and validate it against `grid`. Binary files require
    /// the sidecar; CSV files fall back to inferring dimensions when the
    /// sidecar is absent.
    pub fn load(path: impl AsRef<Path>, grid: &SourceGrid) -> Result<Self> {
        let path = path.as_ref();
        let sidecar = read_sidecar(path)?;
        let matrix = if is_csv(path) {
            let m = read_matrix_csv(path)?;
            if let Some(sc) = &sidecar {
                check_sidecar(path, &m, sc)?;
            }
            m
        } else {
            let sc = sidecar.ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "binary leadfield {} requires sidecar {}",
                    path.display(),
                    sidecar_path(path).display()
                ))
            })?;
            read_matrix_binary(path, sc.n_sensors, 3 * sc.n_points)?
        };
        Leadfield::from_matrix(matrix, grid)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Sidecar lives next to the matrix file as `<file>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

fn read_sidecar(path: &Path) -> Result<Option<LeadfieldSidecar>> {
    let sc_path = sidecar_path(path);
    if !sc_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
    let sc = serde_json::from_str(&text).map_err(|e| Error::json(&sc_path, e))?;
    Ok(Some(sc))
}

fn check_sidecar(path: &Path, m: &DMatrix<f64>, sc: &LeadfieldSidecar) -> Result<()> {
    if m.nrows() != sc.n_sensors || m.ncols() != 3 * sc.n_points {
        return Err(Error::ShapeMismatch {
            what: format!("leadfield {}", path.display()),
            expected: format!("{} x {} (sidecar)", sc.n_sensors, 3 * sc.n_points),
            found: format!("{} x {}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

/// Read a plain numeric CSV matrix (no header). Rows must be equal length.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let mut row = Vec::with_capacity(record.len());
        for (c, field) in record.iter().enumerate() {
            let v = field.trim().parse::<f64>().map_err(|_| {
                Error::InvalidConfig(format!(
                    "{}: row {}, column {} is not a number: {field:?}",
                    path.display(),
                    r + 1,
                    c + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: path.display().to_string(),
                    row: r,
                    col: c,
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::ShapeMismatch {
                    what: format!("{} row {}", path.display(), r + 1),
                    expected: format!("{} columns", first.len()),
                    found: format!("{} columns", row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyData(path.display().to_string()));
    }
    let nrows = rows.len();
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

/// Write a matrix as plain numeric CSV (no header), shortest round-trip
/// float formatting.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&m[(r, c)].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_matrix_binary(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_all(&m[(r, c)].to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_matrix_binary(path: &Path, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let expected = nrows * ncols * 8;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch {
            what: format!("binary leadfield {}", path.display()),
            expected: format!("{expected} bytes"),
            found: format!("{} bytes", bytes.len()),
        });
    }
    let mut m = DMatrix::zeros(nrows, ncols);
    for r in 0..nrows {
        for c in 0..ncols {
            let off = (r * ncols + c) * 8;
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: path.display().to_string(),
                    row: r,
                    col: c,
                });
            }
            m[(r, c)] = v;
        }
    }
    Ok(m)
}
