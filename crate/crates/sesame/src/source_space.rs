//! Candidate source grid: the discretized brain volume.
//!
//! A [`SourceGrid`] owns the candidate dipole locations together with the
//! precomputed neighborhood structure used by local location proposals and by
//! peak extraction. Grids are immutable after construction and safe to share
//! across parallel particle workers.

use std::path::Path;

use nalgebra::Point3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default neighborhood radius for local moves (meters).
pub const DEFAULT_NEIGHBOR_RADIUS: f64 = 0.02;
/// Default length scale of the local proposal kernel (meters).
pub const DEFAULT_PROPOSAL_SCALE: f64 = 0.01;

/// Candidate dipole locations in 3D with neighborhood structure.
#[derive(Debug, Clone)]
pub struct SourceGrid {
    points: Vec<Point3<f64>>,
    neighbor_radius: f64,
    proposal_scale: f64,
    neighbors: Vec<Vec<usize>>,
    id: String,
}

impl SourceGrid {
    /// Build a grid from candidate points, precomputing neighbor lists
    /// (points strictly within `neighbor_radius`, self excluded).
    pub fn build(
        points: Vec<Point3<f64>>,
        neighbor_radius: f64,
        proposal_scale: f64,
    ) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if neighbor_radius <= 0.0
            || proposal_scale <= 0.0
            || neighbor_radius.is_nan()
            || proposal_scale.is_nan()
        {
            return Err(Error::InvalidGrid(format!(
                "neighbor_radius and proposal_scale must be positive, got {neighbor_radius} and {proposal_scale}"
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidGrid(format!(
                    "non-finite coordinate at point {i}: ({}, {}, {})",
                    p.x, p.y, p.z
                )));
            }
        }

        let n = points.len();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (points[i] - points[j]).norm();
                if d == 0.0 {
                    return Err(Error::InvalidGrid(format!(
                        "duplicate points at indices {i} and {j}"
                    )));
                }
                if d <= neighbor_radius {
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }

        let id = content_id(&points);
        Ok(SourceGrid {
            points,
            neighbor_radius,
            proposal_scale,
            neighbors,
            id,
        })
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn point(&self, index: usize) -> Point3<f64> {
        self.points[index]
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn neighbor_radius(&self) -> f64 {
        self.neighbor_radius
    }

    pub fn proposal_scale(&self) -> f64 {
        self.proposal_scale
    }

    /// Content hash binding leadfields and results to this grid.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (self.points[i] - self.points[j]).norm()
    }

    /// Indices within `neighbor_radius` of `index`, self excluded.
    pub fn neighbors(&self, index: usize) -> &[usize] {
        &self.neighbors[index]
    }

    /// Coordinates of a set of grid indices.
    pub fn coordinates(&self, indices: &[usize]) -> Vec<Point3<f64>> {
        indices.iter().map(|&i| self.points[i]).collect()
    }

    /// Local move proposal from grid point `from`: mass on each neighbor
    /// proportional to `exp(-d^2 / (2 * proposal_scale^2))`, normalized.
    /// Returns the empty distribution when `from` has no neighbors.
    pub fn location_proposal(&self, from: usize) -> ProposalDistribution {
        let nbrs = &self.neighbors[from];
        if nbrs.is_empty() {
            return ProposalDistribution::empty();
        }
        let inv_two_s2 = 1.0 / (2.0 * self.proposal_scale * self.proposal_scale);
        let mut masses: Vec<f64> = nbrs
            .iter()
            .map(|&j| {
                let d = self.distance(from, j);
                (-d * d * inv_two_s2).exp()
            })
            .collect();
        let total: f64 = masses.iter().sum();
        for m in &mut masses {
            *m /= total;
        }
        ProposalDistribution {
            indices: nbrs.clone(),
            masses,
        }
    }

    /// Read a grid from CSV with header `x,y,z`, one point per row (meters).
    pub fn from_csv(
        path: impl AsRef<Path>,
        neighbor_radius: f64,
        proposal_scale: f64,
    ) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        {
            let headers = reader.headers().map_err(|e| Error::csv(path, e))?;
            let expected = ["x", "y", "z"];
            let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
            if got != expected {
                return Err(Error::InvalidGrid(format!(
                    "grid csv {} must have header x,y,z, found {:?}",
                    path.display(),
                    got
                )));
            }
        }
        let mut points = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::csv(path, e))?;
            if record.len() != 3 {
                return Err(Error::InvalidGrid(format!(
                    "grid csv row {} has {} fields, expected 3",
                    row + 1,
                    record.len()
                )));
            }
            let mut coords = [0.0f64; 3];
            for (col, field) in record.iter().enumerate() {
                coords[col] = field.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidGrid(format!(
                        "grid csv row {}, column {} is not a number: {field:?}",
                        row + 1,
                        col + 1
                    ))
                })?;
            }
            points.push(Point3::new(coords[0], coords[1], coords[2]));
        }
        SourceGrid::build(points, neighbor_radius, proposal_scale)
    }

    /// Write the grid points as CSV with header `x,y,z`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        writer
            .write_record(["x", "y", "z"])
            .map_err(|e| Error::csv(path, e))?;
        for p in &self.points {
            writer
                .write_record([p.x.to_string(), p.y.to_string(), p.z.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn content_id(points: &[Point3<f64>]) -> String {
    let mut hasher = Sha256::new();
    for p in points {
        hasher.update(p.x.to_le_bytes());
        hasher.update(p.y.to_le_bytes());
        hasher.update(p.z.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Discrete proposal distribution over grid indices. May be empty.
#[derive(Debug, Clone, Default)]
pub struct ProposalDistribution {
    indices: Vec<usize>,
    masses: Vec<f64>,
}

impl ProposalDistribution {
    pub fn empty() -> Self {
        ProposalDistribution::default()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    /// Probability mass assigned to `index` (0 when not in the support).
    pub fn mass_of(&self, index: usize) -> f64 {
        self.indices
            .iter()
            .position(|&i| i == index)
            .map_or(0.0, |pos| self.masses[pos])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.masses.iter().copied())
    }

    /// Draw one index by inverse CDF walk in support order.
    /// Panics on an empty distribution; callers check `is_empty` first.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> usize {
        assert!(!self.is_empty(), "sampling from empty proposal");
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, m) in self.iter() {
            acc += m;
            if u < acc {
                return i;
            }
        }
        *self.indices.last().unwrap()
    }
}
