//! Unsafe-set and locality-set geometry built from Euclidean balls.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{distance, norm};

/// Boundary points sampled per disk when no closed form applies.
pub const BOUNDARY_SAMPLES: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has dimension {point} but region has dimension {region}")]
    Dimension { point: usize, region: usize },
    #[error("malformed region: {0}")]
    Malformed(String),
    #[error("unsafe set is not strictly contained in the locality set: {0}")]
    Degenerate(String),
    #[error("{0} is only supported for planar regions")]
    Unsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Self { center, radius }
    }

    fn signed(&self, p: &[f64]) -> f64 {
        distance(p, &self.center) - self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    /// Planar disk; same as a ball with a 2-vector center.
    Disk { center: Vec<f64>, radius: f64 },
    Ball { center: Vec<f64>, radius: f64 },
    DiskUnion { disks: Vec<Ball> },
    /// Everything outside a ball.
    BallComplement { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(default = "open_default")]
    pub open: bool,
}

fn open_default() -> bool {
    true
}

impl Region {
    pub fn disk(center: [f64; 2], radius: f64) -> Self {
        Self {
            shape: Shape::Disk {
                center: center.to_vec(),
                radius,
            },
            open: true,
        }
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        Self {
            shape: Shape::Ball { center, radius },
            open: true,
        }
    }

    pub fn disk_union(disks: Vec<Ball>) -> Self {
        Self {
            shape: Shape::DiskUnion { disks },
            open: true,
        }
    }

    pub fn ball_complement(center: Vec<f64>, radius: f64) -> Self {
        Self {
            shape: Shape::BallComplement { center, radius },
            open: false,
        }
    }

    pub fn closed(mut self) -> Self {
        self.open = false;
        self
    }

    pub fn open(mut self) -> Self {
        self.open = true;
        self
    }

    /// Member balls of a disk, ball or disk union. Empty for complements.
    pub fn balls(&self) -> Vec<Ball> {
        match &self.shape {
            Shape::Disk { center, radius } | Shape::Ball { center, radius } => {
                vec![Ball::new(center.clone(), *radius)]
            }
            Shape::DiskUnion { disks } => disks.clone(),
            Shape::BallComplement { .. } => Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            Shape::Disk { .. } => 2,
            Shape::Ball { center, .. } | Shape::BallComplement { center, .. } => center.len(),
            Shape::DiskUnion { disks } => disks.first().map_or(2, |d| d.center.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |center: &[f64], radius: f64, planar: bool| -> Result<()> {
            if !(radius.is_finite() && radius > 0.0) {
                return Err(GeometryError::Malformed(format!("radius {radius} must be > 0")));
            }
            if planar && center.len() != 2 {
                return Err(GeometryError::Malformed(format!(
                    "disk center must be a 2-vector, got {} coordinates",
                    center.len()
                )));
            }
            if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::Malformed("center must be finite and nonempty".into()));
            }
            Ok(())
        };
        match &self.shape {
            Shape::Disk { center, radius } => check(center, *radius, true),
            Shape::Ball { center, radius } | Shape::BallComplement { center, radius } => {
                check(center, *radius, false)
            }
            Shape::DiskUnion { disks } => {
                if disks.is_empty() {
                    return Err(GeometryError::Malformed("disk union is empty".into()));
                }
                for d in disks {
                    check(&d.center, d.radius, true)?;
                }
                Ok(())
            }
        }
    }

    fn check_dim(&self, p: &[f64]) -> Result<()> {
        let dim = self.dim();
        if p.len() != dim {
            return Err(GeometryError::Dimension {
                point: p.len(),
                region: dim,
            });
        }
        Ok(())
    }

    /// Signed quantity that is negative strictly inside, zero on the boundary.
    fn level(&self, p: &[f64]) -> f64 {
        match &self.shape {
            Shape::Disk { center, radius } | Shape::Ball { center, radius } => {
                distance(p, center) - radius
            }
            Shape::DiskUnion { disks } => disks
                .iter()
                .map(|d| d.signed(p))
                .fold(f64::INFINITY, f64::min),
            Shape::BallComplement { center, radius } => radius - distance(p, center),
        }
    }

    pub fn contains(&self, p: &[f64]) -> Result<bool> {
        self.check_dim(p)?;
        Ok(self.contains_unchecked(p))
    }

    pub(crate) fn contains_unchecked(&self, p: &[f64]) -> bool {
        let level = self.level(p);
        if self.open {
            level < 0.0
        } else {
            level <= 0.0
        }
    }

    /// Euclidean distance from `p` to the closure of the region.
    pub fn distance(&self, p: &[f64]) -> Result<f64> {
        self.check_dim(p)?;
        Ok(self.distance_unchecked(p))
    }

    pub(crate) fn distance_unchecked(&self, p: &[f64]) -> f64 {
        self.level(p).max(0.0)
    }

    /// Evenly spaced points on the boundary of a planar region. For unions
    /// only points not interior to another member are kept.
    pub fn boundary_samples(&self, per_disk: usize) -> Result<Vec<Vec<f64>>> {
        let circles: Vec<Ball> = match &self.shape {
            Shape::Disk { center, radius } => vec![Ball::new(center.clone(), *radius)],
            Shape::Ball { center, radius } | Shape::BallComplement { center, radius } => {
                if center.len() != 2 {
                    return Err(GeometryError::Unsupported("boundary sampling"));
                }
                vec![Ball::new(center.clone(), *radius)]
            }
            Shape::DiskUnion { disks } => disks.clone(),
        };
        let mut out = Vec::with_capacity(circles.len() * per_disk);
        for (i, c) in circles.iter().enumerate() {
            for k in 0..per_disk {
                let a = TAU * k as f64 / per_disk as f64;
                let p = vec![c.center[0] + c.radius * a.cos(), c.center[1] + c.radius * a.sin()];
                let interior_elsewhere = circles
                    .iter()
                    .enumerate()
                    .any(|(j, o)| j != i && o.signed(&p) < -1e-12);
                if !interior_elsewhere {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`Region::distance`].
pub fn distance_to_set(p: &[f64], r: &Region) -> Result<f64> {
    r.distance(p)
}

pub fn contains(p: &[f64], r: &Region) -> Result<bool> {
    r.contains(p)
}

/// Unsafe set `D` inside a locality set `X`, with the boundary constants
/// `κ = min_{ξ ∈ ∂X} |ξ|_D` and `D₂ = max_{ξ ∈ D} ‖ξ‖`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyGeometry {
    pub unsafe_set: Region,
    pub locality: Region,
    pub kappa: f64,
    pub d2: f64,
}

impl SafetyGeometry {
    pub fn new(unsafe_set: Region, locality: Region) -> Result<Self> {
        unsafe_set.validate()?;
        locality.validate()?;
        if matches!(unsafe_set.shape, Shape::BallComplement { .. })
            || matches!(locality.shape, Shape::BallComplement { .. })
        {
            return Err(GeometryError::Malformed(
                "unsafe and locality sets must be bounded".into(),
            ));
        }
        if unsafe_set.dim() != locality.dim() {
            return Err(GeometryError::Dimension {
                point: unsafe_set.dim(),
                region: locality.dim(),
            });
        }
        let (kappa, d2) = boundary_extremes_of(&unsafe_set, &locality)?;
        Ok(Self {
            unsafe_set,
            locality,
            kappa,
            d2,
        })
    }

    pub fn dim(&self) -> usize {
        self.unsafe_set.dim()
    }

    /// `|p|_D`
    pub fn dist_to_unsafe(&self, p: &[f64]) -> f64 {
        self.unsafe_set.distance_unchecked(p)
    }

    pub fn in_unsafe(&self, p: &[f64]) -> bool {
        self.unsafe_set.contains_unchecked(p)
    }

    pub fn in_locality(&self, p: &[f64]) -> bool {
        self.locality.contains_unchecked(p)
    }
}

pub fn boundary_extremes(g: &SafetyGeometry) -> (f64, f64) {
    (g.kappa, g.d2)
}

fn boundary_extremes_of(d: &Region, x: &Region) -> Result<(f64, f64)> {
    let d_balls = d.balls();
    let d2 = d_balls
        .iter()
        .map(|b| norm(&b.center) + b.radius)
        .fold(f64::NEG_INFINITY, f64::max);

    let x_balls = x.balls();
    let kappa = if d_balls.len() == 1 && x_balls.len() == 1 {
        // Nearest point of ∂X to D lies on the line through both centers.
        let (db, xb) = (&d_balls[0], &x_balls[0]);
        xb.radius - distance(&db.center, &xb.center) - db.radius
    } else {
        if d.dim() != 2 {
            return Err(GeometryError::Unsupported("union containment"));
        }
        for p in d.boundary_samples(BOUNDARY_SAMPLES)? {
            if !x.contains_unchecked(&p) {
                return Err(GeometryError::Degenerate(format!(
                    "boundary point {p:?} of D lies outside X"
                )));
            }
        }
        x.boundary_samples(BOUNDARY_SAMPLES)?
            .iter()
            .map(|p| d.distance_unchecked(p))
            .fold(f64::INFINITY, f64::min)
    };
    if !(kappa > 0.0) {
        return Err(GeometryError::Degenerate(format!("kappa = {kappa}")));
    }
    Ok((kappa, d2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sec4() -> SafetyGeometry {
        SafetyGeometry::new(Region::disk([4.0, 6.0], 2.0), Region::disk([4.0, 6.0], 3.0)).unwrap()
    }

    #[test]
    fn distance_examples() {
        let d = Region::disk([4.0, 6.0], 2.0);
        assert_eq!(distance_to_set(&[4.0, 6.0], &d).unwrap(), 0.0);
        assert_relative_eq!(distance_to_set(&[4.0, 9.0], &d).unwrap(), 1.0);
        assert_relative_eq!(
            distance_to_set(&[5.0, 8.0], &d).unwrap(),
            5f64.sqrt() - 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn distance_dimension_mismatch() {
        let d = Region::disk([4.0, 6.0], 2.0);
        assert_eq!(
            d.distance(&[1.0, 2.0, 3.0]),
            Err(GeometryError::Dimension { point: 3, region: 2 })
        );
    }

    #[test]
    fn contains_examples() {
        let d = Region::disk([4.0, 6.0], 2.0);
        assert!(contains(&[4.0, 6.0], &d).unwrap());
        assert!(!contains(&[6.0, 6.0], &d).unwrap());
        assert!(!contains(&[8.0, 6.0], &d).unwrap());
        assert!(contains(&[6.0, 6.0], &d.clone().closed()).unwrap());
        let x = Region::disk([4.0, 6.0], 3.0);
        assert!(contains(&[4.0, 6.0], &x).unwrap());
        assert!(contains(&[6.9, 6.0], &x).unwrap());
        assert!(!contains(&[7.0, 6.0], &x).unwrap());
    }

    #[test]
    fn complement_and_union() {
        let out = Region::ball_complement(vec![0.0, 0.0], 2.0);
        assert!(out.contains(&[3.0, 0.0]).unwrap());
        assert!(out.contains(&[2.0, 0.0]).unwrap());
        assert!(!out.contains(&[1.0, 0.0]).unwrap());
        assert_relative_eq!(out.distance(&[0.5, 0.0]).unwrap(), 1.5);

        let u = Region::disk_union(vec![
            Ball::new(vec![0.0, 0.0], 1.0),
            Ball::new(vec![3.0, 0.0], 1.0),
        ]);
        assert_relative_eq!(u.distance(&[1.5, 0.0]).unwrap(), 0.5);
        assert_relative_eq!(u.distance(&[5.0, 0.0]).unwrap(), 1.0);
        assert!(u.contains(&[3.5, 0.0]).unwrap());
    }

    #[test]
    fn extremes_examples() {
        let g = sec4();
        assert_relative_eq!(g.kappa, 1.0, max_relative = 1e-12);
        assert_relative_eq!(g.d2, 52f64.sqrt() + 2.0, max_relative = 1e-12);
        assert_eq!(boundary_extremes(&g), (g.kappa, g.d2));
        let origin =
            SafetyGeometry::new(Region::disk([0.0, 0.0], 1.0), Region::disk([0.0, 0.0], 2.0)).unwrap();
        assert_eq!(boundary_extremes(&origin), (1.0, 1.0));
    }

    #[test]
    fn d2_matches_sampling() {
        let g = sec4();
        let brute = g
            .unsafe_set
            .boundary_samples(100_000)
            .unwrap()
            .iter()
            .map(|p| norm(p))
            .fold(0.0, f64::max);
        assert!((brute - g.d2).abs() < 1e-6);
    }

    #[test]
    fn union_extremes_by_sampling() {
        let d = Region::disk_union(vec![
            Ball::new(vec![0.0, 0.0], 1.0),
            Ball::new(vec![1.0, 0.0], 1.0),
        ]);
        let x = Region::disk([0.5, 0.0], 3.0);
        let g = SafetyGeometry::new(d, x).unwrap();
        // Farthest reach of D along the x-axis is 2.0 from the X center at 0.5.
        assert!((g.kappa - 1.5).abs() < 1e-3);
        assert_relative_eq!(g.d2, 2.0);
    }

    #[test]
    fn rejects_uncontained_unsafe_set() {
        let err = SafetyGeometry::new(Region::disk([4.0, 6.0], 2.0), Region::disk([5.0, 6.0], 2.5));
        assert!(matches!(err, Err(GeometryError::Degenerate(_))));
        let err = SafetyGeometry::new(Region::disk([0.0, 0.0], 2.0), Region::disk([0.0, 0.0], 2.0));
        assert!(matches!(err, Err(GeometryError::Degenerate(_))));
    }

    #[test]
    fn rejects_malformed() {
        assert!(Region::disk([0.0, 0.0], 0.0).validate().is_err());
        assert!(Region::disk_union(vec![]).validate().is_err());
    }
}
