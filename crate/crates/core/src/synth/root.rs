//! Procedural root systems as branching polylines with tapering radii.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Direction of gravity in `(d, h, w)` coordinates: straight down the depth axis.
pub const GRAVITY: Point = [1.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootGenParams {
    pub seed: u64,
    /// Taproot length range in 1x voxels.
    pub taproot_length: [f64; 2],
    /// Lateral length range for first-order laterals; halves per further order.
    pub lateral_length: [f64; 2],
    pub step_length: f64,
    /// Standard deviation of the per-step direction perturbation, radians.
    pub jitter: f64,
    /// Per-step blend weight toward gravity for the taproot.
    pub gravitropism: f64,
    /// Same blend for laterals, which grow closer to horizontal.
    pub lateral_gravitropism: f64,
    /// Expected lateral emergences per unit of parent length.
    pub branching_rate: f64,
    /// Angle between parent direction and a new lateral, radians.
    pub branch_angle: [f64; 2],
    pub radius_ratio: [f64; 2],
    /// Fractional radius loss per unit length.
    pub taper_rate: f64,
    pub initial_radius: [f64; 2],
    pub r_min: f64,
    /// Deepest branch order (taproot is order 0).
    pub max_depth: usize,
}

impl Default for RootGenParams {
    fn default() -> Self {
        RootGenParams {
            seed: 0,
            taproot_length: [44.0, 66.0],
            lateral_length: [12.0, 30.0],
            step_length: 1.0,
            jitter: 0.12,
            gravitropism: 0.08,
            lateral_gravitropism: 0.015,
            branching_rate: 0.08,
            branch_angle: [0.9, 1.4],
            radius_ratio: [0.45, 0.7],
            taper_rate: 0.004,
            initial_radius: [2.0, 3.2],
            r_min: 0.6,
            max_depth: 2,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= min && r[0] <= r[1]) {
        return Err(Error::config(format!("{name} must be a range [lo, hi] with {min} <= lo <= hi, got {r:?}")));
    }
    Ok(())
}

impl RootGenParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_length > 0.0 && self.step_length.is_finite()) {
            return Err(Error::config(format!("step_length must be > 0, got {}", self.step_length)));
        }
        check_range("taproot_length", self.taproot_length, 0.0)?;
        check_range("lateral_length", self.lateral_length, 0.0)?;
        check_range("branch_angle", self.branch_angle, 0.0)?;
        check_range("radius_ratio", self.radius_ratio, 0.0)?;
        check_range("initial_radius", self.initial_radius, self.r_min)?;
        if self.radius_ratio[1] > 1.0 {
            return Err(Error::config("radius_ratio must not exceed 1"));
        }
        for (name, v) in [
            ("jitter", self.jitter),
            ("branching_rate", self.branching_rate),
            ("taper_rate", self.taper_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("gravitropism", self.gravitropism), ("lateral_gravitropism", self.lateral_gravitropism)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.taper_rate * self.step_length >= 1.0 {
            return Err(Error::config("taper_rate * step_length must be < 1"));
        }
        if !(self.r_min > 0.0) {
            return Err(Error::config(format!("r_min must be > 0, got {}", self.r_min)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub branch: usize,
    /// Index of the parent vertex the lateral starts from.
    pub vertex: usize,
    /// Arc length along the parent at that vertex.
    pub arc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub vertices: Vec<Point>,
    pub radii: Vec<f64>,
    pub parent: Option<Attachment>,
    pub depth: usize,
}

impl Branch {
    pub fn length(&self) -> f64 {
        self.vertices.windows(2).map(|w| dist(w[0], w[1])).sum()
    }
}

/// Branches in creation order; branch 0 is the taproot when present.
///
/// Coordinates are 1x voxel units with the taproot base at the origin; callers
/// place the system in a grid with [`RootSystem::translated`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RootSystem {
    pub branches: Vec<Branch>,
}

impl RootSystem {
    pub fn total_length(&self) -> f64 {
        self.branches.iter().map(Branch::length).sum()
    }

    pub fn lateral_count(&self) -> usize {
        self.branches.iter().filter(|b| b.parent.is_some()).count()
    }

    pub fn translated(&self, offset: Point) -> RootSystem {
        let mut out = self.clone();
        for b in &mut out.branches {
            for v in &mut b.vertices {
                for a in 0..3 {
                    v[a] += offset[a];
                }
            }
        }
        out
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self, r_min: f64) -> std::result::Result<(), String> {
        for (i, b) in self.branches.iter().enumerate() {
            if b.vertices.len() != b.radii.len() || b.vertices.is_empty() {
                return Err(format!("branch {i}: vertex/radius count mismatch"));
            }
            if b.radii.windows(2).any(|w| w[1] > w[0]) {
                return Err(format!("branch {i}: radius increases"));
            }
            if b.radii.iter().any(|&r| r < r_min) {
                return Err(format!("branch {i}: radius below r_min"));
            }
            if let Some(att) = b.parent {
                let parent = self.branches.get(att.branch).filter(|_| att.branch < i).ok_or(format!("branch {i}: bad parent"))?;
                let pr = *parent.radii.get(att.vertex).ok_or(format!("branch {i}: bad attachment vertex"))?;
                if b.radii[0] > pr {
                    return Err(format!("branch {i}: base radius exceeds parent radius"));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn normalize(v: Point) -> Point {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Random unit vector perpendicular to unit vector `d`.
fn perpendicular(d: Point, rng: &mut ChaCha8Rng) -> Point {
    loop {
        let n: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let k = dot(n, d);
        let p = [n[0] - k * d[0], n[1] - k * d[1], n[2] - k * d[2]];
        if dot(p, p) > 1e-12 {
            return normalize(p);
        }
    }
}

struct Pending {
    base: Point,
    dir: Point,
    radius: f64,
    length: f64,
    depth: usize,
    parent: Option<Attachment>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Grows a root system by a stochastic branching walk.
///
/// Each step perturbs the heading by `jitter`, blends it toward gravity and
/// shrinks the radius geometrically. Laterals emerge as a Poisson process in
/// arc length on every branch shallower than `max_depth`. Growth is
/// breadth-first, so a single seeded stream makes the result deterministic.
pub fn generate_root(params: &RootGenParams) -> Result<RootSystem> {
    params.validate()?;
    let p = params;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let spacing = (p.branching_rate > 0.0).then(|| Exp::new(p.branching_rate).expect("positive rate"));
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(Pending {
        base: [0.0; 3],
        dir: GRAVITY,
        radius: uniform(&mut rng, p.initial_radius),
        length: uniform(&mut rng, p.taproot_length),
        depth: 0,
        parent: None,
    });
    let mut branches = Vec::new();
    while let Some(job) = queue.pop_front() {
        let index = branches.len();
        let bias = if job.depth == 0 { p.gravitropism } else { p.lateral_gravitropism };
        let steps = (job.length / p.step_length).ceil() as usize;
        let mut vertices = vec![job.base];
        let mut radii = vec![job.radius];
        let (mut pos, mut dir, mut r) = (job.base, job.dir, job.radius);
        let can_branch = job.depth < p.max_depth;
        let mut next_event = match (&spacing, can_branch) {
            (Some(e), true) => e.sample(&mut rng),
            _ => f64::INFINITY,
        };
        let mut arc = 0.0;
        for _ in 0..steps {
            if p.jitter > 0.0 {
                let u = perpendicular(dir, &mut rng);
                let a: f64 = p.jitter * rng.sample::<f64, _>(StandardNormal);
                dir = normalize([dir[0] + a * u[0], dir[1] + a * u[1], dir[2] + a * u[2]]);
            }
            if bias > 0.0 {
                dir = normalize([
                    (1.0 - bias) * dir[0] + bias * GRAVITY[0],
                    (1.0 - bias) * dir[1] + bias * GRAVITY[1],
                    (1.0 - bias) * dir[2] + bias * GRAVITY[2],
                ]);
            }
            for a in 0..3 {
                pos[a] += p.step_length * dir[a];
            }
            r = (r * (1.0 - p.taper_rate * p.step_length)).max(p.r_min);
            arc += p.step_length;
            vertices.push(pos);
            radii.push(r);
            while next_event <= arc {
                if r > p.r_min {
                    let ratio = uniform(&mut rng, p.radius_ratio);
                    let theta = uniform(&mut rng, p.branch_angle);
                    let u = perpendicular(dir, &mut rng);
                    let child_dir = normalize([
                        theta.cos() * dir[0] + theta.sin() * u[0],
                        theta.cos() * dir[1] + theta.sin() * u[1],
                        theta.cos() * dir[2] + theta.sin() * u[2],
                    ]);
                    let scale = 0.5f64.powi(job.depth as i32);
                    queue.push_back(Pending {
                        base: pos,
                        dir: child_dir,
                        radius: (ratio * r).max(p.r_min).min(r),
                        length: uniform(&mut rng, p.lateral_length) * scale,
                        depth: job.depth + 1,
                        parent: Some(Attachment { branch: index, vertex: vertices.len() - 1, arc }),
                    });
                }
                next_event += spacing.as_ref().expect("events need a rate").sample(&mut rng);
            }
        }
        branches.push(Branch { vertices, radii, parent: job.parent, depth: job.depth });
    }
    Ok(RootSystem { branches })
}
