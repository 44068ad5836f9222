//! Planar N-link arm kinematics, circle obstacles, collision checking,
//! clearance computation, and occupancy-grid rasterization.
//!
//! All operations are pure functions of their inputs. Angles are radians;
//! workspace lengths are in arbitrary "workspace units" (the default arm has
//! two unit links, so full reach is 2.0).

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

/// Clearance reported when a scenario has no obstacles. Large but finite so
/// downstream arithmetic stays total.
pub const NO_OBSTACLE_CLEARANCE: f64 = 1e9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("joint config has {got} angles, arm has {expected} joints")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("path must contain at least one waypoint")]
    EmptyPath,
    #[error("interpolation step must be positive, got {0}")]
    BadStep(f64),
    #[error("occupancy grid must have nonzero size")]
    ZeroSizeGrid,
    #[error("degenerate grid bounds: {0}")]
    BadBounds(String),
    #[error("scenario file: {0}")]
    ScenarioFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// 2-D point / vector in workspace units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Planar arm description: link lengths, per-joint limits, base position.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub link_lengths: Vec<f64>,
    pub joint_min: Vec<f64>,
    pub joint_max: Vec<f64>,
    pub base: Point2,
}

impl ArmSpec {
    /// Default desk arm: two unit links, every joint in [-pi, pi], base at
    /// the origin.
    pub fn default_2link() -> Self {
        use std::f64::consts::PI;
        Self {
            link_lengths: vec![1.0, 1.0],
            joint_min: vec![-PI, -PI],
            joint_max: vec![-PI, -PI].iter().map(|_| PI).collect(),
            base: Point2::new(0.0, 0.0),
        }
    }

    pub fn n_joints(&self) -> usize {
        self.link_lengths.len()
    }

    /// Total reach (sum of link lengths).
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.n_joints();
        if n == 0 {
            return Err(GeometryError::BadBounds("arm needs at least one joint".into()));
        }
        if self.joint_min.len() != n || self.joint_max.len() != n {
            return Err(GeometryError::DimensionMismatch { expected: n, got: self.joint_min.len() });
        }
        for i in 0..n {
            if !(self.link_lengths[i] > 0.0) {
                return Err(GeometryError::BadBounds(format!("link {i} length must be > 0")));
            }
            if !(self.joint_min[i] < self.joint_max[i]) {
                return Err(GeometryError::BadBounds(format!("joint {i} range is empty")));
            }
        }
        Ok(())
    }
}

/// Joint configuration in radians, one angle per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub angles: Vec<f64>,
}

impl JointConfig {
    pub fn new(angles: Vec<f64>) -> Self {
        Self { angles }
    }
}

/// Circular obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleObstacle {
    pub center: Point2,
    pub radius: f64,
}

/// Rectangular workspace region covered by an occupancy grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub min: Point2,
    pub max: Point2,
}

impl GridSpec {
    /// Default desk grid: 16x16 cells over [-2.2, 2.2]^2 (10% margin over
    /// the default arm's reach).
    pub fn default_16() -> Self {
        Self {
            width: 16,
            height: 16,
            min: Point2::new(-2.2, -2.2),
            max: Point2::new(2.2, 2.2),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::ZeroSizeGrid);
        }
        if !(self.min.x < self.max.x && self.min.y < self.max.y) {
            return Err(GeometryError::BadBounds(format!(
                "min ({}, {}) must be strictly below max ({}, {})",
                self.min.x, self.min.y, self.max.x, self.max.y
            )));
        }
        Ok(())
    }
}

/// Binary occupancy grid, row-major, cell values exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub cells: Vec<f64>,
}

impl OccupancyGrid {
    pub fn cell(&self, col: usize, row: usize) -> f64 {
        self.cells[row * self.spec.width + col]
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| **c > 0.5).count()
    }
}

/// Obstacle set plus its rasterized occupancy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: u64,
    pub obstacles: Vec<CircleObstacle>,
    pub grid: OccupancyGrid,
}

impl Scenario {
    /// Build a scenario from obstacles, rasterizing the grid.
    pub fn new(id: u64, obstacles: Vec<CircleObstacle>, spec: GridSpec) -> Result<Self, GeometryError> {
        let grid = rasterize(&obstacles, spec)?;
        Ok(Self { id, obstacles, grid })
    }

    /// Centroid of obstacle centers; the base position when there are none.
    pub fn obstacle_centroid(&self, fallback: Point2) -> Point2 {
        if self.obstacles.is_empty() {
            return fallback;
        }
        let n = self.obstacles.len() as f64;
        let (sx, sy) = self
            .obstacles
            .iter()
            .fold((0.0, 0.0), |(sx, sy), o| (sx + o.center.x, sy + o.center.y));
        Point2::new(sx / n, sy / n)
    }
}

/// Forward kinematics: positions of the base, every joint, and the
/// end-effector (`n_joints + 1` points). Angles accumulate along the chain.
pub fn forward_kinematics(arm: &ArmSpec, q: &JointConfig) -> Result<Vec<Point2>, GeometryError> {
    if q.angles.len() != arm.n_joints() {
        return Err(GeometryError::DimensionMismatch {
            expected: arm.n_joints(),
            got: q.angles.len(),
        });
    }
    let mut points = Vec::with_capacity(arm.n_joints() + 1);
    points.push(arm.base);
    let mut angle = 0.0;
    let mut p = arm.base;
    for (theta, len) in q.angles.iter().zip(&arm.link_lengths) {
        angle += theta;
        p = Point2::new(p.x + len * angle.cos(), p.y + len * angle.sin());
        points.push(p);
    }
    Ok(points)
}

/// End-effector position only.
pub fn end_effector(arm: &ArmSpec, q: &JointConfig) -> Result<Point2, GeometryError> {
    Ok(*forward_kinematics(arm, q)?.last().unwrap())
}

/// Signed clearance between a segment and a circle: distance from the circle
/// center to the segment minus the radius. Negative iff they intersect.
/// A degenerate segment (p0 == p1) reduces to point distance.
pub fn segment_clearance(p0: Point2, p1: Point2, obs: &CircleObstacle) -> f64 {
    point_segment_distance(obs.center, p0, p1) - obs.radius
}

/// Distance from point `p` to segment `[a, b]`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let abx = b.x - a.x;
    let aby = b.y - a.y;
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0);
    p.dist(Point2::new(a.x + t * abx, a.y + t * aby))
}

/// Proper/improper intersection test for two segments, used for
/// self-collision between non-adjacent links.
fn segments_intersect(a0: Point2, a1: Point2, b0: Point2, b1: Point2) -> bool {
    fn orient(p: Point2, q: Point2, r: Point2) -> f64 {
        (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x)
    }
    fn on_segment(p: Point2, q: Point2, r: Point2) -> bool {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    }
    let d1 = orient(b0, b1, a0);
    let d2 = orient(b0, b1, a1);
    let d3 = orient(a0, a1, b0);
    let d4 = orient(a0, a1, b1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b0, b1, a0))
        || (d2 == 0.0 && on_segment(b0, b1, a1))
        || (d3 == 0.0 && on_segment(a0, a1, b0))
        || (d4 == 0.0 && on_segment(a0, a1, b1))
}

/// Result of checking a single configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigCheck {
    /// True iff some link intersects some obstacle.
    pub colliding: bool,
    /// Minimum signed clearance over (link, obstacle) pairs;
    /// [`NO_OBSTACLE_CLEARANCE`] when the scenario has no obstacles.
    pub clearance: f64,
    /// True iff two non-adjacent links intersect. Always false for arms
    /// with fewer than three joints.
    pub self_colliding: bool,
}

/// Check one configuration against a scenario: obstacle collision, minimum
/// clearance, and self-collision between non-adjacent links.
pub fn check_config(
    arm: &ArmSpec,
    scenario: &Scenario,
    q: &JointConfig,
) -> Result<ConfigCheck, GeometryError> {
    let points = forward_kinematics(arm, q)?;
    let mut clearance = NO_OBSTACLE_CLEARANCE;
    for seg in points.windows(2) {
        for obs in &scenario.obstacles {
            let c = segment_clearance(seg[0], seg[1], obs);
            if c < clearance {
                clearance = c;
            }
        }
    }
    let n_links = points.len() - 1;
    let mut self_colliding = false;
    // Adjacent links always share an endpoint, so only pairs at distance >= 2 count.
    'outer: for i in 0..n_links {
        for j in (i + 2)..n_links {
            if segments_intersect(points[i], points[i + 1], points[j], points[j + 1]) {
                self_colliding = true;
                break 'outer;
            }
        }
    }
    Ok(ConfigCheck {
        colliding: clearance < 0.0,
        clearance,
        self_colliding,
    })
}

/// Result of checking a waypoint path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCheck {
    pub colliding: bool,
    /// First and last waypoint index adjacent to any violation; `None` when
    /// the path is free.
    pub bad_range: Option<(usize, usize)>,
}

/// Check every waypoint of a joint-space path, and every linear interpolation
/// between consecutive waypoints at resolution <= `step` radians (measured as
/// the largest per-joint delta). Self-collision counts as a violation.
pub fn check_path(
    arm: &ArmSpec,
    scenario: &Scenario,
    qs: &[JointConfig],
    step: f64,
) -> Result<PathCheck, GeometryError> {
    if qs.is_empty() {
        return Err(GeometryError::EmptyPath);
    }
    if !(step > 0.0) {
        return Err(GeometryError::BadStep(step));
    }
    let bad_config = |q: &JointConfig| -> Result<bool, GeometryError> {
        let c = check_config(arm, scenario, q)?;
        Ok(c.colliding || c.self_colliding)
    };

    let mut first: Option<usize> = None;
    let mut last: Option<usize> = None;
    let mut mark = |i: usize| {
        if first.is_none() {
            first = Some(i);
        }
        last = Some(i);
    };

    for (i, q) in qs.iter().enumerate() {
        if bad_config(q)? {
            mark(i);
        }
    }
    for i in 0..qs.len().saturating_sub(1) {
        let a = &qs[i].angles;
        let b = &qs[i + 1].angles;
        let max_delta = a
            .iter()
            .zip(b)
            .map(|(x, y)| (y - x).abs())
            .fold(0.0_f64, f64::max);
        let substeps = (max_delta / step).ceil() as usize;
        for s in 1..substeps {
            let t = s as f64 / substeps as f64;
            let q = JointConfig::new(
                a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect(),
            );
            if bad_config(&q)? {
                mark(i);
                mark(i + 1);
                break;
            }
        }
    }
    Ok(PathCheck {
        colliding: first.is_some(),
        bad_range: first.map(|f| (f, last.unwrap())),
    })
}

/// Rasterize circles onto a binary occupancy grid. A cell is occupied iff
/// the circle intersects the cell rectangle (conservative), tested by
/// clamping the circle center to the rectangle.
pub fn rasterize(obstacles: &[CircleObstacle], spec: GridSpec) -> Result<OccupancyGrid, GeometryError> {
    spec.validate()?;
    let mut cells = vec![0.0; spec.width * spec.height];
    let cell_w = (spec.max.x - spec.min.x) / spec.width as f64;
    let cell_h = (spec.max.y - spec.min.y) / spec.height as f64;
    for obs in obstacles {
        for row in 0..spec.height {
            let y0 = spec.min.y + row as f64 * cell_h;
            let y1 = y0 + cell_h;
            for col in 0..spec.width {
                let x0 = spec.min.x + col as f64 * cell_w;
                let x1 = x0 + cell_w;
                let cx = obs.center.x.clamp(x0, x1);
                let cy = obs.center.y.clamp(y0, y1);
                let d2 = (obs.center.x - cx).powi(2) + (obs.center.y - cy).powi(2);
                if d2 <= obs.radius * obs.radius {
                    cells[row * spec.width + col] = 1.0;
                }
            }
        }
    }
    Ok(OccupancyGrid { spec, cells })
}

/// Collision checker bound to one (arm, scenario) pair that counts every
/// configuration evaluation. Planners route all queries through this so the
/// benchmark can verify how many checks each method performs.
pub struct CollisionChecker<'a> {
    pub arm: &'a ArmSpec,
    pub scenario: &'a Scenario,
    checks: Cell<u64>,
}

impl<'a> CollisionChecker<'a> {
    pub fn new(arm: &'a ArmSpec, scenario: &'a Scenario) -> Self {
        Self { arm, scenario, checks: Cell::new(0) }
    }

    /// Number of single-configuration checks performed so far.
    pub fn checks(&self) -> u64 {
        self.checks.get()
    }

    pub fn check_config(&self, q: &JointConfig) -> Result<ConfigCheck, GeometryError> {
        self.checks.set(self.checks.get() + 1);
        check_config(self.arm, self.scenario, q)
    }

    /// Free (no obstacle hit, no self-collision)?
    pub fn is_free(&self, q: &JointConfig) -> Result<bool, GeometryError> {
        let c = self.check_config(q)?;
        Ok(!c.colliding && !c.self_colliding)
    }

    /// Validate the straight joint-space segment between two configurations
    /// at the given resolution, endpoints included.
    pub fn edge_free(&self, a: &JointConfig, b: &JointConfig, step: f64) -> Result<bool, GeometryError> {
        let max_delta = a
            .angles
            .iter()
            .zip(&b.angles)
            .map(|(x, y)| (y - x).abs())
            .fold(0.0_f64, f64::max);
        let substeps = (max_delta / step).ceil().max(1.0) as usize;
        for s in 0..=substeps {
            let t = s as f64 / substeps as f64;
            let q = JointConfig::new(
                a.angles
                    .iter()
                    .zip(&b.angles)
                    .map(|(x, y)| x + t * (y - x))
                    .collect(),
            );
            if !self.is_free(&q)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

// --- scenario file format -------------------------------------------------
//
// Structured text, one item per line:
//
//   latentplan-scenario v1
//   id <u64>
//   grid <width> <height> <min_x> <min_y> <max_x> <max_y>
//   circle <x> <y> <radius>     (zero or more)
//
// The grid itself is never stored; loading re-rasterizes it.

const SCENARIO_MAGIC: &str = "latentplan-scenario";
const SCENARIO_VERSION: u32 = 1;

/// Serialize a scenario to the versioned text format.
pub fn scenario_to_string(s: &Scenario) -> String {
    let mut out = String::new();
    writeln!(out, "{SCENARIO_MAGIC} v{SCENARIO_VERSION}").unwrap();
    writeln!(out, "id {}", s.id).unwrap();
    let g = &s.grid.spec;
    writeln!(out, "grid {} {} {} {} {} {}", g.width, g.height, g.min.x, g.min.y, g.max.x, g.max.y).unwrap();
    for o in &s.obstacles {
        writeln!(out, "circle {} {} {}", o.center.x, o.center.y, o.radius).unwrap();
    }
    out
}

/// Parse the text format produced by [`scenario_to_string`].
pub fn scenario_from_str(text: &str) -> Result<Scenario, GeometryError> {
    let bad = |m: &str| GeometryError::ScenarioFormat(m.to_string());
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let mut hp = header.split_whitespace();
    if hp.next() != Some(SCENARIO_MAGIC) {
        return Err(bad("missing magic header"));
    }
    match hp.next() {
        Some(v) if v == format!("v{SCENARIO_VERSION}") => {}
        Some(v) => return Err(bad(&format!("unsupported version {v}"))),
        None => return Err(bad("missing version")),
    }
    let mut id = 0u64;
    let mut spec: Option<GridSpec> = None;
    let mut obstacles = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("id") => {
                id = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad id line"))?;
            }
            Some("grid") => {
                let vals: Vec<f64> = parts.map(|p| p.parse().unwrap_or(f64::NAN)).collect();
                if vals.len() != 6 || vals.iter().any(|v| v.is_nan()) {
                    return Err(bad("bad grid line"));
                }
                spec = Some(GridSpec {
                    width: vals[0] as usize,
                    height: vals[1] as usize,
                    min: Point2::new(vals[2], vals[3]),
                    max: Point2::new(vals[4], vals[5]),
                });
            }
            Some("circle") => {
                let vals: Vec<f64> = parts.map(|p| p.parse().unwrap_or(f64::NAN)).collect();
                if vals.len() != 3 || vals.iter().any(|v| v.is_nan()) {
                    return Err(bad("bad circle line"));
                }
                obstacles.push(CircleObstacle {
                    center: Point2::new(vals[0], vals[1]),
                    radius: vals[2],
                });
            }
            Some(other) => return Err(bad(&format!("unknown line kind {other}"))),
            None => {}
        }
    }
    let spec = spec.ok_or_else(|| bad("missing grid line"))?;
    Scenario::new(id, obstacles, spec)
}

pub fn save_scenario(s: &Scenario, path: &Path) -> Result<(), GeometryError> {
    std::fs::write(path, scenario_to_string(s))?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<Scenario, GeometryError> {
    scenario_from_str(&std::fs::read_to_string(path)?)
}
