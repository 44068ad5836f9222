//! Obstacle-scenario sampling, labeled posture datasets, min-max
//! normalization between radians and [0,1], and dataset persistence.
//!
//! Scenario `i` and its postures are drawn from streams derived from
//! `(seed, i)`, so individual scenarios can be regenerated independently and
//! datasets are bit-reproducible for a given [`SamplerConfig`].
//!
//! # Dataset file layout (version 1, little-endian)
//!
//! ```text
//! magic            8  bytes  "LPDATSET"
//! version          u32
//! split            u8        0 = train, 1 = test
//! prng name        u16 length + utf-8 bytes
//! arm              u32 n, then n f64 link lengths, n f64 joint minima,
//!                  n f64 joint maxima, 2 f64 base coordinates
//! sampler config   u64 seed, u32 n_train, u32 n_test, u32 samples_per,
//!                  u32 count_min, u32 count_max, f64 radius_min/max,
//!                  f64 annulus_min/max
//! grid spec        u32 width, u32 height, 4 f64 bounds
//! scenarios        u32 count, then per scenario: u64 id, u32 n_circles,
//!                  3 f64 per circle (x, y, radius)
//! samples          u64 count, then per sample: u32 scenario index,
//!                  n f64 normalized angles, u8 flags (bit0 colliding,
//!                  bit1 self-colliding), f64 clearance
//! ```
//!
//! Occupancy grids are never stored; loading re-rasterizes them.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    check_config, ArmSpec, CircleObstacle, GeometryError, GridSpec, JointConfig, Point2, Scenario,
};
use crate::rng::{derive_rng, PRNG_NAME};

const DATASET_MAGIC: &[u8; 8] = b"LPDATSET";
const DATASET_VERSION: u32 = 1;
/// Circles are rejected while they come within this distance of the arm base.
const BASE_KEEPOUT: f64 = 0.1;
const MAX_REJECTION_TRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("sampling failed: {0}")]
    SamplingFailure(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("corrupt dataset file: {0}")]
    Corrupt(String),
    #[error("unsupported dataset version {0} (expected {DATASET_VERSION})")]
    Version(u32),
    #[error("dataset label disagrees with geometry at sample {0}")]
    LabelMismatch(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Configuration for scenario and posture sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub seed: u64,
    pub n_scenarios_train: usize,
    pub n_scenarios_test: usize,
    pub samples_per_scenario: usize,
    /// Inclusive range for the number of circles per scenario.
    pub obstacle_count_range: (usize, usize),
    pub radius_range: (f64, f64),
    /// Obstacle centers are drawn area-uniformly from this annulus around
    /// the arm base.
    pub center_annulus: (f64, f64),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenarios_train: 200,
            n_scenarios_test: 50,
            samples_per_scenario: 250,
            obstacle_count_range: (1, 3),
            radius_range: (0.18, 0.40),
            center_annulus: (0.55, 1.60),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::SamplingFailure(m));
        if self.obstacle_count_range.0 > self.obstacle_count_range.1 {
            return bad("empty obstacle count range".into());
        }
        if !(self.radius_range.0 > 0.0 && self.radius_range.0 <= self.radius_range.1) {
            return bad("bad radius range".into());
        }
        if !(self.center_annulus.0 >= 0.0 && self.center_annulus.0 <= self.center_annulus.1) {
            return bad("bad center annulus".into());
        }
        if self.samples_per_scenario == 0 {
            return bad("samples_per_scenario must be >= 1".into());
        }
        Ok(())
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One labeled posture.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// Index into the owning dataset's scenario list.
    pub scenario_index: usize,
    pub q_normalized: Vec<f64>,
    pub colliding: bool,
    pub self_colliding: bool,
    pub clearance: f64,
}

/// Labeled posture dataset for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub arm: ArmSpec,
    pub sampler: SamplerConfig,
    pub grid_spec: GridSpec,
    pub split: Split,
    pub scenarios: Vec<Scenario>,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    /// Fraction of samples that collide (with obstacles or themselves).
    pub fn collision_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let n = self
            .samples
            .iter()
            .filter(|s| s.colliding || s.self_colliding)
            .count();
        n as f64 / self.samples.len() as f64
    }
}

/// Scenario ids for a split. Train ids precede test ids, so the two sets are
/// disjoint by construction.
fn split_ids(cfg: &SamplerConfig, split: Split) -> std::ops::Range<u64> {
    let n_train = cfg.n_scenarios_train as u64;
    match split {
        Split::Train => 0..n_train,
        Split::Test => n_train..n_train + cfg.n_scenarios_test as u64,
    }
}

/// Sample the obstacle set for one scenario id.
pub fn sample_scenario(
    cfg: &SamplerConfig,
    grid: GridSpec,
    base: Point2,
    id: u64,
) -> Result<Scenario, DatasetError> {
    let mut rng = derive_rng(cfg.seed, "scenario-obstacles", id);
    let (lo, hi) = cfg.obstacle_count_range;
    let count = rng.gen_range(lo..=hi);
    let mut obstacles = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_REJECTION_TRIES {
            let (r0, r1) = cfg.center_annulus;
            // Area-uniform radius within the annulus.
            let rr = (rng.gen_range(r0 * r0..=r1 * r1)).sqrt();
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let center = Point2::new(base.x + rr * angle.cos(), base.y + rr * angle.sin());
            let radius = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
            if center.dist(base) - radius < BASE_KEEPOUT {
                continue;
            }
            obstacles.push(CircleObstacle { center, radius });
            placed = true;
            break;
        }
        if !placed {
            return Err(DatasetError::SamplingFailure(format!(
                "could not place an obstacle outside the base keepout for scenario {id}"
            )));
        }
    }
    Ok(Scenario::new(id, obstacles, grid)?)
}

/// Sample all scenarios of a split.
pub fn sample_scenarios(
    cfg: &SamplerConfig,
    grid: GridSpec,
    base: Point2,
    split: Split,
) -> Result<Vec<Scenario>, DatasetError> {
    cfg.validate()?;
    split_ids(cfg, split)
        .map(|id| sample_scenario(cfg, grid, base, id))
        .collect()
}

/// Draw `k` uniform postures in the arm's joint ranges and label them
/// against the scenario.
pub fn sample_postures(
    arm: &ArmSpec,
    scenario: &Scenario,
    scenario_index: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LabeledSample>, DatasetError> {
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let angles: Vec<f64> = (0..arm.n_joints())
            .map(|j| rng.gen_range(arm.joint_min[j]..=arm.joint_max[j]))
            .collect();
        let q = JointConfig::new(angles);
        let check = check_config(arm, scenario, &q)?;
        out.push(LabeledSample {
            scenario_index,
            q_normalized: normalize(arm, &q)?,
            colliding: check.colliding,
            self_colliding: check.self_colliding,
            clearance: check.clearance,
        });
    }
    Ok(out)
}

/// Min-max scale each joint angle into [0,1].
pub fn normalize(arm: &ArmSpec, q: &JointConfig) -> Result<Vec<f64>, DatasetError> {
    if q.angles.len() != arm.n_joints() {
        return Err(GeometryError::DimensionMismatch {
            expected: arm.n_joints(),
            got: q.angles.len(),
        }
        .into());
    }
    let mut out = Vec::with_capacity(q.angles.len());
    for (j, &theta) in q.angles.iter().enumerate() {
        let (lo, hi) = (arm.joint_min[j], arm.joint_max[j]);
        if theta < lo || theta > hi {
            return Err(DatasetError::Range(format!(
                "joint {j}: angle {theta} outside [{lo}, {hi}]"
            )));
        }
        out.push((theta - lo) / (hi - lo));
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(arm: &ArmSpec, q_norm: &[f64]) -> Result<JointConfig, DatasetError> {
    if q_norm.len() != arm.n_joints() {
        return Err(GeometryError::DimensionMismatch {
            expected: arm.n_joints(),
            got: q_norm.len(),
        }
        .into());
    }
    let mut angles = Vec::with_capacity(q_norm.len());
    for (j, &v) in q_norm.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(DatasetError::Range(format!(
                "joint {j}: normalized value {v} outside [0, 1]"
            )));
        }
        angles.push(arm.joint_min[j] + v * (arm.joint_max[j] - arm.joint_min[j]));
    }
    Ok(JointConfig::new(angles))
}

/// Generate the full dataset for one split: scenarios plus labeled postures.
pub fn build_dataset(
    arm: &ArmSpec,
    cfg: &SamplerConfig,
    grid: GridSpec,
    split: Split,
) -> Result<Dataset, DatasetError> {
    arm.validate()?;
    let scenarios = sample_scenarios(cfg, grid, arm.base, split)?;
    let mut samples = Vec::with_capacity(scenarios.len() * cfg.samples_per_scenario);
    for (index, scenario) in scenarios.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, "scenario-postures", scenario.id);
        samples.extend(sample_postures(
            arm,
            scenario,
            index,
            cfg.samples_per_scenario,
            &mut rng,
        )?);
    }
    Ok(Dataset {
        arm: arm.clone(),
        sampler: cfg.clone(),
        grid_spec: grid,
        split,
        scenarios,
        samples,
    })
}

// --- binary serialization ---------------------------------------------------

pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Self {
        Self { buf: Vec::new() }
    }
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn str16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Corrupt(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn str16(&mut self) -> Result<String, DatasetError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DatasetError::Corrupt("bad utf-8".into()))
    }
    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn write_arm(w: &mut Writer, arm: &ArmSpec) {
    w.u32(arm.n_joints() as u32);
    for v in &arm.link_lengths {
        w.f64(*v);
    }
    for v in &arm.joint_min {
        w.f64(*v);
    }
    for v in &arm.joint_max {
        w.f64(*v);
    }
    w.f64(arm.base.x);
    w.f64(arm.base.y);
}

pub(crate) fn read_arm(r: &mut Reader) -> Result<ArmSpec, DatasetError> {
    let n = r.u32()? as usize;
    if n == 0 || n > 64 {
        return Err(DatasetError::Corrupt(format!("implausible joint count {n}")));
    }
    let mut link_lengths = Vec::with_capacity(n);
    for _ in 0..n {
        link_lengths.push(r.f64()?);
    }
    let mut joint_min = Vec::with_capacity(n);
    for _ in 0..n {
        joint_min.push(r.f64()?);
    }
    let mut joint_max = Vec::with_capacity(n);
    for _ in 0..n {
        joint_max.push(r.f64()?);
    }
    let base = Point2::new(r.f64()?, r.f64()?);
    Ok(ArmSpec { link_lengths, joint_min, joint_max, base })
}

/// Serialize a dataset to the versioned binary format.
pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u8(match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    w.str16(PRNG_NAME);
    write_arm(&mut w, &ds.arm);
    let c = &ds.sampler;
    w.u64(c.seed);
    w.u32(c.n_scenarios_train as u32);
    w.u32(c.n_scenarios_test as u32);
    w.u32(c.samples_per_scenario as u32);
    w.u32(c.obstacle_count_range.0 as u32);
    w.u32(c.obstacle_count_range.1 as u32);
    w.f64(c.radius_range.0);
    w.f64(c.radius_range.1);
    w.f64(c.center_annulus.0);
    w.f64(c.center_annulus.1);
    let g = ds.grid_spec;
    w.u32(g.width as u32);
    w.u32(g.height as u32);
    w.f64(g.min.x);
    w.f64(g.min.y);
    w.f64(g.max.x);
    w.f64(g.max.y);
    w.u32(ds.scenarios.len() as u32);
    for s in &ds.scenarios {
        w.u64(s.id);
        w.u32(s.obstacles.len() as u32);
        for o in &s.obstacles {
            w.f64(o.center.x);
            w.f64(o.center.y);
            w.f64(o.radius);
        }
    }
    w.u64(ds.samples.len() as u64);
    for s in &ds.samples {
        w.u32(s.scenario_index as u32);
        for v in &s.q_normalized {
            w.f64(*v);
        }
        let flags = (s.colliding as u8) | ((s.self_colliding as u8) << 1);
        w.u8(flags);
        w.f64(s.clearance);
    }
    w.buf
}

/// Parse the binary format produced by [`dataset_to_bytes`]. Re-rasterizes
/// grids and spot-checks 1% of the labels against fresh geometry.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8)?;
    if magic != DATASET_MAGIC {
        return Err(DatasetError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(DatasetError::Version(version));
    }
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Test,
        v => return Err(DatasetError::Corrupt(format!("bad split tag {v}"))),
    };
    let prng = r.str16()?;
    if prng != PRNG_NAME {
        return Err(DatasetError::Corrupt(format!("unknown prng '{prng}'")));
    }
    let arm = read_arm(&mut r)?;
    let n = arm.n_joints();
    let sampler = SamplerConfig {
        seed: r.u64()?,
        n_scenarios_train: r.u32()? as usize,
        n_scenarios_test: r.u32()? as usize,
        samples_per_scenario: r.u32()? as usize,
        obstacle_count_range: (r.u32()? as usize, r.u32()? as usize),
        radius_range: (r.f64()?, r.f64()?),
        center_annulus: (r.f64()?, r.f64()?),
    };
    let grid_spec = GridSpec {
        width: r.u32()? as usize,
        height: r.u32()? as usize,
        min: Point2::new(r.f64()?, r.f64()?),
        max: Point2::new(r.f64()?, r.f64()?),
    };
    let n_scenarios = r.u32()? as usize;
    let mut scenarios = Vec::with_capacity(n_scenarios);
    for _ in 0..n_scenarios {
        let id = r.u64()?;
        let n_circles = r.u32()? as usize;
        let mut obstacles = Vec::with_capacity(n_circles);
        for _ in 0..n_circles {
            obstacles.push(CircleObstacle {
                center: Point2::new(r.f64()?, r.f64()?),
                radius: r.f64()?,
            });
        }
        scenarios.push(Scenario::new(id, obstacles, grid_spec)?);
    }
    let n_samples = r.u64()? as usize;
    let mut samples = Vec::with_capacity(n_samples.min(1 << 24));
    for _ in 0..n_samples {
        let scenario_index = r.u32()? as usize;
        if scenario_index >= scenarios.len() {
            return Err(DatasetError::Corrupt(format!(
                "sample points at scenario {scenario_index} of {}",
                scenarios.len()
            )));
        }
        let mut q_normalized = Vec::with_capacity(n);
        for _ in 0..n {
            q_normalized.push(r.f64()?);
        }
        let flags = r.u8()?;
        samples.push(LabeledSample {
            scenario_index,
            q_normalized,
            colliding: flags & 1 != 0,
            self_colliding: flags & 2 != 0,
            clearance: r.f64()?,
        });
    }
    if !r.done() {
        return Err(DatasetError::Corrupt("trailing bytes".into()));
    }
    let ds = Dataset { arm, sampler, grid_spec, split, scenarios, samples };
    spot_check_labels(&ds)?;
    Ok(ds)
}

/// Re-evaluate every 100th label with fresh geometry.
fn spot_check_labels(ds: &Dataset) -> Result<(), DatasetError> {
    for (i, s) in ds.samples.iter().enumerate().step_by(100) {
        let q = denormalize(&ds.arm, &s.q_normalized)?;
        let check = check_config(&ds.arm, &ds.scenarios[s.scenario_index], &q)?;
        if check.colliding != s.colliding
            || check.self_colliding != s.self_colliding
            || (check.clearance - s.clearance).abs() > 1e-9
        {
            return Err(DatasetError::LabelMismatch(i));
        }
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, dataset_to_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    dataset_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::end_effector;
    use std::f64::consts::PI;

    fn small_cfg() -> SamplerConfig {
        SamplerConfig {
            seed: 42,
            n_scenarios_train: 8,
            n_scenarios_test: 4,
            samples_per_scenario: 40,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn scenarios_deterministic_per_seed() {
        let cfg = SamplerConfig {
            obstacle_count_range: (1, 1),
            ..small_cfg()
        };
        let g = GridSpec::default_16();
        let a = sample_scenarios(&cfg, g, Point2::new(0.0, 0.0), Split::Train).unwrap();
        let b = sample_scenarios(&cfg, g, Point2::new(0.0, 0.0), Split::Train).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.obstacles.len() == 1));
    }

    #[test]
    fn obstacle_count_distribution_uniform() {
        let cfg = SamplerConfig {
            n_scenarios_train: 1000,
            obstacle_count_range: (1, 3),
            ..small_cfg()
        };
        let scenarios =
            sample_scenarios(&cfg, GridSpec::default_16(), Point2::new(0.0, 0.0), Split::Train).unwrap();
        let mut counts = [0usize; 3];
        for s in &scenarios {
            counts[s.obstacles.len() - 1] += 1;
        }
        for c in counts {
            let freq = c as f64 / 1000.0;
            assert!(
                (freq - 1.0 / 3.0).abs() < 0.05,
                "count frequency {freq} deviates from uniform"
            );
        }
    }

    #[test]
    fn no_circle_contains_base() {
        let cfg = SamplerConfig {
            n_scenarios_train: 200,
            ..small_cfg()
        };
        let base = Point2::new(0.0, 0.0);
        let scenarios = sample_scenarios(&cfg, GridSpec::default_16(), base, Split::Train).unwrap();
        for s in &scenarios {
            for o in &s.obstacles {
                assert!(o.center.dist(base) - o.radius >= BASE_KEEPOUT);
            }
        }
    }

    #[test]
    fn impossible_rejection_errors() {
        let cfg = SamplerConfig {
            center_annulus: (0.0, 0.01),
            radius_range: (0.5, 0.5),
            ..small_cfg()
        };
        let err = sample_scenarios(&cfg, GridSpec::default_16(), Point2::new(0.0, 0.0), Split::Train);
        assert!(matches!(err, Err(DatasetError::SamplingFailure(_))));
    }

    #[test]
    fn normalize_midpoint_and_bounds() {
        let arm = ArmSpec::default_2link();
        let mid = normalize(&arm, &JointConfig::new(vec![0.0, 0.0])).unwrap();
        assert!((mid[0] - 0.5).abs() < 1e-15 && (mid[1] - 0.5).abs() < 1e-15);
        let lo = normalize(&arm, &JointConfig::new(vec![-PI, -PI])).unwrap();
        assert_eq!(lo, vec![0.0, 0.0]);
        let hi = normalize(&arm, &JointConfig::new(vec![PI, PI])).unwrap();
        assert_eq!(hi, vec![1.0, 1.0]);
        assert!(normalize(&arm, &JointConfig::new(vec![4.0, 0.0])).is_err());
    }

    #[test]
    fn normalize_denormalize_inverse() {
        let arm = ArmSpec::default_2link();
        let mut rng = derive_rng(3, "norm-inverse", 0);
        for _ in 0..200 {
            let q = JointConfig::new(vec![rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)]);
            let back = denormalize(&arm, &normalize(&arm, &q).unwrap()).unwrap();
            for (a, b) in q.angles.iter().zip(&back.angles) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_scenario_samples_all_free() {
        let arm = ArmSpec::default_2link();
        let scenario = Scenario::new(7, vec![], GridSpec::default_16()).unwrap();
        let mut rng = derive_rng(5, "postures", 7);
        let samples = sample_postures(&arm, &scenario, 0, 100, &mut rng).unwrap();
        assert!(samples.iter().all(|s| !s.colliding && !s.self_colliding));
    }

    #[test]
    fn posture_sampling_deterministic() {
        let arm = ArmSpec::default_2link();
        let scenario = sample_scenario(&small_cfg(), GridSpec::default_16(), arm.base, 3).unwrap();
        let mut r1 = derive_rng(5, "postures", 3);
        let mut r2 = derive_rng(5, "postures", 3);
        let a = sample_postures(&arm, &scenario, 0, 50, &mut r1).unwrap();
        let b = sample_postures(&arm, &scenario, 0, 50, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collision_fraction_matches_large_sample_oracle() {
        let arm = ArmSpec::default_2link();
        let scenario = sample_scenario(&small_cfg(), GridSpec::default_16(), arm.base, 1).unwrap();
        let mut rng = derive_rng(5, "postures-oracle", 1);
        let small = sample_postures(&arm, &scenario, 0, 2000, &mut rng).unwrap();
        let small_frac =
            small.iter().filter(|s| s.colliding).count() as f64 / small.len() as f64;
        let mut oracle_rng = derive_rng(99, "postures-oracle-large", 1);
        let large = sample_postures(&arm, &scenario, 0, 100_000, &mut oracle_rng).unwrap();
        let large_frac =
            large.iter().filter(|s| s.colliding).count() as f64 / large.len() as f64;
        assert!((small_frac - large_frac).abs() < 0.05);
    }

    #[test]
    fn default_collision_fraction_in_target_band() {
        let arm = ArmSpec::default_2link();
        let cfg = SamplerConfig {
            n_scenarios_train: 40,
            samples_per_scenario: 100,
            ..SamplerConfig::default()
        };
        let ds = build_dataset(&arm, &cfg, GridSpec::default_16(), Split::Train).unwrap();
        let frac = ds.collision_fraction();
        assert!(
            (0.2..=0.6).contains(&frac),
            "default collision fraction {frac} outside [0.2, 0.6]"
        );
    }

    #[test]
    fn train_test_scenario_ids_disjoint() {
        let cfg = small_cfg();
        let arm = ArmSpec::default_2link();
        let train = build_dataset(&arm, &cfg, GridSpec::default_16(), Split::Train).unwrap();
        let test = build_dataset(&arm, &cfg, GridSpec::default_16(), Split::Test).unwrap();
        let train_ids: std::collections::HashSet<u64> =
            train.scenarios.iter().map(|s| s.id).collect();
        assert!(test.scenarios.iter().all(|s| !train_ids.contains(&s.id)));
    }

    #[test]
    fn dataset_round_trip_bit_exact() {
        let arm = ArmSpec::default_2link();
        let ds = build_dataset(&arm, &small_cfg(), GridSpec::default_16(), Split::Test).unwrap();
        let bytes = dataset_to_bytes(&ds);
        let loaded = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(ds, loaded);
        assert_eq!(bytes, dataset_to_bytes(&loaded));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let arm = ArmSpec::default_2link();
        let ds = build_dataset(&arm, &small_cfg(), GridSpec::default_16(), Split::Train).unwrap();
        let bytes = dataset_to_bytes(&ds);
        let err = dataset_from_bytes(&bytes[..bytes.len() - 7]);
        assert!(matches!(err, Err(DatasetError::Corrupt(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let arm = ArmSpec::default_2link();
        let ds = build_dataset(&arm, &small_cfg(), GridSpec::default_16(), Split::Train).unwrap();
        let mut bytes = dataset_to_bytes(&ds);
        bytes[8] = 99;
        assert!(matches!(dataset_from_bytes(&bytes), Err(DatasetError::Version(99))));
    }

    #[test]
    fn tampered_label_detected_on_load() {
        let arm = ArmSpec::default_2link();
        let mut ds = build_dataset(&arm, &small_cfg(), GridSpec::default_16(), Split::Train).unwrap();
        // Flip the collision label of a spot-checked sample (index 0 is
        // always checked).
        ds.samples[0].colliding = !ds.samples[0].colliding;
        let bytes = dataset_to_bytes(&ds);
        assert!(matches!(
            dataset_from_bytes(&bytes),
            Err(DatasetError::LabelMismatch(0))
        ));
    }

    #[test]
    fn stored_clearance_supports_reachability() {
        // Sanity: the labeled data really covers the reachable workspace.
        let arm = ArmSpec::default_2link();
        let scenario = Scenario::new(0, vec![], GridSpec::default_16()).unwrap();
        let mut rng = derive_rng(1, "reach", 0);
        let samples = sample_postures(&arm, &scenario, 0, 500, &mut rng).unwrap();
        let max_r = samples
            .iter()
            .map(|s| {
                let q = denormalize(&arm, &s.q_normalized).unwrap();
                let ee = end_effector(&arm, &q).unwrap();
                ee.dist(arm.base)
            })
            .fold(0.0_f64, f64::max);
        assert!(max_r > 1.8, "uniform posture sampling should reach near full extension");
    }
}
