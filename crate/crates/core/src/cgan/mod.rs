//! Generator / discriminator / encoder models conditioned on an occupancy
//! grid, the four training losses, and the clearance-dependent loss-weight
//! schedule.
//!
//! All three networks share one shape: a stack of fully connected hidden
//! layers (leaky ReLU, spectral norm on all but the first), a linear output
//! layer, and a per-network condition extractor. The extractor flattens the
//! grid through one trunk layer and three head layers; each head's output
//! multiplies one mid-stack hidden layer element-wise, so changing the
//! obstacle grid re-shapes the learned map.
//!
//! The latent dimension always equals the joint dimension, and the
//! generator and encoder have the same layer shapes with independent
//! values.

mod serial;
mod train;

pub use serial::{bundle_from_bytes, bundle_to_bytes, load_bundle, save_bundle};
pub use train::{
    load_checkpoint, save_checkpoint, train, Checkpoint, LogRecord, TrainError, TrainOutcome,
    Trainer, TrainingLog,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{GridSpec, Scenario};
use crate::net::{
    forward, Activation, LayerSpec, NetError, NetGrads, NetworkParams, SnSnapshot, Tape,
};
use crate::rng::derive_rng;
use crate::scenario::LabeledSample;

/// Probability clamp for the log terms of the adversarial losses.
pub const PROB_EPS: f64 = 1e-7;

/// Network-shape configuration for all three models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Width of every hidden layer.
    pub hidden_width: usize,
    /// Number of hidden layers.
    pub hidden_layers: usize,
    /// Width of the extractor trunk output.
    pub extractor_width: usize,
    /// Negative-side slope of the leaky ReLU.
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden_width: 64, hidden_layers: 6, extractor_width: 64, leaky_slope: 0.2 }
    }
}

impl NetConfig {
    /// Hidden-layer indices whose outputs are gated by the condition
    /// extractor: the third through fifth hidden layers.
    pub fn gate_points(&self) -> Vec<usize> {
        (2..5).filter(|&i| i < self.hidden_layers).collect()
    }

    /// Layer specs for one model: `in_dim` to `out_dim` through the hidden
    /// stack. Spectral norm everywhere except the first hidden and the
    /// output layer.
    fn mlp_specs(&self, in_dim: usize, out_dim: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.hidden_layers + 1);
        for l in 0..self.hidden_layers {
            specs.push(LayerSpec {
                in_dim: if l == 0 { in_dim } else { self.hidden_width },
                out_dim: self.hidden_width,
                activation: Activation::LeakyRelu(self.leaky_slope),
                spectral_norm: l > 0,
            });
        }
        specs.push(LayerSpec {
            in_dim: self.hidden_width,
            out_dim,
            activation: Activation::Linear,
            spectral_norm: false,
        });
        specs
    }
}

/// Condition extractor: grid -> trunk features -> one gate vector per gate
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub trunk: NetworkParams,
    pub heads: Vec<NetworkParams>,
}

/// Recorded extractor forward, consumed by [`Extractor::backward`].
pub struct ExtractorTape {
    trunk_tape: Tape,
    head_tapes: Vec<Tape>,
}

/// Gradient buffers for an extractor.
#[derive(Debug, Clone)]
pub struct ExtractorGrads {
    pub trunk: NetGrads,
    pub heads: Vec<NetGrads>,
}

impl Extractor {
    fn init(cfg: &NetConfig, grid_len: usize, n_gates: usize, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        let act = Activation::LeakyRelu(cfg.leaky_slope);
        let trunk_spec = [LayerSpec {
            in_dim: grid_len,
            out_dim: cfg.extractor_width,
            activation: act,
            spectral_norm: false,
        }];
        let trunk = NetworkParams::init(&trunk_spec, vec![], rng)?;
        let head_spec = [LayerSpec {
            in_dim: cfg.extractor_width,
            out_dim: cfg.hidden_width,
            activation: act,
            spectral_norm: false,
        }];
        let heads = (0..n_gates)
            .map(|_| NetworkParams::init(&head_spec, vec![], rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { trunk, heads })
    }

    /// Gate vectors for a flattened grid, with tapes for backward.
    pub fn forward(&self, grid: &[f64]) -> Result<(Vec<Vec<f64>>, ExtractorTape), NetError> {
        let snap = self.trunk.sn_snapshot();
        let (feat, trunk_tape) = forward(&self.trunk, &snap, grid, None)?;
        let mut gates = Vec::with_capacity(self.heads.len());
        let mut head_tapes = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let hsnap = head.sn_snapshot();
            let (gate, tape) = forward(head, &hsnap, &feat, None)?;
            gates.push(gate);
            head_tapes.push(tape);
        }
        Ok((gates, ExtractorTape { trunk_tape, head_tapes }))
    }

    /// Gate vectors only.
    pub fn forward_eval(&self, grid: &[f64]) -> Result<Vec<Vec<f64>>, NetError> {
        Ok(self.forward(grid)?.0)
    }

    /// Accumulate parameter gradients for summed gate gradients.
    pub fn backward(
        &self,
        tape: ExtractorTape,
        d_gates: &[Vec<f64>],
        grads: &mut ExtractorGrads,
    ) -> Result<(), NetError> {
        assert_eq!(d_gates.len(), self.heads.len());
        let trunk_snap = self.trunk.sn_snapshot();
        let mut d_feat = vec![0.0; self.trunk.output_dim()];
        for ((head, tape), (dg, hg)) in self
            .heads
            .iter()
            .zip(tape.head_tapes)
            .zip(d_gates.iter().zip(grads.heads.iter_mut()))
        {
            let hsnap = head.sn_snapshot();
            let ig = crate::net::backward(head, &hsnap, tape, dg, hg)?;
            for (a, b) in d_feat.iter_mut().zip(&ig.d_input) {
                *a += b;
            }
        }
        crate::net::backward(&self.trunk, &trunk_snap, tape.trunk_tape, &d_feat, &mut grads.trunk)?;
        Ok(())
    }

    pub fn grads(&self) -> ExtractorGrads {
        ExtractorGrads {
            trunk: NetGrads::zeros(&self.trunk),
            heads: self.heads.iter().map(NetGrads::zeros).collect(),
        }
    }
}

/// One conditioned network: the core stack plus its own extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedNet {
    pub mlp: NetworkParams,
    pub extractor: Extractor,
}

impl ConditionedNet {
    fn init(
        cfg: &NetConfig,
        in_dim: usize,
        out_dim: usize,
        grid_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetError> {
        let gate_points = cfg.gate_points();
        let mlp = NetworkParams::init(&cfg.mlp_specs(in_dim, out_dim), gate_points.clone(), rng)?;
        let extractor = Extractor::init(cfg, grid_len, gate_points.len(), rng)?;
        Ok(Self { mlp, extractor })
    }

    /// Evaluation-only forward through the core stack.
    pub fn eval(&self, snap: &SnSnapshot, input: &[f64], gates: &[Vec<f64>]) -> Result<Vec<f64>, NetError> {
        Ok(forward(&self.mlp, snap, input, Some(gates))?.0)
    }
}

/// Generator, discriminator, and encoder with their extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    /// Latent dimension; equals the joint dimension.
    pub n: usize,
    pub grid_spec: GridSpec,
    pub net_cfg: NetConfig,
    pub g: ConditionedNet,
    pub d: ConditionedNet,
    pub e: ConditionedNet,
}

impl ModelBundle {
    /// Fresh random bundle. The generator and encoder get identical shapes
    /// with independent values; every network gets its own extractor.
    pub fn init(n: usize, grid_spec: GridSpec, net_cfg: NetConfig, seed: u64) -> Result<Self, NetError> {
        let grid_len = grid_spec.width * grid_spec.height;
        let g = ConditionedNet::init(&net_cfg, n, n, grid_len, &mut derive_rng(seed, "init-g", 0))?;
        let d = ConditionedNet::init(&net_cfg, n, 1, grid_len, &mut derive_rng(seed, "init-d", 0))?;
        let e = ConditionedNet::init(&net_cfg, n, n, grid_len, &mut derive_rng(seed, "init-e", 0))?;
        Ok(Self { n, grid_spec, net_cfg, g, d, e })
    }

    /// Gate vectors of all three extractors for one scenario.
    pub fn gates_for(&self, scenario: &Scenario) -> Result<BundleGates, NetError> {
        let grid = &scenario.grid.cells;
        Ok(BundleGates {
            g: self.g.extractor.forward_eval(grid)?,
            d: self.d.extractor.forward_eval(grid)?,
            e: self.e.extractor.forward_eval(grid)?,
        })
    }
}

/// Evaluated extractor outputs per network for one condition.
pub struct BundleGates {
    pub g: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
}

/// Loss weights and the clearance schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub seed: u64,
    pub steps: u64,
    /// Scenario blocks per batch.
    pub batch_scenarios: usize,
    /// Free / colliding / latent draws per scenario block.
    pub batch_free_per_scenario: usize,
    pub batch_col_per_scenario: usize,
    pub batch_z_per_scenario: usize,
    pub lr_d: f64,
    pub lr_ge: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_gan: f64,
    pub lambda_rec: f64,
    pub lambda_map: f64,
    pub lambda_col: f64,
    /// Replaces `lambda_col` for samples that collide with an obstacle.
    pub lambda_col_boost: f64,
    /// Free samples closer to an obstacle than this contribute nothing to
    /// the reconstruction and identity-map terms.
    pub clearance_threshold: f64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub net: NetConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 9000,
            batch_scenarios: 16,
            batch_free_per_scenario: 6,
            batch_col_per_scenario: 3,
            batch_z_per_scenario: 6,
            lr_d: 2e-4,
            lr_ge: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lambda_gan: 1.0,
            lambda_rec: 100.0,
            lambda_map: 10.0,
            lambda_col: 100.0,
            lambda_col_boost: 1000.0,
            clearance_threshold: 0.2,
            log_interval: 250,
            checkpoint_interval: 2500,
            net: NetConfig::default(),
        }
    }
}

/// Per-sample loss weights after the clearance schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSet {
    pub gan: f64,
    pub rec: f64,
    pub map: f64,
    pub col: f64,
}

/// Apply the clearance schedule to one sample: inside the clearance band the
/// reconstruction and identity-map weights drop to zero, and obstacle
/// collisions (not self-collisions) boost the collision weight.
pub fn effective_lambdas(sample: &LabeledSample, cfg: &TrainingConfig) -> LambdaSet {
    let in_band = !sample.colliding && sample.clearance < cfg.clearance_threshold;
    LambdaSet {
        gan: cfg.lambda_gan,
        rec: if in_band { 0.0 } else { cfg.lambda_rec },
        map: if in_band { 0.0 } else { cfg.lambda_map },
        col: if sample.colliding { cfg.lambda_col_boost } else { cfg.lambda_col },
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn clamped(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Adversarial loss from discriminator logits:
/// `mean log D(real) + mean log(1 - D(fake))`.
pub fn gan_loss_from_logits(real: &[f64], fake: &[f64]) -> f64 {
    assert!(!real.is_empty() && !fake.is_empty(), "gan loss needs both batches");
    let real_term: f64 = real.iter().map(|&l| clamped(sigmoid(l)).ln()).sum::<f64>() / real.len() as f64;
    let fake_term: f64 =
        fake.iter().map(|&l| (1.0 - clamped(sigmoid(l))).ln()).sum::<f64>() / fake.len() as f64;
    real_term + fake_term
}

/// Collision-rejection loss from logits on colliding postures:
/// `mean log(1 - D(colliding))`.
pub fn col_loss_from_logits(col: &[f64]) -> f64 {
    assert!(!col.is_empty(), "collision loss needs a batch");
    col.iter().map(|&l| (1.0 - clamped(sigmoid(l))).ln()).sum::<f64>() / col.len() as f64
}

/// Cycle-reconstruction loss under one condition:
/// `mean |G(E(theta)) - theta|^2 + mean |E(G(z)) - z|^2`.
pub fn reconstruction_loss(
    bundle: &ModelBundle,
    gates: &BundleGates,
    thetas: &[Vec<f64>],
    zs: &[Vec<f64>],
) -> Result<f64, NetError> {
    assert!(!thetas.is_empty() && !zs.is_empty(), "reconstruction loss needs both batches");
    let g_snap = bundle.g.mlp.sn_snapshot();
    let e_snap = bundle.e.mlp.sn_snapshot();
    let mut theta_term = 0.0;
    for theta in thetas {
        let z = bundle.e.eval(&e_snap, theta, &gates.e)?;
        let rec = bundle.g.eval(&g_snap, &z, &gates.g)?;
        theta_term += sq_dist(&rec, theta);
    }
    let mut z_term = 0.0;
    for z in zs {
        let fake = bundle.g.eval(&g_snap, z, &gates.g)?;
        let rec = bundle.e.eval(&e_snap, &fake, &gates.e)?;
        z_term += sq_dist(&rec, z);
    }
    Ok(theta_term / thetas.len() as f64 + z_term / zs.len() as f64)
}

/// Identity-map loss under one condition: `mean |G(z = theta) - theta|^2`
/// over non-colliding postures.
pub fn map_loss(bundle: &ModelBundle, gates: &BundleGates, thetas: &[Vec<f64>]) -> Result<f64, NetError> {
    assert!(!thetas.is_empty(), "identity-map loss needs a batch");
    let g_snap = bundle.g.mlp.sn_snapshot();
    let mut total = 0.0;
    for theta in thetas {
        let out = bundle.g.eval(&g_snap, theta, &gates.g)?;
        total += sq_dist(&out, theta);
    }
    Ok(total / thetas.len() as f64)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The full objective `sum_i lambda_i L_i` evaluated in one pass over fixed
/// batches, together with the individual terms. Used to verify the loss
/// decomposition identity.
pub struct ObjectiveBreakdown {
    pub total: f64,
    pub gan: f64,
    pub rec: f64,
    pub map: f64,
    pub col: f64,
}

pub fn total_objective(
    bundle: &ModelBundle,
    gates: &BundleGates,
    free_thetas: &[Vec<f64>],
    col_thetas: &[Vec<f64>],
    zs: &[Vec<f64>],
    cfg: &TrainingConfig,
) -> Result<ObjectiveBreakdown, NetError> {
    let d_snap = bundle.d.mlp.sn_snapshot();
    let g_snap = bundle.g.mlp.sn_snapshot();
    let e_snap = bundle.e.mlp.sn_snapshot();

    let mut real_logits = Vec::with_capacity(free_thetas.len());
    for theta in free_thetas {
        real_logits.push(bundle.d.eval(&d_snap, theta, &gates.d)?[0]);
    }
    let mut fake_logits = Vec::with_capacity(zs.len());
    let mut z_rec_term = 0.0;
    for z in zs {
        let fake = bundle.g.eval(&g_snap, z, &gates.g)?;
        fake_logits.push(bundle.d.eval(&d_snap, &fake, &gates.d)?[0]);
        let rec = bundle.e.eval(&e_snap, &fake, &gates.e)?;
        z_rec_term += sq_dist(&rec, z);
    }
    let mut theta_rec_term = 0.0;
    let mut map_term = 0.0;
    for theta in free_thetas {
        let z = bundle.e.eval(&e_snap, theta, &gates.e)?;
        let rec = bundle.g.eval(&g_snap, &z, &gates.g)?;
        theta_rec_term += sq_dist(&rec, theta);
        let mapped = bundle.g.eval(&g_snap, theta, &gates.g)?;
        map_term += sq_dist(&mapped, theta);
    }
    let mut col_logits = Vec::with_capacity(col_thetas.len());
    for theta in col_thetas {
        col_logits.push(bundle.d.eval(&d_snap, theta, &gates.d)?[0]);
    }

    let gan = gan_loss_from_logits(&real_logits, &fake_logits);
    let rec = theta_rec_term / free_thetas.len() as f64 + z_rec_term / zs.len() as f64;
    let map = map_term / free_thetas.len() as f64;
    let col = col_loss_from_logits(&col_logits);
    let total =
        cfg.lambda_gan * gan + cfg.lambda_rec * rec + cfg.lambda_map * map + cfg.lambda_col * col;
    Ok(ObjectiveBreakdown { total, gan, rec, map, col })
}

/// Per-class discriminator accuracy: a posture counts as predicted "free"
/// when `D >= 0.5`. Classes with no samples report `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminationReport {
    pub acc_free: Option<f64>,
    pub acc_col: Option<f64>,
}

pub fn evaluate_discrimination(
    bundle: &ModelBundle,
    dataset: &crate::scenario::Dataset,
) -> Result<DiscriminationReport, NetError> {
    let d_snap = bundle.d.mlp.sn_snapshot();
    let mut free_total = 0usize;
    let mut free_correct = 0usize;
    let mut col_total = 0usize;
    let mut col_correct = 0usize;
    for (idx, scenario) in dataset.scenarios.iter().enumerate() {
        let gates = bundle.d.extractor.forward_eval(&scenario.grid.cells)?;
        for sample in dataset.samples.iter().filter(|s| s.scenario_index == idx) {
            let logit = bundle.d.eval(&d_snap, &sample.q_normalized, &gates)?[0];
            let says_free = sigmoid(logit) >= 0.5;
            if sample.colliding || sample.self_colliding {
                col_total += 1;
                col_correct += (!says_free) as usize;
            } else {
                free_total += 1;
                free_correct += says_free as usize;
            }
        }
    }
    Ok(DiscriminationReport {
        acc_free: (free_total > 0).then(|| free_correct as f64 / free_total as f64),
        acc_col: (col_total > 0).then(|| col_correct as f64 / col_total as f64),
    })
}
