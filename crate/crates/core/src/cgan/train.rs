//! Alternating training loop: the discriminator ascends the adversarial and
//! collision terms, then the generator and encoder descend the
//! non-saturating generator term plus the reconstruction and identity-map
//! terms, with per-sample weights from the clearance schedule.
//!
//! Each step draws its batches from a stream derived from `(seed, step)`,
//! so runs are bit-reproducible and a checkpoint resume continues the exact
//! original trajectory.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::serial;
use super::{
    effective_lambdas, sigmoid, sq_dist, BundleGates, ExtractorGrads, ModelBundle, TrainingConfig,
};
use crate::net::{backward, forward, AdamParams, NetAdam, NetError, NetGrads, SnSnapshot};
use crate::rng::derive_rng;
use crate::scenario::Dataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("net: {0}")]
    Net(#[from] NetError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset joint dimension {got} does not match configured latent dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One log record; serialized as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss_gan: f64,
    pub loss_rec: f64,
    pub loss_map: f64,
    pub loss_col: f64,
    pub d_acc_real: f64,
    pub d_acc_fake: f64,
    pub d_acc_col: f64,
    /// Fraction of generated postures outside the unit cube this step.
    pub out_of_range: f64,
}

/// Append-only training log.
#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: TrainingLog,
}

/// Per-network optimizer group: the core stack, the extractor trunk, and
/// the extractor heads.
struct CondOpt {
    mlp: NetAdam,
    trunk: NetAdam,
    heads: Vec<NetAdam>,
}

impl CondOpt {
    fn new(hyper: AdamParams, net: &super::ConditionedNet) -> Self {
        Self {
            mlp: NetAdam::new(hyper, &net.mlp),
            trunk: NetAdam::new(hyper, &net.extractor.trunk),
            heads: net.extractor.heads.iter().map(|h| NetAdam::new(hyper, h)).collect(),
        }
    }

    fn step(&mut self, net: &mut super::ConditionedNet, grads: &CondGrads) -> Result<(), NetError> {
        self.mlp.step(&mut net.mlp, &grads.mlp)?;
        self.trunk.step(&mut net.extractor.trunk, &grads.ext.trunk)?;
        for (opt, (head, g)) in self
            .heads
            .iter_mut()
            .zip(net.extractor.heads.iter_mut().zip(&grads.ext.heads))
        {
            opt.step(head, g)?;
        }
        Ok(())
    }
}

struct CondGrads {
    mlp: NetGrads,
    ext: ExtractorGrads,
}

impl CondGrads {
    fn new(net: &super::ConditionedNet) -> Self {
        Self { mlp: NetGrads::zeros(&net.mlp), ext: net.extractor.grads() }
    }

    fn clear(&mut self) {
        self.mlp.clear();
        self.ext.trunk.clear();
        self.ext.heads.iter_mut().for_each(NetGrads::clear);
    }

    fn finalize(&mut self, net: &super::ConditionedNet, snap: &SnSnapshot) {
        self.mlp.finalize(&net.mlp, snap);
        self.ext.trunk.finalize(&net.extractor.trunk, &net.extractor.trunk.sn_snapshot());
        for (g, h) in self.ext.heads.iter_mut().zip(&net.extractor.heads) {
            g.finalize(h, &h.sn_snapshot());
        }
    }
}

/// Per-scenario sample index pools.
struct Pools {
    free: Vec<Vec<usize>>,
    col: Vec<Vec<usize>>,
}

impl Pools {
    fn build(ds: &Dataset) -> Self {
        let n = ds.scenarios.len();
        let mut free = vec![Vec::new(); n];
        let mut col = vec![Vec::new(); n];
        for (i, s) in ds.samples.iter().enumerate() {
            if s.colliding || s.self_colliding {
                col[s.scenario_index].push(i);
            } else {
                free[s.scenario_index].push(i);
            }
        }
        Self { free, col }
    }
}

/// One drawn scenario block.
struct Block {
    scenario: usize,
    free: Vec<usize>,
    col: Vec<usize>,
    zs: Vec<Vec<f64>>,
}

/// Incremental trainer; owns the models, optimizer state, and step counter.
pub struct Trainer {
    pub bundle: ModelBundle,
    pub cfg: TrainingConfig,
    pub step: u64,
    pub log: TrainingLog,
    opt_g: CondOpt,
    opt_d: CondOpt,
    opt_e: CondOpt,
    pools: Pools,
}

impl Trainer {
    pub fn new(dataset: &Dataset, cfg: TrainingConfig) -> Result<Self, TrainError> {
        if dataset.samples.is_empty() || dataset.scenarios.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let n = dataset.arm.n_joints();
        let bundle = ModelBundle::init(n, dataset.grid_spec, cfg.net.clone(), cfg.seed)?;
        Self::with_bundle(bundle, dataset, cfg, 0)
    }

    fn with_bundle(
        bundle: ModelBundle,
        dataset: &Dataset,
        cfg: TrainingConfig,
        step: u64,
    ) -> Result<Self, TrainError> {
        if bundle.n != dataset.arm.n_joints() {
            return Err(TrainError::DimensionMismatch {
                expected: bundle.n,
                got: dataset.arm.n_joints(),
            });
        }
        let d_hyper = AdamParams { lr: cfg.lr_d, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: 1e-8 };
        let ge_hyper = AdamParams { lr: cfg.lr_ge, ..d_hyper };
        Ok(Self {
            opt_g: CondOpt::new(ge_hyper, &bundle.g),
            opt_d: CondOpt::new(d_hyper, &bundle.d),
            opt_e: CondOpt::new(ge_hyper, &bundle.e),
            pools: Pools::build(dataset),
            bundle,
            cfg,
            step,
            log: TrainingLog::default(),
        })
    }

    fn draw_blocks(
        &self,
        rng: &mut rand_chacha::ChaCha8Rng,
        with_col: bool,
    ) -> Vec<Block> {
        let cfg = &self.cfg;
        let n_scen = self.pools.free.len();
        let n = self.bundle.n;
        (0..cfg.batch_scenarios)
            .map(|_| {
                let scenario = rng.gen_range(0..n_scen);
                let free_pool = &self.pools.free[scenario];
                let free = (0..cfg.batch_free_per_scenario)
                    .filter_map(|_| {
                        (!free_pool.is_empty()).then(|| free_pool[rng.gen_range(0..free_pool.len())])
                    })
                    .collect();
                let col_pool = &self.pools.col[scenario];
                let col = if with_col {
                    (0..cfg.batch_col_per_scenario)
                        .filter_map(|_| {
                            (!col_pool.is_empty()).then(|| col_pool[rng.gen_range(0..col_pool.len())])
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let zs = (0..cfg.batch_z_per_scenario)
                    .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .collect();
                Block { scenario, free, col, zs }
            })
            .collect()
    }

    /// Run one alternating step (discriminator update, then generator and
    /// encoder update). Returns the log record for this step.
    pub fn step_once(&mut self, dataset: &Dataset) -> Result<LogRecord, TrainError> {
        let cfg = self.cfg.clone();
        let step = self.step;
        let mut rng = derive_rng(cfg.seed, "train-step", step);
        let d_blocks = self.draw_blocks(&mut rng, true);
        let ge_blocks = self.draw_blocks(&mut rng, false);

        let n_free: usize = d_blocks.iter().map(|b| b.free.len()).sum();
        let n_col: usize = d_blocks.iter().map(|b| b.col.len()).sum();
        let n_z: usize = d_blocks.iter().map(|b| b.zs.len()).sum();
        if n_free == 0 || n_z == 0 {
            return Err(TrainError::Diverged { step, what: "empty free batch".into() });
        }

        // --- discriminator update ------------------------------------------
        self.bundle.d.mlp.refresh_spectral(1);
        let d_snap = self.bundle.d.mlp.sn_snapshot();
        let g_snap = self.bundle.g.mlp.sn_snapshot();

        let mut d_grads = CondGrads::new(&self.bundle.d);
        let mut real_logits = Vec::with_capacity(n_free);
        let mut fake_logits = Vec::with_capacity(n_z);
        let mut col_logits = Vec::with_capacity(n_col);
        let mut out_of_range = 0usize;

        for block in &d_blocks {
            let scenario = &dataset.scenarios[block.scenario];
            let grid = &scenario.grid.cells;
            let (d_gates, d_ext_tape) = self.bundle.d.extractor.forward(grid)?;
            let g_gates = self.bundle.g.extractor.forward_eval(grid)?;
            let mut block_dgates: Vec<Vec<f64>> =
                d_gates.iter().map(|g| vec![0.0; g.len()]).collect();

            for &i in &block.free {
                let theta = &dataset.samples[i].q_normalized;
                let (out, tape) = forward(&self.bundle.d.mlp, &d_snap, theta, Some(&d_gates))?;
                let logit = out[0];
                real_logits.push(logit);
                // Ascend log D(real): descend -lambda_gan * (1 - p) / N.
                let dl = -cfg.lambda_gan * (1.0 - sigmoid(logit)) / n_free as f64;
                let ig = backward(&self.bundle.d.mlp, &d_snap, tape, &[dl], &mut d_grads.mlp)?;
                accumulate_gates(&mut block_dgates, &ig.d_gates);
            }
            for &i in &block.col {
                let sample = &dataset.samples[i];
                let lambda_col = effective_lambdas(sample, &cfg).col;
                let (out, tape) =
                    forward(&self.bundle.d.mlp, &d_snap, &sample.q_normalized, Some(&d_gates))?;
                let logit = out[0];
                col_logits.push(logit);
                // Ascend log(1 - D(col)): descend +lambda_col * p / N.
                let dl = lambda_col * sigmoid(logit) / n_col as f64;
                let ig = backward(&self.bundle.d.mlp, &d_snap, tape, &[dl], &mut d_grads.mlp)?;
                accumulate_gates(&mut block_dgates, &ig.d_gates);
            }
            for z in &block.zs {
                let fake = self.bundle.g.eval(&g_snap, z, &g_gates)?;
                if fake.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    out_of_range += 1;
                }
                let (out, tape) = forward(&self.bundle.d.mlp, &d_snap, &fake, Some(&d_gates))?;
                let logit = out[0];
                fake_logits.push(logit);
                // Ascend log(1 - D(fake)): descend +lambda_gan * p / N.
                let dl = cfg.lambda_gan * sigmoid(logit) / n_z as f64;
                let ig = backward(&self.bundle.d.mlp, &d_snap, tape, &[dl], &mut d_grads.mlp)?;
                accumulate_gates(&mut block_dgates, &ig.d_gates);
            }
            self.bundle.d.extractor.backward(d_ext_tape, &block_dgates, &mut d_grads.ext)?;
        }
        d_grads.finalize(&self.bundle.d, &d_snap);
        self.opt_d
            .step(&mut self.bundle.d, &d_grads)
            .map_err(|e| TrainError::Diverged { step, what: e.to_string() })?;

        // --- generator / encoder update -------------------------------------
        self.bundle.g.mlp.refresh_spectral(1);
        self.bundle.e.mlp.refresh_spectral(1);
        let g_snap = self.bundle.g.mlp.sn_snapshot();
        let e_snap = self.bundle.e.mlp.sn_snapshot();
        let d_snap = self.bundle.d.mlp.sn_snapshot();

        let mut g_grads = CondGrads::new(&self.bundle.g);
        let mut e_grads = CondGrads::new(&self.bundle.e);
        let mut d_scratch = NetGrads::zeros(&self.bundle.d.mlp);

        let gn_free: usize = ge_blocks.iter().map(|b| b.free.len()).sum();
        let gn_z: usize = ge_blocks.iter().map(|b| b.zs.len()).sum();
        if gn_free == 0 || gn_z == 0 {
            return Err(TrainError::Diverged { step, what: "empty generator batch".into() });
        }

        let mut sum_map = 0.0;
        let mut sum_rec_theta = 0.0;
        let mut sum_rec_z = 0.0;
        let mut gen_logits = Vec::with_capacity(gn_z);

        for block in &ge_blocks {
            let scenario = &dataset.scenarios[block.scenario];
            let grid = &scenario.grid.cells;
            let (g_gates, g_ext_tape) = self.bundle.g.extractor.forward(grid)?;
            let (e_gates, e_ext_tape) = self.bundle.e.extractor.forward(grid)?;
            let d_gates = self.bundle.d.extractor.forward_eval(grid)?;
            let mut block_g_dgates: Vec<Vec<f64>> =
                g_gates.iter().map(|g| vec![0.0; g.len()]).collect();
            let mut block_e_dgates: Vec<Vec<f64>> =
                e_gates.iter().map(|g| vec![0.0; g.len()]).collect();

            for &i in &block.free {
                let sample = &dataset.samples[i];
                let lambdas = effective_lambdas(sample, &cfg);
                let theta = &sample.q_normalized;

                // Identity-map term.
                let (mapped, map_tape) =
                    forward(&self.bundle.g.mlp, &g_snap, theta, Some(&g_gates))?;
                sum_map += sq_dist(&mapped, theta);
                if lambdas.map != 0.0 {
                    let d_out: Vec<f64> = mapped
                        .iter()
                        .zip(theta)
                        .map(|(m, t)| 2.0 * lambdas.map * (m - t) / gn_free as f64)
                        .collect();
                    let ig = backward(&self.bundle.g.mlp, &g_snap, map_tape, &d_out, &mut g_grads.mlp)?;
                    accumulate_gates(&mut block_g_dgates, &ig.d_gates);
                }

                // Cycle term through the encoder.
                let (z, e_tape) = forward(&self.bundle.e.mlp, &e_snap, theta, Some(&e_gates))?;
                let (rec, g_tape) = forward(&self.bundle.g.mlp, &g_snap, &z, Some(&g_gates))?;
                sum_rec_theta += sq_dist(&rec, theta);
                if lambdas.rec != 0.0 {
                    let d_rec: Vec<f64> = rec
                        .iter()
                        .zip(theta)
                        .map(|(r, t)| 2.0 * lambdas.rec * (r - t) / gn_free as f64)
                        .collect();
                    let ig = backward(&self.bundle.g.mlp, &g_snap, g_tape, &d_rec, &mut g_grads.mlp)?;
                    accumulate_gates(&mut block_g_dgates, &ig.d_gates);
                    let ig_e =
                        backward(&self.bundle.e.mlp, &e_snap, e_tape, &ig.d_input, &mut e_grads.mlp)?;
                    accumulate_gates(&mut block_e_dgates, &ig_e.d_gates);
                }
            }

            for z in &block.zs {
                // Fake posture; track reconstruction of z and the
                // non-saturating generator term together.
                let (fake, g_tape) = forward(&self.bundle.g.mlp, &g_snap, z, Some(&g_gates))?;
                let (z_rec, e_tape) = forward(&self.bundle.e.mlp, &e_snap, &fake, Some(&e_gates))?;
                sum_rec_z += sq_dist(&z_rec, z);
                let (d_out, d_tape) = forward(&self.bundle.d.mlp, &d_snap, &fake, Some(&d_gates))?;
                let logit = d_out[0];
                gen_logits.push(logit);

                let d_zrec: Vec<f64> = z_rec
                    .iter()
                    .zip(z)
                    .map(|(r, t)| 2.0 * cfg.lambda_rec * (r - t) / gn_z as f64)
                    .collect();
                let ig_e = backward(&self.bundle.e.mlp, &e_snap, e_tape, &d_zrec, &mut e_grads.mlp)?;
                accumulate_gates(&mut block_e_dgates, &ig_e.d_gates);

                // Descend -log D(G(z)).
                let dl = cfg.lambda_gan * (sigmoid(logit) - 1.0) / gn_z as f64;
                let ig_d = backward(&self.bundle.d.mlp, &d_snap, d_tape, &[dl], &mut d_scratch)?;

                let d_fake: Vec<f64> = ig_e
                    .d_input
                    .iter()
                    .zip(&ig_d.d_input)
                    .map(|(a, b)| a + b)
                    .collect();
                let ig_g = backward(&self.bundle.g.mlp, &g_snap, g_tape, &d_fake, &mut g_grads.mlp)?;
                accumulate_gates(&mut block_g_dgates, &ig_g.d_gates);
            }

            self.bundle.g.extractor.backward(g_ext_tape, &block_g_dgates, &mut g_grads.ext)?;
            self.bundle.e.extractor.backward(e_ext_tape, &block_e_dgates, &mut e_grads.ext)?;
        }
        g_grads.finalize(&self.bundle.g, &g_snap);
        e_grads.finalize(&self.bundle.e, &e_snap);
        self.opt_g
            .step(&mut self.bundle.g, &g_grads)
            .map_err(|e| TrainError::Diverged { step, what: e.to_string() })?;
        self.opt_e
            .step(&mut self.bundle.e, &e_grads)
            .map_err(|e| TrainError::Diverged { step, what: e.to_string() })?;

        // --- bookkeeping -----------------------------------------------------
        let record = LogRecord {
            step,
            loss_gan: super::gan_loss_from_logits(&real_logits, &fake_logits),
            loss_rec: sum_rec_theta / gn_free as f64 + sum_rec_z / gn_z as f64,
            loss_map: sum_map / gn_free as f64,
            loss_col: if col_logits.is_empty() {
                0.0
            } else {
                super::col_loss_from_logits(&col_logits)
            },
            d_acc_real: frac(&real_logits, |l| sigmoid(l) >= 0.5),
            d_acc_fake: frac(&fake_logits, |l| sigmoid(l) < 0.5),
            d_acc_col: frac(&col_logits, |l| sigmoid(l) < 0.5),
            out_of_range: out_of_range as f64 / n_z as f64,
        };
        let finite = record.loss_gan.is_finite()
            && record.loss_rec.is_finite()
            && record.loss_map.is_finite()
            && record.loss_col.is_finite()
            && self.bundle.g.mlp.all_finite()
            && self.bundle.d.mlp.all_finite()
            && self.bundle.e.mlp.all_finite();
        if !finite {
            return Err(TrainError::Diverged { step, what: "non-finite loss or parameters".into() });
        }
        self.step += 1;
        Ok(record)
    }

    /// Run until `cfg.steps`, logging at the configured interval and writing
    /// checkpoints to `checkpoint_dir` when given.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        checkpoint_dir: Option<&Path>,
    ) -> Result<(), TrainError> {
        while self.step < self.cfg.steps {
            let record = self.step_once(dataset)?;
            let done = self.step; // step counter already advanced
            if done % self.cfg.log_interval == 0 || done == self.cfg.steps {
                self.log.records.push(record);
            }
            if let Some(dir) = checkpoint_dir {
                if done % self.cfg.checkpoint_interval == 0 || done == self.cfg.steps {
                    save_checkpoint(dir, &self.checkpoint())?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut adam = Vec::new();
        for opt in [&self.opt_g, &self.opt_d, &self.opt_e] {
            adam.extend(opt.mlp.states.iter().cloned());
            adam.extend(opt.trunk.states.iter().cloned());
            for head in &opt.heads {
                adam.extend(head.states.iter().cloned());
            }
        }
        Checkpoint {
            bundle: self.bundle.clone(),
            cfg: self.cfg.clone(),
            step: self.step,
            adam,
        }
    }

    /// Rebuild a trainer from a checkpoint; continues bit-exactly.
    pub fn resume(ckpt: Checkpoint, dataset: &Dataset) -> Result<Self, TrainError> {
        let mut t = Self::with_bundle(ckpt.bundle, dataset, ckpt.cfg, ckpt.step)?;
        let mut loaded = ckpt.adam.into_iter();
        for opt in [&mut t.opt_g, &mut t.opt_d, &mut t.opt_e] {
            let targets = opt
                .mlp
                .states
                .iter_mut()
                .chain(opt.trunk.states.iter_mut())
                .chain(opt.heads.iter_mut().flat_map(|h| h.states.iter_mut()));
            for target in targets {
                let state = loaded
                    .next()
                    .ok_or_else(|| TrainError::Checkpoint("missing optimizer state".into()))?;
                if state.m.len() != target.m.len() {
                    return Err(TrainError::Checkpoint(format!(
                        "optimizer block size {} does not match network block size {}",
                        state.m.len(),
                        target.m.len()
                    )));
                }
                target.step = state.step;
                target.m = state.m;
                target.v = state.v;
            }
        }
        if loaded.next().is_some() {
            return Err(TrainError::Checkpoint("extra optimizer states in checkpoint".into()));
        }
        Ok(t)
    }
}

/// Snapshot of everything needed to continue training.
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub cfg: TrainingConfig,
    pub step: u64,
    pub(crate) adam: Vec<crate::net::AdamState>,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    serial::save_checkpoint(dir, ckpt)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    serial::load_checkpoint(dir)
}

/// Train from scratch; convenience wrapper over [`Trainer`].
pub fn train(
    dataset: &Dataset,
    cfg: TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(dataset, cfg)?;
    trainer.run(dataset, checkpoint_dir)?;
    Ok(TrainOutcome { bundle: trainer.bundle, log: trainer.log })
}

fn accumulate_gates(acc: &mut [Vec<f64>], add: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(add) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn frac(logits: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().filter(|&&l| pred(l)).count() as f64 / logits.len() as f64
}
