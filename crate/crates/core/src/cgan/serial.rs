//! Bundle and checkpoint serialization.
//!
//! A model bundle file (version 1, little-endian) holds the latent
//! dimension, the grid spec, the network configuration, and the three
//! conditioned networks (core stack, extractor trunk, extractor heads), each
//! in the parameter-file layout of [`crate::net`]. A checkpoint directory
//! holds `bundle.bin`, `optimizer.bin` (Adam moments in update order plus
//! the step counter), and `config.json` (the training-config echo).

use std::path::Path;

use super::train::{Checkpoint, TrainError};
use super::{ConditionedNet, Extractor, ModelBundle, NetConfig, TrainingConfig};
use crate::geometry::{GridSpec, Point2};
use crate::net::AdamState;
use crate::scenario::{Reader, Writer};

const BUNDLE_MAGIC: &[u8; 8] = b"LPBUNDLE";
const BUNDLE_VERSION: u32 = 1;
const OPT_MAGIC: &[u8; 8] = b"LPOPTIMZ";
const OPT_VERSION: u32 = 1;

pub const CHECKPOINT_BUNDLE: &str = "bundle.bin";
pub const CHECKPOINT_OPTIMIZER: &str = "optimizer.bin";
pub const CHECKPOINT_CONFIG: &str = "config.json";

fn corrupt<E: std::fmt::Display>(e: E) -> TrainError {
    TrainError::Checkpoint(format!("corrupt file: {e}"))
}

fn write_cond_net(w: &mut Writer, net: &ConditionedNet) {
    crate::net::serial_write_net(w, &net.mlp);
    crate::net::serial_write_net(w, &net.extractor.trunk);
    w.u32(net.extractor.heads.len() as u32);
    for head in &net.extractor.heads {
        crate::net::serial_write_net(w, head);
    }
}

fn read_cond_net(r: &mut Reader) -> Result<ConditionedNet, TrainError> {
    let mlp = crate::net::serial_read_net(r).map_err(corrupt)?;
    let trunk = crate::net::serial_read_net(r).map_err(corrupt)?;
    let n_heads = r.u32().map_err(corrupt)? as usize;
    if n_heads > 64 {
        return Err(TrainError::Checkpoint(format!("implausible head count {n_heads}")));
    }
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        heads.push(crate::net::serial_read_net(r).map_err(corrupt)?);
    }
    Ok(ConditionedNet { mlp, extractor: Extractor { trunk, heads } })
}

pub fn bundle_to_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(BUNDLE_MAGIC);
    w.u32(BUNDLE_VERSION);
    w.u32(bundle.n as u32);
    let g = bundle.grid_spec;
    w.u32(g.width as u32);
    w.u32(g.height as u32);
    w.f64(g.min.x);
    w.f64(g.min.y);
    w.f64(g.max.x);
    w.f64(g.max.y);
    let nc = &bundle.net_cfg;
    w.u32(nc.hidden_width as u32);
    w.u32(nc.hidden_layers as u32);
    w.u32(nc.extractor_width as u32);
    w.f64(nc.leaky_slope);
    write_cond_net(&mut w, &bundle.g);
    write_cond_net(&mut w, &bundle.d);
    write_cond_net(&mut w, &bundle.e);
    w.buf
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<ModelBundle, TrainError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8).map_err(corrupt)?;
    if magic != BUNDLE_MAGIC {
        return Err(TrainError::Checkpoint("bad bundle magic".into()));
    }
    let version = r.u32().map_err(corrupt)?;
    if version != BUNDLE_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported bundle version {version}")));
    }
    let n = r.u32().map_err(corrupt)? as usize;
    let grid_spec = GridSpec {
        width: r.u32().map_err(corrupt)? as usize,
        height: r.u32().map_err(corrupt)? as usize,
        min: Point2::new(r.f64().map_err(corrupt)?, r.f64().map_err(corrupt)?),
        max: Point2::new(r.f64().map_err(corrupt)?, r.f64().map_err(corrupt)?),
    };
    let net_cfg = NetConfig {
        hidden_width: r.u32().map_err(corrupt)? as usize,
        hidden_layers: r.u32().map_err(corrupt)? as usize,
        extractor_width: r.u32().map_err(corrupt)? as usize,
        leaky_slope: r.f64().map_err(corrupt)?,
    };
    let g = read_cond_net(&mut r)?;
    let d = read_cond_net(&mut r)?;
    let e = read_cond_net(&mut r)?;
    if !r.done() {
        return Err(TrainError::Checkpoint("trailing bytes in bundle".into()));
    }
    let bundle = ModelBundle { n, grid_spec, net_cfg, g, d, e };
    if bundle.g.mlp.input_dim() != n || bundle.g.mlp.output_dim() != n {
        return Err(TrainError::Checkpoint(
            "generator shape does not match the recorded latent dimension".into(),
        ));
    }
    if bundle.d.mlp.output_dim() != 1 || bundle.e.mlp.output_dim() != n {
        return Err(TrainError::Checkpoint("bundle network shapes are inconsistent".into()));
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, bundle_to_bytes(bundle))?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, TrainError> {
    bundle_from_bytes(&std::fs::read(path)?)
}

fn adam_to_bytes(step: u64, states: &[AdamState]) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(OPT_MAGIC);
    w.u32(OPT_VERSION);
    w.u64(step);
    w.u32(states.len() as u32);
    for s in states {
        w.u64(s.step);
        w.u64(s.m.len() as u64);
        for v in &s.m {
            w.f64(*v);
        }
        for v in &s.v {
            w.f64(*v);
        }
    }
    w.buf
}

/// Moments and step counters only; hyper-parameters are rebuilt from the
/// training config.
fn adam_from_bytes(bytes: &[u8]) -> Result<(u64, Vec<(u64, Vec<f64>, Vec<f64>)>), TrainError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8).map_err(corrupt)?;
    if magic != OPT_MAGIC {
        return Err(TrainError::Checkpoint("bad optimizer magic".into()));
    }
    let version = r.u32().map_err(corrupt)?;
    if version != OPT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported optimizer version {version}")));
    }
    let step = r.u64().map_err(corrupt)?;
    let n = r.u32().map_err(corrupt)? as usize;
    let mut states = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let s_step = r.u64().map_err(corrupt)?;
        let len = r.u64().map_err(corrupt)? as usize;
        let mut m = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            m.push(r.f64().map_err(corrupt)?);
        }
        let mut v = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            v.push(r.f64().map_err(corrupt)?);
        }
        states.push((s_step, m, v));
    }
    if !r.done() {
        return Err(TrainError::Checkpoint("trailing bytes in optimizer file".into()));
    }
    Ok((step, states))
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CHECKPOINT_BUNDLE), bundle_to_bytes(&ckpt.bundle))?;
    std::fs::write(dir.join(CHECKPOINT_OPTIMIZER), adam_to_bytes(ckpt.step, &ckpt.adam))?;
    let cfg_json = serde_json::to_string_pretty(&ckpt.cfg)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    std::fs::write(dir.join(CHECKPOINT_CONFIG), cfg_json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let bundle = load_bundle(&dir.join(CHECKPOINT_BUNDLE))?;
    let cfg: TrainingConfig = serde_json::from_str(
        &std::fs::read_to_string(dir.join(CHECKPOINT_CONFIG))?,
    )
    .map_err(|e| TrainError::Checkpoint(format!("bad config echo: {e}")))?;
    let (step, raw_states) = adam_from_bytes(&std::fs::read(dir.join(CHECKPOINT_OPTIMIZER))?)?;
    if bundle.net_cfg != cfg.net {
        return Err(TrainError::Checkpoint(
            "bundle network configuration disagrees with the config echo".into(),
        ));
    }
    let adam = raw_states
        .into_iter()
        .map(|(s_step, m, v)| {
            let mut st = AdamState::new(crate::net::AdamParams::default(), m.len());
            st.step = s_step;
            st.m = m;
            st.v = v;
            st
        })
        .collect();
    Ok(Checkpoint { bundle, cfg, step, adam })
}
