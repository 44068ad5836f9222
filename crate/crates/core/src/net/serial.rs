//! Versioned binary serialization for network parameters.
//!
//! Layout (version 1, little-endian):
//!
//! ```text
//! magic       8 bytes "LPNETPRM"
//! version     u32
//! n_layers    u32
//! per layer   u32 in_dim, u32 out_dim, u8 activation (0 linear, 1 leaky),
//!             f64 slope, u8 spectral_norm
//! n_gates     u32, then u32 layer index each
//! per layer   out*in f64 weights, out f64 biases,
//!             out f64 sn u-vector when spectral_norm
//! ```

use std::path::Path;

use super::{Activation, Layer, LayerSpec, NetError, NetworkParams};
use crate::scenario::{Reader, Writer};

const MAGIC: &[u8; 8] = b"LPNETPRM";
const VERSION: u32 = 1;

pub(crate) fn write_net(w: &mut Writer, net: &NetworkParams) {
    w.u32(net.layers.len() as u32);
    for layer in &net.layers {
        let s = layer.spec;
        w.u32(s.in_dim as u32);
        w.u32(s.out_dim as u32);
        let (kind, slope) = match s.activation {
            Activation::Linear => (0u8, 0.0),
            Activation::LeakyRelu(slope) => (1u8, slope),
        };
        w.u8(kind);
        w.f64(slope);
        w.u8(s.spectral_norm as u8);
    }
    w.u32(net.gate_layers.len() as u32);
    for &g in &net.gate_layers {
        w.u32(g as u32);
    }
    for layer in &net.layers {
        for v in &layer.w {
            w.f64(*v);
        }
        for v in &layer.b {
            w.f64(*v);
        }
        if let Some(u) = &layer.sn_u {
            for v in u {
                w.f64(*v);
            }
        }
    }
}

pub(crate) fn read_net(r: &mut Reader) -> Result<NetworkParams, NetError> {
    let corrupt = |e: crate::scenario::DatasetError| NetError::Corrupt(e.to_string());
    let n_layers = r.u32().map_err(corrupt)? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(NetError::Corrupt(format!("implausible layer count {n_layers}")));
    }
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.u32().map_err(corrupt)? as usize;
        let out_dim = r.u32().map_err(corrupt)? as usize;
        let kind = r.u8().map_err(corrupt)?;
        let slope = r.f64().map_err(corrupt)?;
        let sn = r.u8().map_err(corrupt)? != 0;
        let activation = match kind {
            0 => Activation::Linear,
            1 => Activation::LeakyRelu(slope),
            k => return Err(NetError::Corrupt(format!("unknown activation kind {k}"))),
        };
        specs.push(LayerSpec { in_dim, out_dim, activation, spectral_norm: sn });
    }
    let n_gates = r.u32().map_err(corrupt)? as usize;
    let mut gate_layers = Vec::with_capacity(n_gates);
    for _ in 0..n_gates {
        gate_layers.push(r.u32().map_err(corrupt)? as usize);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for spec in specs {
        let mut w = Vec::with_capacity(spec.in_dim * spec.out_dim);
        for _ in 0..spec.in_dim * spec.out_dim {
            w.push(r.f64().map_err(corrupt)?);
        }
        let mut b = Vec::with_capacity(spec.out_dim);
        for _ in 0..spec.out_dim {
            b.push(r.f64().map_err(corrupt)?);
        }
        let sn_u = if spec.spectral_norm {
            let mut u = Vec::with_capacity(spec.out_dim);
            for _ in 0..spec.out_dim {
                u.push(r.f64().map_err(corrupt)?);
            }
            Some(u)
        } else {
            None
        };
        layers.push(Layer { spec, w, b, sn_u });
    }
    Ok(NetworkParams { layers, gate_layers })
}

/// Serialize one network to the versioned binary format.
pub fn params_to_bytes(net: &NetworkParams) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    write_net(&mut w, net);
    w.buf
}

/// Parse a standalone parameter file. When `expected` is given, the stored
/// layer specs must match exactly.
pub fn params_from_bytes(bytes: &[u8], expected: Option<&[LayerSpec]>) -> Result<NetworkParams, NetError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8).map_err(|e| NetError::Corrupt(e.to_string()))?;
    if magic != MAGIC {
        return Err(NetError::Corrupt("bad magic".into()));
    }
    let version = r.u32().map_err(|e| NetError::Corrupt(e.to_string()))?;
    if version != VERSION {
        return Err(NetError::Version(version));
    }
    let net = read_net(&mut r)?;
    if !r.done() {
        return Err(NetError::Corrupt("trailing bytes".into()));
    }
    if let Some(specs) = expected {
        let stored: Vec<LayerSpec> = net.layers.iter().map(|l| l.spec).collect();
        if stored != specs {
            return Err(NetError::SpecMismatch(format!(
                "stored {} layers, expected {}",
                stored.len(),
                specs.len()
            )));
        }
    }
    Ok(net)
}

pub fn save_params(net: &NetworkParams, path: &Path) -> Result<(), NetError> {
    std::fs::write(path, params_to_bytes(net)).map_err(|e| NetError::Corrupt(e.to_string()))
}

pub fn load_params(path: &Path, expected: Option<&[LayerSpec]>) -> Result<NetworkParams, NetError> {
    let bytes = std::fs::read(path).map_err(|e| NetError::Corrupt(e.to_string()))?;
    params_from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn sample_net() -> NetworkParams {
        let specs = [
            LayerSpec { in_dim: 3, out_dim: 8, activation: Activation::LeakyRelu(0.2), spectral_norm: false },
            LayerSpec { in_dim: 8, out_dim: 8, activation: Activation::LeakyRelu(0.2), spectral_norm: true },
            LayerSpec { in_dim: 8, out_dim: 2, activation: Activation::Linear, spectral_norm: false },
        ];
        NetworkParams::init(&specs, vec![1], &mut derive_rng(5, "serial", 0)).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let net = sample_net();
        let bytes = params_to_bytes(&net);
        let loaded = params_from_bytes(&bytes, None).unwrap();
        assert_eq!(net, loaded);
        assert_eq!(bytes, params_to_bytes(&loaded));
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = params_to_bytes(&sample_net());
        assert!(matches!(
            params_from_bytes(&bytes[..bytes.len() - 3], None),
            Err(NetError::Corrupt(_))
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = params_to_bytes(&sample_net());
        bytes[8] = 42;
        assert!(matches!(params_from_bytes(&bytes, None), Err(NetError::Version(42))));
    }

    #[test]
    fn spec_mismatch_refused() {
        let bytes = params_to_bytes(&sample_net());
        let wrong = [LayerSpec {
            in_dim: 4,
            out_dim: 4,
            activation: Activation::Linear,
            spectral_norm: false,
        }];
        assert!(matches!(
            params_from_bytes(&bytes, Some(&wrong)),
            Err(NetError::SpecMismatch(_))
        ));
    }
}
