//! Checkpoint files: `PVMD`, a format version, a JSON manifest of the
//! config and tensor layout, then every tensor as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::network::{Layer, Parameters};

const MAGIC: &[u8; 4] = b"PVMD";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: NetworkConfig,
    pub sequences: usize,
    /// Time constants in layer order, for inspection.
    pub taus: Vec<(String, f64)>,
    /// Training epoch the parameters come from.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest(params: &Parameters, epoch: usize) -> Manifest {
    let names = params.tensors().into_iter().map(|(n, _)| n);
    Manifest {
        config: params.config.clone(),
        sequences: params.initial.len(),
        taus: Layer::ALL
            .iter()
            .map(|l| (l.name().to_string(), l.tau(&params.config)))
            .collect(),
        epoch,
        tensors: names
            .zip(params.tensor_shapes())
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    }
}

pub fn encode_checkpoint(params: &Parameters, epoch: usize) -> Vec<u8> {
    let json = serde_json::to_vec(&manifest(params, epoch)).expect("manifest serializes");
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u32(json.len() as u32);
    w.bytes(&json);
    for (_, t) in params.tensors() {
        w.f32s(t);
    }
    w.buf
}

/// Parameters and the epoch they were saved at.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Parameters, usize)> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let len = r.u32()? as usize;
    let m: Manifest = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    m.config.validate()?;
    let mut params = Parameters::zeros(&m.config, m.sequences);
    let expected = manifest(&params, m.epoch);
    if expected.tensors != m.tensors {
        return Err(Error::Format(
            "checkpoint tensor layout does not match its config".into(),
        ));
    }
    for (_, t) in params.tensors_mut() {
        let values = r.f32s(t.len())?;
        t.copy_from_slice(&values);
    }
    r.finish()?;
    Ok((params, m.epoch))
}

pub fn save_checkpoint(path: &Path, params: &Parameters, epoch: usize) -> Result<()> {
    fs::write(path, encode_checkpoint(params, epoch))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters, usize)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Rounds every value to f32, giving exactly what a checkpoint stores.
pub fn quantize(params: &Parameters) -> Parameters {
    let mut p = params.clone();
    for (_, t) in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;

    #[test]
    fn roundtrip_is_f32_exact() {
        let mut p = init_params(&NetworkConfig::tiny(), 2, 4).unwrap();
        p.initial[1].u[3][0] = 0.123456789;
        let bytes = encode_checkpoint(&p, 17);
        let (q, epoch) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(epoch, 17);
        assert_eq!(q, quantize(&p));
        assert_eq!(encode_checkpoint(&q, 17), bytes);
    }

    #[test]
    fn rejects_damage() {
        let p = init_params(&NetworkConfig::tiny(), 1, 4).unwrap();
        let bytes = encode_checkpoint(&p, 0);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn manifest_lists_initial_states() {
        let p = init_params(&NetworkConfig::tiny(), 3, 4).unwrap();
        let m = manifest(&p, 0);
        assert_eq!(m.sequences, 3);
        assert!(m
            .tensors
            .iter()
            .any(|t| t.name == "u0[2].ps" && t.shape == vec![3]));
        assert_eq!(m.taus[2], ("vs".to_string(), 8.0));
    }
}
