//! Versioned JSON checkpoint container.
//!
//! Arrays are stored by name under the namespaces `params/`, `buffers/`,
//! `ewa/` and `optim/velocity/`, as `f64` values so that `f32` and `f64`
//! states both round-trip exactly.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkConfig, ParamSet, Sgd};
use crate::perceptual::EwaState;
use crate::scalar::Scalar;
use crate::training::{EpochMetrics, ModelState, Variant};

pub const FORMAT: &str = "oaat-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    epoch: usize,
    step: u64,
    config_hash: String,
    variant: Variant,
    network: NetworkConfig,
    ewa_tau: f64,
    momentum: f64,
    weight_decay: f64,
    arrays: BTreeMap<String, StoredArray>,
    metrics: Vec<EpochMetrics>,
}

pub struct Checkpoint<T> {
    pub state: ModelState<T>,
    pub config_hash: String,
    pub variant: Variant,
    pub metrics: Vec<EpochMetrics>,
}

fn store<T: Scalar>(arrays: &mut BTreeMap<String, StoredArray>, prefix: &str, set: &ParamSet<T>) {
    for (name, v) in set.iter() {
        arrays.insert(
            format!("{prefix}/{name}"),
            StoredArray {
                shape: v.shape().to_vec(),
                data: v.iter().map(|x| x.to_f64_lossy()).collect(),
            },
        );
    }
}

fn restore<T: Scalar>(
    arrays: &BTreeMap<String, StoredArray>,
    prefix: &str,
    template: &ParamSet<T>,
    path: &Path,
) -> Result<ParamSet<T>> {
    let mut out = ParamSet::new();
    for (name, expected) in template.iter() {
        let key = format!("{prefix}/{name}");
        let a = arrays
            .get(&key)
            .ok_or_else(|| Error::data(path, format!("missing array {key}")))?;
        if a.shape != expected.shape() {
            return Err(Error::data(
                path,
                format!("array {key} has shape {:?}, expected {:?}", a.shape, expected.shape()),
            ));
        }
        let v = ArrayD::from_shape_vec(IxDyn(&a.shape), a.data.iter().map(|&x| T::lit(x)).collect())
            .map_err(|e| Error::data(path, format!("array {key}: {e}")))?;
        out.push(name, v);
    }
    Ok(out)
}

/// Writes a new checkpoint file; an existing file is never replaced.
pub fn save<T: Scalar>(
    path: &Path,
    state: &ModelState<T>,
    config_hash: &str,
    variant: Variant,
    metrics: &[EpochMetrics],
) -> Result<()> {
    let mut arrays = BTreeMap::new();
    store(&mut arrays, "params", state.network.params());
    store(&mut arrays, "buffers", state.network.buffers());
    store(&mut arrays, "ewa", &state.ewa.shadow_params);
    store(&mut arrays, "optim/velocity", state.optimizer.velocity());
    let c = Container {
        format: FORMAT.into(),
        version: VERSION,
        epoch: state.epoch,
        step: state.step,
        config_hash: config_hash.into(),
        variant,
        network: state.network.config().clone(),
        ewa_tau: state.ewa.tau,
        momentum: state.optimizer.momentum.to_f64_lossy(),
        weight_decay: state.optimizer.weight_decay.to_f64_lossy(),
        arrays,
        metrics: metrics.to_vec(),
    };
    let json = serde_json::to_vec(&c).map_err(|e| Error::data(path, e.to_string()))?;
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&json).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let c: Container = serde_json::from_slice(&bytes).map_err(|e| Error::data(path, e.to_string()))?;
    if c.format != FORMAT {
        return Err(Error::data(path, format!("not a checkpoint (format {:?})", c.format)));
    }
    if c.version != VERSION {
        return Err(Error::data(path, format!("unsupported checkpoint version {}", c.version)));
    }
    let mut network = Network::<T>::zeroed(c.network.clone())?;
    let params = restore(&c.arrays, "params", network.params(), path)?;
    let buffers = restore(&c.arrays, "buffers", network.buffers(), path)?;
    let shadow = restore(&c.arrays, "ewa", network.params(), path)?;
    let velocity = restore(&c.arrays, "optim/velocity", network.params(), path)?;
    *network.params_mut() = params;
    *network.buffers_mut() = buffers;
    let mut optimizer = Sgd::new(network.params(), T::lit(c.momentum), T::lit(c.weight_decay));
    optimizer.set_velocity(velocity)?;
    let mut ewa = EwaState::new(&shadow, c.ewa_tau)?;
    ewa.shadow_params = shadow;
    Ok(Checkpoint {
        state: ModelState {
            network,
            ewa,
            optimizer,
            epoch: c.epoch,
            step: c.step,
        },
        config_hash: c.config_hash,
        variant: c.variant,
        metrics: c.metrics,
    })
}

/// `checkpoint_epoch_0007.json`
pub fn file_name(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch:04}.json")
}

/// The checkpoint with the highest epoch number in `dir`, if any.
pub fn latest_in(dir: &Path) -> Result<Option<std::path::PathBuf>> {
    let mut best: Option<(usize, std::path::PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let epoch = name
            .strip_prefix("checkpoint_epoch_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_and_files_are_never_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ModelState::<f32>::new(NetworkConfig::new(3, 4, vec![4, 6]), 3, 0.99, 0.9, 5e-4).unwrap();
        s.epoch = 2;
        s.step = 17;
        s.ewa.shadow_params.values_mut()[0].mapv_inplace(|v| v * 0.3 + 1e-7);
        let path = dir.path().join(file_name(2));
        let metrics: Vec<EpochMetrics> = Vec::new();
        save(&path, &s, "abc", Variant::Oaat, &metrics).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(back.state.network.params(), s.network.params());
        assert_eq!(back.state.network.buffers(), s.network.buffers());
        assert_eq!(back.state.ewa, s.ewa);
        assert_eq!(back.state.optimizer.velocity(), s.optimizer.velocity());
        assert_eq!((back.state.epoch, back.state.step), (2, 17));
        assert_eq!(back.config_hash, "abc");
        assert!(save(&path, &s, "abc", Variant::Oaat, &metrics).is_err());
        assert_eq!(latest_in(dir.path()).unwrap(), Some(path));
    }

    #[test]
    fn foreign_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        std::fs::write(&path, b"{\"format\":\"other\"}").unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::DataFormat { .. })));
    }
}
