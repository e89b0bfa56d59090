//! JSON checkpoints. Parameters are stored by name as base64 little-endian
//! bytes so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{DetectorModel, ModelSpec};
use crate::error::{Error, Result};
use crate::gradroute::GradRoutingPolicy;
use crate::losses::LossConfig;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    dtype: String,
    step: usize,
    spec: ModelSpec,
    loss: LossConfig,
    policy: GradRoutingPolicy,
    params: Vec<StoredParam>,
}

pub fn to_json<T: Real>(model: &DetectorModel<T>, step: usize) -> Result<String> {
    let params = model
        .params
        .iter()
        .map(|(_, p)| StoredParam {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            data: STANDARD.encode(T::to_le_bytes_vec(&p.value.data)),
        })
        .collect();
    let ck = Checkpoint {
        dtype: T::NAME.to_string(),
        step,
        spec: model.spec.clone(),
        loss: model.loss.clone(),
        policy: model.policy.clone(),
        params,
    };
    Ok(serde_json::to_string(&ck)?)
}

/// Rebuilds a model and returns it with the step it was saved at.
pub fn from_json<T: Real>(json: &str) -> Result<(DetectorModel<T>, usize)> {
    let ck: Checkpoint = serde_json::from_str(json)?;
    if ck.dtype != T::NAME {
        return Err(Error::Checkpoint(format!("stored as {}, requested {}", ck.dtype, T::NAME)));
    }
    let mut model = DetectorModel::<T>::new(ck.spec, ck.loss, ck.policy, 0)?;
    if ck.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} stored parameters, model has {}",
            ck.params.len(),
            model.params.len()
        )));
    }
    for sp in ck.params {
        let id = model
            .params
            .find(&sp.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", sp.name)))?;
        let bytes = STANDARD
            .decode(sp.data.as_bytes())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", sp.name)))?;
        let data = T::from_le_bytes_slice(&bytes)
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated data", sp.name)))?;
        let slot = &mut model.params.get_mut(id).value;
        if slot.shape != sp.shape {
            return Err(Error::Checkpoint(format!("{}: shape {:?} vs {:?}", sp.name, sp.shape, slot.shape)));
        }
        *slot = Tensor::from_vec(&sp.shape, data)?;
    }
    Ok((model, ck.step))
}

pub fn save<T: Real>(model: &DetectorModel<T>, step: usize, path: &Path) -> Result<()> {
    fs::write(path, to_json(model, step)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(DetectorModel<T>, usize)> {
    from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = DetectorModel::<f32>::new(ModelSpec::micro(3), LossConfig::default(), GradRoutingPolicy::default(), 9).unwrap();
        let json = to_json(&m, 42).unwrap();
        let (back, step) = from_json::<f32>(&json).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.loss, m.loss);
        for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert!(matches!(from_json::<f64>(&json), Err(Error::Checkpoint(_))));
    }
}
