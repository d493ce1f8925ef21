//! JSON parameter checkpoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, ParamSet, Result, Scalar, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Name -> (shape, flat data) document with a format version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format_version: u32,
    pub params: BTreeMap<String, ParamRecord>,
}

impl ParamCheckpoint {
    pub fn capture<T: Scalar>(set: &ParamSet<T>) -> Self {
        let params = set
            .iter()
            .map(|(_, name, t)| {
                (
                    name.to_string(),
                    ParamRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().iter().map(|x| x.as_f64()).collect(),
                    },
                )
            })
            .collect();
        ParamCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params,
        }
    }

    /// Overwrites every tensor in `set` with the stored values. All names
    /// and shapes must match exactly.
    pub fn restore_into<T: Scalar>(&self, set: &mut ParamSet<T>) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        if self.params.len() != set.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                set.len()
            )));
        }
        let ids: Vec<_> = set.ids().collect();
        for id in ids {
            let name = set.name(id).to_string();
            let rec = self
                .params
                .get(&name)
                .ok_or_else(|| Error::contract(format!("checkpoint is missing {name}")))?;
            let t = set.get_mut(id);
            if rec.shape != t.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    left: t.shape().to_vec(),
                    right: rec.shape.clone(),
                });
            }
            let restored = Tensor::<T>::from_f64(&rec.shape, &rec.data)?;
            t.data_mut().copy_from_slice(restored.data());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
