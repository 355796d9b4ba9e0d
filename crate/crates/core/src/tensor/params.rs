//! Named parameter storage shared by all model components.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ndarray::NdArray;
use super::rng::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<NdArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        let id = ParamId(self.values.len());
        self.names.push(name.into());
        self.values.push(value);
        id
    }

    /// Uniform init in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut RngStream) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        self.add(name, NdArray::new(vec![rows, cols], data).expect("glorot init"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, NdArray::zeros(vec![len]))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, NdArray::full(vec![len], 1.0))
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let ser = SerializedParams {
            format: PARAMS_FORMAT.to_string(),
            entries: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| SerializedParam {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                    data: v.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer(BufWriter::new(file), &ser)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ser: SerializedParams = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Format(format!("corrupt weights file {}: {e}", path.display())))?;
        if ser.format != PARAMS_FORMAT {
            return Err(Error::Format(format!("unknown weights format '{}'", ser.format)));
        }
        let mut store = ParamStore::new();
        for e in ser.entries {
            let v = NdArray::new(e.shape, e.data)
                .map_err(|err| Error::Format(format!("corrupt weights entry '{}': {err}", e.name)))?;
            store.add(e.name, v);
        }
        Ok(store)
    }
}

const PARAMS_FORMAT: &str = "cardiofuse-params-v1";

#[derive(Serialize, Deserialize)]
struct SerializedParams {
    format: String,
    entries: Vec<SerializedParam>,
}

#[derive(Serialize, Deserialize)]
struct SerializedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}
