//! Named, shaped, row-major tensor records shared by every checkpoint format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self { name: name.into(), shape, values }
    }

    /// Looks up `name` and checks it has exactly `shape`.
    pub fn find<'a>(records: &'a [TensorRecord], name: &str, shape: &[usize]) -> Result<&'a Self> {
        let rec = records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        let numel: usize = shape.iter().product();
        if rec.shape != shape || rec.values.len() != numel {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?} with {} values, expected {shape:?}",
                rec.shape,
                rec.values.len()
            )));
        }
        Ok(rec)
    }
}
