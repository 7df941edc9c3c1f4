//! Uniform access to the tensors inside a parameter struct: flattening for
//! gradient checks, and named storage for weight files.

use crate::error::{dim_err, Result};
use crate::io::TensorStore;
use crate::tensor::Tensor;

pub trait ParamSet {
    /// Named tensors in a fixed order.
    fn fields(&self) -> Vec<(&'static str, &Tensor)>;
    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.fields().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Overwrites every field from `flat`, in `fields` order.
    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return dim_err(format!("{} values for {} parameters", flat.len(), self.param_count()));
        }
        let mut offset = 0;
        for (_, t) in self.fields_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Zero-valued copy, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        for (_, t) in out.fields_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        for (name, t) in self.fields() {
            store.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Replaces every field with the stored tensor of the same name and shape.
    fn load(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        for (name, t) in self.fields_mut() {
            *t = store.expect(&format!("{prefix}.{name}"), t.shape())?;
        }
        Ok(())
    }
}
