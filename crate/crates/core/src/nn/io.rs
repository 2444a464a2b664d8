use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::{Module, Tensor};
use crate::error::{Error, Result};

/// Write every parameter of `model` to a safetensors file (little-endian
/// f32, one named tensor per parameter).
pub fn save_params<M: Module + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit_params(&mut |name, p| {
        let bytes = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        tensors.push((name.to_string(), p.value.shape().to_vec(), bytes));
    });
    let views = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load parameters saved by [`save_params`] into a model of identical
/// architecture.
pub fn load_params<M: Module + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingData(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut found: HashMap<String, Tensor> = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32")));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        found.insert(name, Tensor::from_vec(view.shape(), data));
    }
    let mut problem = None;
    model.visit_params(&mut |name, p| match found.remove(name) {
        Some(t) if t.shape() == p.value.shape() => p.value = t,
        Some(t) => {
            problem.get_or_insert(format!("{name}: shape {:?} vs {:?}", t.shape(), p.value.shape()));
        }
        None => {
            problem.get_or_insert(format!("{name}: missing"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(extra) = found.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}
