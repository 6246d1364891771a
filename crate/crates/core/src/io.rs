//! Array container files.
//!
//! Every array file is a safetensors container: an 8-byte little-endian
//! header length, a JSON header describing each named tensor, then raw
//! little-endian data. Single-array files (dataset images and masks) hold
//! one tensor named `data`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SINGLE_ARRAY_NAME: &str = "data";

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes named `f32` tensors into one container.
pub fn write_f32_tensors<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(name, t)| (name.to_string(), t.shape().to_vec(), f32_bytes(t.data())))
        .collect();
    let views = owned
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::corrupt(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, &None).map_err(|e| Error::corrupt(path, e))?;
    write_bytes(path, &bytes)
}

/// Reads every tensor of a container; all must be `f32`.
pub fn read_f32_tensors(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let bytes = read_bytes(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::corrupt(path, e))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::corrupt(path, format!("tensor {name} is {:?}, expected F32", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(view.shape().to_vec(), data).map_err(|e| Error::corrupt(path, e))?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn write_array_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_f32_tensors(path, [(SINGLE_ARRAY_NAME, t)])
}

pub fn read_array_f32(path: &Path) -> Result<Tensor<f32>> {
    read_f32_tensors(path)?
        .remove(SINGLE_ARRAY_NAME)
        .ok_or_else(|| Error::corrupt(path, "missing tensor `data`"))
}

pub fn write_array_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    let view = TensorView::new(Dtype::U8, shape.to_vec(), data).map_err(|e| Error::corrupt(path, e))?;
    let bytes = safetensors::serialize([(SINGLE_ARRAY_NAME, view)], &None).map_err(|e| Error::corrupt(path, e))?;
    write_bytes(path, &bytes)
}

pub fn read_array_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::corrupt(path, e))?;
    let view = st
        .tensor(SINGLE_ARRAY_NAME)
        .map_err(|e| Error::corrupt(path, e))?;
    if view.dtype() != Dtype::U8 {
        return Err(Error::corrupt(path, format!("expected U8 data, found {:?}", view.dtype())));
    }
    Ok((view.shape().to_vec(), view.data().to_vec()))
}

/// Shape of the single array in a file, read from the header only.
pub fn array_shape(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_bytes(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::corrupt(path, e))?;
    meta.info(SINGLE_ARRAY_NAME)
        .map(|i| i.shape.clone())
        .ok_or_else(|| Error::corrupt(path, "missing tensor `data`"))
}
