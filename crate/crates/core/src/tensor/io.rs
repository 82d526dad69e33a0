//! Raw tensor container: a little-endian blob (`*.bin`) next to a JSON
//! manifest (`*.json`) carrying `{dtype, shape, order}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
}

pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: Scalar>(manifest: &ContainerManifest, bytes: &[u8]) -> Result<Tensor<T>> {
    if manifest.order != "row-major" {
        return Err(Error::format(format!("unsupported order {:?}", manifest.order)));
    }
    let n: usize = manifest.shape.iter().product();
    let data: Vec<f64> = match manifest.dtype.as_str() {
        "f32" => read_all::<f32>(bytes, n)?,
        "f64" => read_all::<f64>(bytes, n)?,
        other => return Err(Error::format(format!("unsupported dtype {other:?}"))),
    };
    let t = Tensor::new(&manifest.shape, data)?.cast::<T>();
    if t.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::format("container value not representable"));
    }
    Ok(t)
}

fn read_all<S: Scalar>(bytes: &[u8], n: usize) -> Result<Vec<f64>> {
    if bytes.len() != n * S::BYTES {
        return Err(Error::format(format!(
            "blob has {} bytes, manifest implies {}",
            bytes.len(),
            n * S::BYTES
        )));
    }
    Ok(bytes
        .chunks_exact(S::BYTES)
        .map(|c| S::read_le(c).to_f64().unwrap())
        .collect())
}

/// Writes `bin` and its adjacent manifest.
pub fn save<T: Scalar>(t: &Tensor<T>, bin: &Path) -> Result<()> {
    let manifest = ContainerManifest {
        dtype: T::DTYPE.to_string(),
        shape: t.shape().to_vec(),
        order: "row-major".to_string(),
    };
    fs::write(bin, encode(t))?;
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(e.to_string()))?;
    fs::write(manifest_path(bin), text + "\n")?;
    Ok(())
}

/// Reads a container, converting to `T` if the stored dtype differs.
pub fn load<T: Scalar>(bin: &Path) -> Result<Tensor<T>> {
    let text = fs::read_to_string(manifest_path(bin))?;
    let manifest: ContainerManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
    decode(&manifest, &fs::read(bin)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let t = Tensor::<f32>::new(&[2, 2], vec![1.0, -2.5, 3.0, 0.125]).unwrap();
        save(&t, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16);
        let m: ContainerManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("w.json")).unwrap()).unwrap();
        assert_eq!(m.dtype, "f32");
        assert_eq!(m.order, "row-major");
        assert_eq!(load::<f32>(&path).unwrap(), t);
        assert_eq!(load::<f64>(&path).unwrap(), t.cast::<f64>());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let m = ContainerManifest {
            dtype: "f64".into(),
            shape: vec![3],
            order: "row-major".into(),
        };
        assert!(decode::<f64>(&m, &[0u8; 16]).is_err());
    }
}
