//! Binary parameter archives and checkpoint files.
//!
//! The archive is a flat, versioned encoding of a [`ParameterSet`]: a magic
//! tag, a format version, then per tensor its name, shape, and raw
//! little-endian `f32` values. The same bytes serve as the model payload of
//! runtime messages, so "what goes on disk" and "what goes over the wire"
//! cannot drift apart.
//!
//! A checkpoint on disk is the archive plus a JSON manifest alongside it
//! (same path with `.manifest.json` appended) recording the architecture and
//! the tensor table, so a parameter file is self-describing.

use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::params::ParameterSet;
use crate::{cast, Scalar};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"FSAR";
pub const ARCHIVE_VERSION: u16 = 1;

/// Serialize a parameter set. Values are stored as `f32` regardless of the
/// working precision.
pub fn encode_params<F: Scalar>(params: &ParameterSet<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 4);
    out.extend_from_slice(&ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.ndim() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.iter() {
            out.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
        }
    }
    out
}

/// Byte reader that reports the offset of whatever it failed to read.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode {
                offset: self.pos,
                reason: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Decode an archive produced by [`encode_params`], materializing values in
/// the requested scalar type.
pub fn decode_params<F: Scalar>(bytes: &[u8]) -> Result<ParameterSet<F>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "archive magic")?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::Decode {
            offset: 0,
            reason: format!("bad magic {magic:02x?}, not a parameter archive"),
        });
    }
    let version = r.u16("archive version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::WireVersion {
            got: version,
            expected: ARCHIVE_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name_start = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Decode {
                offset: name_start,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("tensor dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let data_start = r.pos;
        let raw = r.take(len * 4, "tensor values")?;
        let values: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| cast::<F>(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
            .collect();
        let tensor = ArrayD::from_shape_vec(shape, values).map_err(|e| Error::Decode {
            offset: data_start,
            reason: format!("tensor `{name}` shape/value mismatch: {e}"),
        })?;
        params.insert(name, tensor)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode {
            offset: r.pos,
            reason: format!("{} trailing bytes after archive", bytes.len() - r.pos),
        });
    }
    Ok(params)
}

/// Tensor table entry recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: ArchConfig,
    pub tensors: Vec<TensorInfo>,
}

fn manifest_path(archive: &Path) -> PathBuf {
    let mut name = archive
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    archive.with_file_name(name)
}

/// Write the archive and its manifest.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ParameterSet<F>,
    arch: &ArchConfig,
) -> Result<()> {
    std::fs::write(path, encode_params(params))?;
    let manifest = Manifest {
        arch: arch.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Read back an archive and its manifest, checking that the two agree.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(ParameterSet<F>, Manifest)> {
    let params = decode_params(&std::fs::read(path)?)?;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
    for info in &manifest.tensors {
        let t = params.get(&info.name).map_err(|_| {
            Error::SchemaMismatch(format!(
                "manifest lists `{}` but the archive lacks it",
                info.name
            ))
        })?;
        if t.shape() != info.shape.as_slice() {
            return Err(Error::SchemaMismatch(format!(
                "`{}`: archive shape {:?} vs manifest {:?}",
                info.name,
                t.shape(),
                info.shape
            )));
        }
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;

    fn sample_params() -> ParameterSet<f32> {
        let arch = test_arch();
        arch.init_params(77).unwrap()
    }

    fn test_arch() -> ArchConfig {
        ArchConfig {
            backbone: BackboneConfig::Mlp {
                in_dim: 4,
                hidden: vec![3],
            },
            embed_dim: 4,
            predictor_bottleneck: 2,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32() {
        let p = sample_params();
        let decoded: ParameterSet<f32> = decode_params(&encode_params(&p)).unwrap();
        assert_eq!(decoded.max_abs_diff(&p).unwrap(), 0.0);
        // Insertion order survives, which keeps downstream reductions
        // deterministic.
        let orig: Vec<&str> = p.names().collect();
        let back: Vec<&str> = decoded.names().collect();
        assert_eq!(orig, back);
    }

    #[test]
    fn truncation_reports_an_offset() {
        let bytes = encode_params(&sample_params());
        let err = decode_params::<f32>(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Decode { offset, reason } => {
                assert!(offset > 0);
                assert!(reason.contains("truncated"));
            }
            other => panic!("expected decode error, got {other}"),
        }
    }

    #[test]
    fn version_and_magic_are_enforced() {
        let mut bytes = encode_params(&sample_params());
        bytes[4] = 0xFF; // version low byte
        assert!(matches!(
            decode_params::<f32>(&bytes).unwrap_err(),
            Error::WireVersion { .. }
        ));

        let mut bytes = encode_params(&sample_params());
        bytes[0] = b'X';
        assert!(matches!(
            decode_params::<f32>(&bytes).unwrap_err(),
            Error::Decode { offset: 0, .. }
        ));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = encode_params(&sample_params());
        bytes.extend_from_slice(&[1, 2, 3]);
        let err = decode_params::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }

    #[test]
    fn checkpoint_files_round_trip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = sample_params();
        let arch = test_arch();
        save_checkpoint(&path, &p, &arch).unwrap();

        assert!(dir.path().join("model.ckpt.manifest.json").exists());
        let (loaded, manifest): (ParameterSet<f32>, _) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.max_abs_diff(&p).unwrap(), 0.0);
        assert_eq!(manifest.arch, arch);
        assert_eq!(manifest.tensors.len(), p.len());
    }

    #[test]
    fn f64_values_survive_via_f32_storage() {
        let mut p = ParameterSet::<f64>::new();
        p.insert("w", ndarray::arr1(&[0.5f64, -0.25, 2f64.powi(-10)]).into_dyn())
            .unwrap();
        let decoded: ParameterSet<f64> = decode_params(&encode_params(&p)).unwrap();
        // Dyadic values fit in f32, so the narrowing trip must be exact.
        assert_eq!(decoded.max_abs_diff(&p).unwrap(), 0.0);

        // A value that does *not* fit exactly is still within one f32 ulp.
        let mut q = ParameterSet::<f64>::new();
        q.insert("w", ndarray::arr1(&[1e-3f64]).into_dyn()).unwrap();
        let back: ParameterSet<f64> = decode_params(&encode_params(&q)).unwrap();
        assert!(back.max_abs_diff(&q).unwrap() < 1e-9);
    }
}
