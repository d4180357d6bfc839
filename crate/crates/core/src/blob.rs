//! Flat-binary parameter files with JSON shape descriptors.
//!
//! Every learned tensor shares one on-disk format: a JSON descriptor naming
//! the shape, next to a raw file of little-endian 64-bit floats. Orders are
//! the in-memory flat layouts (layer-major for MLPs, plane order XY/XZ/YZ
//! for tri-planes, `((k*H + j)*W + i)*C + c` for detail voxels).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detail::DetailVoxel;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::mlp::Mlp;
use crate::radiance::{LatentCode, PlaneShape, TriPlanes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlobShape {
    Mlp {
        dims: Vec<usize>,
    },
    TriPlanes {
        resolution: u32,
        channels: usize,
        extent: f64,
    },
    LatentCode {
        layers: usize,
        dim: usize,
    },
    DetailVoxel {
        width: u32,
        height: u32,
        depth: u32,
        channels: usize,
        aspect: f64,
        camera: Camera,
    },
}

/// Descriptor stored at the path the user names; `data` is the binary file,
/// relative to the descriptor's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobHeader {
    pub data: String,
    pub shape: BlobShape,
}

fn read_io(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_io(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn values_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_values(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!(
            "{} has {} bytes, not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn data_path(descriptor: &Path, data: &str) -> std::path::PathBuf {
    descriptor.parent().unwrap_or_else(|| Path::new(".")).join(data)
}

/// Writes `<path>` (JSON descriptor) and a sibling binary file named after
/// the descriptor's stem with a `.bin` extension.
pub fn save_blob(path: &Path, shape: BlobShape, values: &[f64]) -> Result<()> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("cannot derive a data name from {}", path.display())))?;
    let data = format!("{stem}.bin");
    let header = BlobHeader { data: data.clone(), shape };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Config(format!("descriptor encode failed: {e}")))?;
    write_io(path, json.as_bytes())?;
    write_io(&data_path(path, &data), &values_to_bytes(values))
}

/// Reads a descriptor and its binary payload. The value count is checked
/// against the declared shape before anything is constructed.
pub fn load_blob(path: &Path) -> Result<(BlobShape, Vec<f64>)> {
    let text = read_io(path)?;
    let header: BlobHeader = serde_json::from_slice(&text)
        .map_err(|e| Error::Config(format!("bad descriptor {}: {e}", path.display())))?;
    let bin = data_path(path, &header.data);
    let values = bytes_to_values(&bin, &read_io(&bin)?)?;
    let expected = expected_len(&header.shape)?;
    if values.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} declares {expected} values, data file holds {}",
            path.display(),
            values.len()
        )));
    }
    Ok((header.shape, values))
}

fn expected_len(shape: &BlobShape) -> Result<usize> {
    Ok(match shape {
        BlobShape::Mlp { dims } => {
            if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
                return Err(Error::ShapeMismatch(format!("bad mlp dims {dims:?}")));
            }
            dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
        }
        BlobShape::TriPlanes { resolution, channels, extent } => {
            let ps = PlaneShape { resolution: *resolution, channels: *channels, extent: *extent };
            ps.validate()?;
            ps.total_len()
        }
        BlobShape::LatentCode { layers, dim } => {
            if *layers == 0 || *dim == 0 {
                return Err(Error::ShapeMismatch("latent code dims must be positive".into()));
            }
            layers * dim
        }
        BlobShape::DetailVoxel { width, height, depth, channels, aspect, camera } => {
            camera.validate()?;
            // Constructor re-checks, but failing before reading data gives
            // the caller the shape error rather than a length mismatch.
            let probe = DetailVoxel::zeros(*camera, *aspect, *width, *height, *depth, *channels)?;
            probe.param_len()
        }
    })
}

pub fn save_mlp(path: &Path, mlp: &Mlp) -> Result<()> {
    save_blob(path, BlobShape::Mlp { dims: mlp.dims() }, &mlp.flatten_params())
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    match load_blob(path)? {
        (BlobShape::Mlp { dims }, values) => Mlp::from_flat(&dims, &values),
        (other, _) => Err(Error::Config(format!("{} is not an mlp blob: {other:?}", path.display()))),
    }
}

pub fn save_planes(path: &Path, planes: &TriPlanes) -> Result<()> {
    let s = planes.shape;
    save_blob(
        path,
        BlobShape::TriPlanes { resolution: s.resolution, channels: s.channels, extent: s.extent },
        &planes.to_flat(),
    )
}

pub fn load_planes(path: &Path) -> Result<TriPlanes> {
    match load_blob(path)? {
        (BlobShape::TriPlanes { resolution, channels, extent }, values) => {
            TriPlanes::from_flat(PlaneShape { resolution, channels, extent }, &values)
        }
        (other, _) => Err(Error::Config(format!("{} is not a tri-plane blob: {other:?}", path.display()))),
    }
}

pub fn save_latent(path: &Path, code: &LatentCode) -> Result<()> {
    save_blob(path, BlobShape::LatentCode { layers: code.layers, dim: code.dim }, &code.data)
}

pub fn load_latent(path: &Path) -> Result<LatentCode> {
    match load_blob(path)? {
        (BlobShape::LatentCode { layers, dim }, data) => Ok(LatentCode { layers, dim, data }),
        (other, _) => Err(Error::Config(format!("{} is not a latent blob: {other:?}", path.display()))),
    }
}

pub fn save_voxel(path: &Path, voxel: &DetailVoxel) -> Result<()> {
    save_blob(
        path,
        BlobShape::DetailVoxel {
            width: voxel.width,
            height: voxel.height,
            depth: voxel.depth,
            channels: voxel.channels,
            aspect: voxel.aspect,
            camera: voxel.camera,
        },
        &voxel.data,
    )
}

pub fn load_voxel(path: &Path) -> Result<DetailVoxel> {
    match load_blob(path)? {
        (BlobShape::DetailVoxel { width, height, depth, channels, aspect, camera }, data) => {
            DetailVoxel::new(camera, aspect, width, height, depth, channels, data)
        }
        (other, _) => Err(Error::Config(format!("{} is not a voxel blob: {other:?}", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Mat3, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera::pinhole(Vec3::new(0.0, 0.0, -3.0), Mat3::IDENTITY, 0.8, 0.5, 8.0).unwrap()
    }

    #[test]
    fn every_kind_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);

        let mlp = Mlp::from_flat(
            &[7, 5, 4],
            &(0..7 * 5 + 5 + 5 * 4 + 4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let p = dir.path().join("decoder.json");
        save_mlp(&p, &mlp).unwrap();
        assert_eq!(load_mlp(&p).unwrap(), mlp);

        let shape = PlaneShape { resolution: 5, channels: 3, extent: 1.25 };
        let flat: Vec<f64> = (0..shape.total_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let planes = TriPlanes::from_flat(shape, &flat).unwrap();
        let p = dir.path().join("planes.json");
        save_planes(&p, &planes).unwrap();
        assert_eq!(load_planes(&p).unwrap(), planes);

        let code = LatentCode::seeded_normal(3, 4, 11);
        let p = dir.path().join("code.json");
        save_latent(&p, &code).unwrap();
        assert_eq!(load_latent(&p).unwrap(), code);

        let n = 4 * 3 * 2 * 2;
        let voxel = DetailVoxel::new(
            camera(),
            1.0,
            4,
            3,
            2,
            2,
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let p = dir.path().join("voxel.json");
        save_voxel(&p, &voxel).unwrap();
        let back = load_voxel(&p).unwrap();
        assert_eq!(back.data, voxel.data);
        assert_eq!(back.camera, voxel.camera);
        assert_eq!(
            (back.width, back.height, back.depth, back.channels, back.aspect),
            (4, 3, 2, 2, 1.0)
        );
    }

    #[test]
    fn exact_bit_pattern_survives() {
        let dir = tempfile::tempdir().unwrap();
        let values = vec![0.1 + 0.2, f64::MIN_POSITIVE, -0.0, 1e300];
        let p = dir.path().join("code.json");
        save_blob(&p, BlobShape::LatentCode { layers: 1, dim: 4 }, &values).unwrap();
        let (_, back) = load_blob(&p).unwrap();
        for (a, b) in back.iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn length_mismatch_is_rejected_before_construction() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("code.json");
        save_blob(&p, BlobShape::LatentCode { layers: 2, dim: 3 }, &[0.0; 5]).unwrap();
        assert!(matches!(load_blob(&p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("code.json");
        save_latent(&p, &LatentCode::zeros(2, 3)).unwrap();
        assert!(load_mlp(&p).is_err());
    }

    #[test]
    fn missing_and_truncated_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.json");
        assert!(matches!(load_blob(&p), Err(Error::Io { .. })));

        let p = dir.path().join("code.json");
        save_latent(&p, &LatentCode::zeros(1, 2)).unwrap();
        std::fs::write(dir.path().join("code.bin"), [0u8; 12]).unwrap();
        assert!(matches!(load_blob(&p), Err(Error::Config(_))));
    }
}
