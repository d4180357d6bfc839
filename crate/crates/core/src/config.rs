//! Scene configuration: a versioned JSON document describing the field, iso
//! levels, feature planes, decoder, camera and render settings. Unknown keys
//! are rejected, referenced files must exist at load time, and building the
//! scene re-runs every constructor check.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blob::{load_latent, load_mlp, load_planes, load_voxel};
use crate::detail::DetailVoxel;
use crate::error::{Error, Result};
use crate::field::{IsoLevels, ScalarField};
use crate::fit::CoarseModel;
use crate::geometry::{Camera, CameraMode};
use crate::intersect::{IntersectMode, SolverParams};
use crate::math::{Mat3, Vec3};
use crate::mlp::Mlp;
use crate::radiance::{CoarseGenerator, PlaneShape, TriPlaneScene};
use crate::render::RenderParams;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Sphere { center: [f64; 3] },
    Plane { normal: [f64; 3] },
    RadialEllipsoid { matrix: [[f64; 3]; 3] },
    /// Path to an MLP blob descriptor (3 inputs, 1 output).
    Mlp { weights: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlaneSpec {
    /// Planes from the seeded affine generator, driven by a latent code blob
    /// or the mean code when absent.
    Seeded {
        resolution: u32,
        channels: usize,
        extent: f64,
        layers: usize,
        latent_dim: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        code: Option<String>,
    },
    /// Plane tensors from a blob descriptor.
    File { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderSpec {
    Seeded { dims: Vec<usize>, seed: u64 },
    File { path: String },
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub mode: CameraMode,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    /// Vertical field of view in radians; pinhole only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_y: Option<f64>,
    /// Half of the vertical image-plane extent; orthographic only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_height: Option<f64>,
    pub near: f64,
    pub far: f64,
}

impl CameraSpec {
    pub fn build(&self) -> Result<Camera> {
        let v = Vec3::from_array;
        let rotation = Camera::look_at_rotation(v(self.position), v(self.look_at), v(self.up))?;
        match self.mode {
            CameraMode::Pinhole => {
                let fov = self
                    .fov_y
                    .ok_or_else(|| Error::Config("pinhole camera needs fov_y".into()))?;
                Camera::pinhole(v(self.position), rotation, fov, self.near, self.far)
            }
            CameraMode::Orthographic => {
                let hh = self
                    .half_height
                    .ok_or_else(|| Error::Config("orthographic camera needs half_height".into()))?;
                Camera::orthographic(v(self.position), rotation, hh, self.near, self.far)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub color: [f64; 3],
    /// Treat the farthest iso level as an opaque backdrop.
    #[serde(default)]
    pub manifold: bool,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec { color: [0.0; 3], manifold: false }
    }
}

fn default_factor() -> u32 {
    4
}

fn default_steps() -> u32 {
    SolverParams::default().steps
}

fn default_tol() -> f64 {
    SolverParams::default().tol
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionSpec {
    /// Force the exact full-resolution path regardless of `factor`.
    #[serde(default)]
    pub exact: bool,
    #[serde(default = "default_factor")]
    pub factor: u32,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for IntersectionSpec {
    fn default() -> Self {
        IntersectionSpec { exact: false, factor: default_factor(), steps: default_steps(), tol: default_tol() }
    }
}

impl IntersectionSpec {
    pub fn mode(&self) -> IntersectMode {
        if self.exact {
            IntersectMode::Exact
        } else {
            IntersectMode::LowRes { factor: self.factor }
        }
    }

    pub fn solver(&self) -> SolverParams {
        SolverParams { steps: self.steps, tol: self.tol }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub version: u32,
    pub field: FieldSpec,
    pub iso_levels: Vec<f64>,
    pub planes: PlaneSpec,
    pub decoder: DecoderSpec,
    /// Optional detail voxel blob descriptor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub camera: CameraSpec,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub background: BackgroundSpec,
    #[serde(default)]
    pub intersection: IntersectionSpec,
}

/// A config materialized into engine types, ready to render.
#[derive(Clone, Debug)]
pub struct BuiltScene {
    pub scene: TriPlaneScene,
    pub camera: Camera,
    pub width: u32,
    pub height: u32,
    pub params: RenderParams,
    pub voxel: Option<DetailVoxel>,
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<SceneConfig> {
        let config: SceneConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if config.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Parse a config file and check that every referenced file exists,
    /// resolving relative paths against the config's directory.
    pub fn load(path: &Path) -> Result<SceneConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config = SceneConfig::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for file in config.referenced_files() {
            let resolved = resolve(base, &file);
            if !resolved.is_file() {
                return Err(Error::Config(format!(
                    "referenced file {} does not exist",
                    resolved.display()
                )));
            }
        }
        Ok(config)
    }

    fn referenced_files(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let FieldSpec::Mlp { weights } = &self.field {
            out.push(weights.clone());
        }
        match &self.planes {
            PlaneSpec::Seeded { code: Some(c), .. } => out.push(c.clone()),
            PlaneSpec::File { path } => out.push(path.clone()),
            PlaneSpec::Seeded { .. } => {}
        }
        if let DecoderSpec::File { path } = &self.decoder {
            out.push(path.clone());
        }
        if let Some(d) = &self.detail {
            out.push(d.clone());
        }
        out
    }

    fn build_field(&self, base: &Path) -> Result<ScalarField> {
        match &self.field {
            FieldSpec::Sphere { center } => Ok(ScalarField::sphere(Vec3::from_array(*center))),
            FieldSpec::Plane { normal } => ScalarField::plane(Vec3::from_array(*normal)),
            FieldSpec::RadialEllipsoid { matrix } => {
                ScalarField::radial_ellipsoid(Mat3 { m: *matrix })
            }
            FieldSpec::Mlp { weights } => ScalarField::mlp(load_mlp(&resolve(base, weights))?),
        }
    }

    fn build_decoder(&self, base: &Path) -> Result<Mlp> {
        match &self.decoder {
            DecoderSpec::Seeded { dims, seed } => Mlp::seeded(dims, *seed),
            DecoderSpec::File { path } => load_mlp(&resolve(base, path)),
        }
    }

    /// The frozen generator-side model that latent inversion optimizes over.
    /// File-backed planes carry no generator, so they cannot be inverted.
    pub fn coarse_model(&self, base: &Path) -> Result<CoarseModel> {
        let PlaneSpec::Seeded { resolution, channels, extent, layers, latent_dim, seed, .. } =
            &self.planes
        else {
            return Err(Error::Config(
                "latent fitting needs seeded planes; a plane file has no generator".into(),
            ));
        };
        let shape = PlaneShape { resolution: *resolution, channels: *channels, extent: *extent };
        let generator = CoarseGenerator::new(shape, *layers, *latent_dim, *seed)?;
        CoarseModel::new(
            self.build_field(base)?,
            IsoLevels::new(self.iso_levels.clone())?,
            generator,
            self.build_decoder(base)?,
        )
    }

    /// Instantiate every engine object the config describes; all the module
    /// constructors re-run their invariant checks here.
    pub fn build(&self, base: &Path) -> Result<BuiltScene> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("render resolution must be positive".into()));
        }
        if self.intersection.factor == 0 {
            return Err(Error::Config("intersection factor must be at least 1".into()));
        }
        let field = self.build_field(base)?;
        let levels = IsoLevels::new(self.iso_levels.clone())?;
        let planes = match &self.planes {
            PlaneSpec::Seeded { resolution, channels, extent, layers, latent_dim, seed, code } => {
                let shape =
                    PlaneShape { resolution: *resolution, channels: *channels, extent: *extent };
                let generator = CoarseGenerator::new(shape, *layers, *latent_dim, *seed)?;
                let code = match code {
                    Some(c) => load_latent(&resolve(base, c))?,
                    None => generator.mean_code(),
                };
                generator.generate(&code)?
            }
            PlaneSpec::File { path } => load_planes(&resolve(base, path))?,
        };
        let decoder = self.build_decoder(base)?;
        let scene = TriPlaneScene::new(field, levels, planes, decoder)?;
        let camera = self.camera.build()?;
        let voxel = match &self.detail {
            Some(d) => Some(load_voxel(&resolve(base, d))?),
            None => None,
        };
        let params = RenderParams {
            mode: self.intersection.mode(),
            solver: self.intersection.solver(),
            background: self.background.color,
            background_manifold: self.background.manifold,
        };
        Ok(BuiltScene { scene, camera, width: self.width, height: self.height, params, voxel })
    }
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
