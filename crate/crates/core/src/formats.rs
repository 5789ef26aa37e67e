//! Versioned JSON documents and the scene bundle layout.
//!
//! Every file is `{"schema": "rigfit/<kind>/v<major>[.<minor>]", "data": …}`.
//! Loaders accept any minor version of the major they know and reject the
//! rest before looking at `data`.

use std::fs;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::evaluate::{Categories, Evaluation, SampleMetrics};
use crate::fit_multi::{MultiFitConfig, MultiFitResult, MultiViewSequence};
use crate::fit_single::{FitConfig, FitResult, Observation2D};
use crate::priors::GmmPrior;
use crate::rig::{KinematicRig, RigDefinition, RigParams};
use crate::synth::{GtRecord, Scene, SceneConfig};

pub const TOOL: &str = "rigfit";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SCHEMA_MAJOR: u32 = 1;

/// A payload type with its own schema kind.
pub trait Document: Serialize + DeserializeOwned + JsonSchema {
    const KIND: &'static str;
}

pub fn schema_id(kind: &str) -> String {
    format!("{TOOL}/{kind}/v{SCHEMA_MAJOR}")
}

/// Splits `rigfit/<kind>/v<major>[.<minor>]` into kind and major version.
pub fn parse_schema_id(id: &str) -> Result<(String, u32)> {
    let bad = || Error::Schema {
        path: "schema".into(),
        message: format!("malformed schema id {id:?}"),
    };
    let mut parts = id.split('/');
    let (Some(tool), Some(kind), Some(ver), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    if tool != TOOL || kind.is_empty() {
        return Err(bad());
    }
    let ver = ver.strip_prefix('v').ok_or_else(bad)?;
    let major = ver.split('.').next().unwrap_or_default();
    let major: u32 = major.parse().map_err(|_| bad())?;
    if let Some(minor) = ver.split_once('.').map(|(_, m)| m) {
        minor.parse::<u32>().map_err(|_| bad())?;
    }
    Ok((kind.to_string(), major))
}

#[derive(Deserialize)]
struct Header {
    schema: String,
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    schema: String,
    data: &'a T,
}

#[derive(Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn<T> {
    #[allow(dead_code)]
    schema: String,
    data: T,
}

fn schema_error(origin: &str, e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    Error::Schema {
        path: if path == "." {
            origin.to_string()
        } else {
            format!("{origin}: {path}")
        },
        message: format!("{inner}"),
    }
}

/// Kind named by a document's schema field, after the version check.
pub fn peek_kind(text: &str, origin: &str) -> Result<String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let header: Header = serde_path_to_error::deserialize(de).map_err(|e| schema_error(origin, e))?;
    let (kind, major) = parse_schema_id(&header.schema).map_err(|e| match e {
        Error::Schema { message, .. } => Error::Schema {
            path: format!("{origin}: schema"),
            message,
        },
        other => other,
    })?;
    if major != SCHEMA_MAJOR {
        return Err(Error::Schema {
            path: format!("{origin}: schema"),
            message: format!("unsupported major version {major} of {kind:?}, this build reads v{SCHEMA_MAJOR}"),
        });
    }
    Ok(kind)
}

/// Parses a document; `origin` labels error paths (usually the file name).
pub fn from_json<T: Document>(text: &str, origin: &str) -> Result<T> {
    let kind = peek_kind(text, origin)?;
    if kind != T::KIND {
        return Err(Error::Schema {
            path: format!("{origin}: schema"),
            message: format!("expected a {:?} document, found {kind:?}", T::KIND),
        });
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let env: EnvelopeIn<T> = serde_path_to_error::deserialize(de).map_err(|e| schema_error(origin, e))?;
    Ok(env.data)
}

/// Pretty JSON with a trailing newline. Non-finite numbers are rejected
/// rather than written as `null`.
pub fn to_json<T: Document>(doc: &T) -> Result<String> {
    let raw = serde_value::to_value(doc).map_err(|e| Error::InvalidParam(format!("cannot serialize {}: {e}", T::KIND)))?;
    if let Some(path) = non_finite(&raw, String::from("data")) {
        return Err(Error::InvalidParam(format!("{}: non-finite number at {path}", T::KIND)));
    }
    let value = serde_json::to_value(EnvelopeOut {
        schema: schema_id(T::KIND),
        data: doc,
    })
    .map_err(|e| Error::InvalidParam(format!("cannot serialize {}: {e}", T::KIND)))?;
    let mut s = serde_json::to_string_pretty(&value).expect("values always serialize");
    s.push('\n');
    Ok(s)
}

fn non_finite(v: &serde_value::Value, at: String) -> Option<String> {
    use serde_value::Value as V;
    match v {
        V::F64(x) if !x.is_finite() => Some(at),
        V::F32(x) if !x.is_finite() => Some(at),
        V::Option(Some(inner)) | V::Newtype(inner) => non_finite(inner, at),
        V::Seq(items) => items.iter().enumerate().find_map(|(i, x)| non_finite(x, format!("{at}[{i}]"))),
        V::Map(m) => m.iter().find_map(|(k, x)| {
            let key = match k {
                V::String(s) => s.clone(),
                other => format!("{other:?}"),
            };
            non_finite(x, format!("{at}.{key}"))
        }),
        _ => None,
    }
}

pub fn read<T: Document>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    from_json(&text, &path.display().to_string())
}

pub fn write<T: Document>(path: &Path, doc: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_json(doc)?)?;
    Ok(())
}

/// Hex SHA-256 of the compact JSON form of a config.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl Document for RigDefinition {
    const KIND: &'static str = "rig";
}

impl Document for RigParams {
    const KIND: &'static str = "params";
}

impl Document for FitConfig {
    const KIND: &'static str = "fit-config";
}

impl Document for MultiFitConfig {
    const KIND: &'static str = "multi-fit-config";
}

impl Document for Categories {
    const KIND: &'static str = "categories";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CameraSet {
    pub cameras: Vec<Camera>,
    /// Capture rate, frames per second.
    pub fps: f64,
}

impl Document for CameraSet {
    const KIND: &'static str = "cameras";
}

/// One frame's observations, `views[i]` seen by camera `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FrameObservations {
    pub frame: usize,
    pub views: Vec<Vec<Observation2D>>,
}

impl Document for FrameObservations {
    const KIND: &'static str = "obs2d";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    /// Generator settings, when the bundle is synthetic.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scene: Option<SceneConfig>,
    pub keypoint_ids: Vec<usize>,
    pub frames: Vec<GtRecord>,
}

impl Document for GroundTruth {
    const KIND: &'static str = "gt";
}

/// File form of a [`GmmPrior`] over the non-root pose entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major full covariance per component.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl Document for GmmSpec {
    const KIND: &'static str = "gmm-prior";
}

impl GmmSpec {
    pub fn of(prior: &GmmPrior) -> Self {
        Self {
            weights: prior.weights().to_vec(),
            means: prior.means().iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: prior
                .covariances()
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        }
    }

    pub fn build(&self) -> Result<GmmPrior> {
        GmmPrior::new(self.weights.clone(), self.means.clone(), self.covariances.clone())
    }
}

/// Provenance stamped on every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ReportMeta {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
}

impl ReportMeta {
    pub fn new<C: Serialize>(config: &C) -> Self {
        Self {
            tool: TOOL.to_string(),
            version: TOOL_VERSION.to_string(),
            config_hash: config_hash(config),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FitReport {
    pub meta: ReportMeta,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result: Option<FitResult>,
    /// Scores against ground truth, when it was supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub evaluation: Option<SampleMetrics>,
}

impl Document for FitReport {
    const KIND: &'static str = "fit-report";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MultiFitReport {
    pub meta: ReportMeta,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result: Option<MultiFitResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub evaluation: Option<Evaluation>,
}

impl Document for MultiFitReport {
    const KIND: &'static str = "multi-fit-report";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub evaluation: Evaluation,
}

impl Document for EvalReport {
    const KIND: &'static str = "eval-report";
}

/// Per-frame parameters carried by any document that has them.
pub fn load_frame_params(path: &Path) -> Result<Vec<RigParams>> {
    let text = fs::read_to_string(path)?;
    let origin = path.display().to_string();
    let missing = |what: &str| Error::Schema {
        path: origin.clone(),
        message: format!("{what} carries no result"),
    };
    match peek_kind(&text, &origin)?.as_str() {
        k if k == RigParams::KIND => Ok(vec![from_json::<RigParams>(&text, &origin)?]),
        k if k == GroundTruth::KIND => Ok(from_json::<GroundTruth>(&text, &origin)?
            .frames
            .into_iter()
            .map(|r| r.params)
            .collect()),
        k if k == FitReport::KIND => {
            let r = from_json::<FitReport>(&text, &origin)?;
            Ok(vec![r.result.ok_or_else(|| missing("failed fit report"))?.params])
        }
        k if k == MultiFitReport::KIND => {
            let r = from_json::<MultiFitReport>(&text, &origin)?;
            let res = r.result.ok_or_else(|| missing("failed multi-view report"))?;
            Ok(res.frames.into_iter().map(|f| f.params).collect())
        }
        other => Err(Error::Schema {
            path: format!("{origin}: schema"),
            message: format!("a {other:?} document has no frame parameters"),
        }),
    }
}

/// File names inside a scene bundle directory.
pub struct BundlePaths {
    pub rig: PathBuf,
    pub cameras: PathBuf,
    pub frames: PathBuf,
    pub gt: PathBuf,
}

impl BundlePaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            rig: dir.join("rig.json"),
            cameras: dir.join("cameras.json"),
            frames: dir.join("frames"),
            gt: dir.join("gt.json"),
        }
    }

    pub fn frame(&self, t: usize) -> PathBuf {
        self.frames.join(format!("{t:06}.obs2d.json"))
    }
}

/// A scene bundle in memory.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub rig: KinematicRig,
    pub sequence: MultiViewSequence,
    pub gt: Option<GroundTruth>,
}

impl Bundle {
    pub fn from_scene(scene: &Scene, config: Option<&SceneConfig>) -> Self {
        Self {
            rig: scene.rig.clone(),
            sequence: MultiViewSequence {
                cameras: scene.cameras.clone(),
                frames: scene.frames.clone(),
                fps: scene.fps,
            },
            gt: Some(GroundTruth {
                scene: config.cloned(),
                keypoint_ids: scene.keypoint_ids.clone(),
                frames: scene.gt.clone(),
            }),
        }
    }
}

/// Writes rig, cameras, one observation file per frame and, when present,
/// the ground truth.
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    let p = BundlePaths::new(dir);
    fs::create_dir_all(&p.frames)?;
    write(&p.rig, bundle.rig.definition())?;
    write(
        &p.cameras,
        &CameraSet {
            cameras: bundle.sequence.cameras.clone(),
            fps: bundle.sequence.fps,
        },
    )?;
    for (t, views) in bundle.sequence.frames.iter().enumerate() {
        write(
            &p.frame(t),
            &FrameObservations {
                frame: t,
                views: views.clone(),
            },
        )?;
    }
    if let Some(gt) = &bundle.gt {
        write(&p.gt, gt)?;
    }
    Ok(())
}

/// Loads a bundle. Frame files are ordered by their `frame` field, which
/// must run 0..T without gaps; `gt.json` is optional.
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let p = BundlePaths::new(dir);
    let rig = KinematicRig::new(read::<RigDefinition>(&p.rig)?)?;
    let cams: CameraSet = read(&p.cameras)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&p.frames)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|f| f.to_string_lossy().ends_with(".obs2d.json"));
    let mut frames: Vec<FrameObservations> = files.iter().map(|f| read(f)).collect::<Result<_>>()?;
    frames.sort_by_key(|f| f.frame);
    for (t, f) in frames.iter().enumerate() {
        if f.frame != t {
            return Err(Error::Schema {
                path: p.frames.display().to_string(),
                message: format!("frame indices must run 0..{} without gaps; missing {t}", frames.len()),
            });
        }
    }
    let gt = if p.gt.exists() { Some(read::<GroundTruth>(&p.gt)?) } else { None };
    if let Some(g) = &gt {
        if g.frames.len() != frames.len() {
            return Err(Error::Schema {
                path: p.gt.display().to_string(),
                message: format!("{} ground-truth frames for {} observation frames", g.frames.len(), frames.len()),
            });
        }
    }
    let sequence = MultiViewSequence {
        cameras: cams.cameras,
        frames: frames.into_iter().map(|f| f.views).collect(),
        fps: cams.fps,
    };
    sequence.validate(&rig)?;
    Ok(Bundle { rig, sequence, gt })
}

/// JSON Schema of a whole document, envelope included.
pub fn json_schema<T: Document>() -> serde_json::Value {
    let mut s = serde_json::to_value(schemars::schema_for!(EnvelopeIn<T>)).expect("schemas serialize");
    s["title"] = schema_id(T::KIND).into();
    s["properties"]["schema"]["pattern"] = format!("^{TOOL}/{}/v{SCHEMA_MAJOR}(\\.[0-9]+)?$", T::KIND).into();
    s
}

/// Schemas of every document kind defined here.
pub fn schemas() -> Vec<(&'static str, serde_json::Value)> {
    vec![
        (RigDefinition::KIND, json_schema::<RigDefinition>()),
        (RigParams::KIND, json_schema::<RigParams>()),
        (CameraSet::KIND, json_schema::<CameraSet>()),
        (FrameObservations::KIND, json_schema::<FrameObservations>()),
        (GroundTruth::KIND, json_schema::<GroundTruth>()),
        (FitConfig::KIND, json_schema::<FitConfig>()),
        (MultiFitConfig::KIND, json_schema::<MultiFitConfig>()),
        (Categories::KIND, json_schema::<Categories>()),
        (GmmSpec::KIND, json_schema::<GmmSpec>()),
        (FitReport::KIND, json_schema::<FitReport>()),
        (MultiFitReport::KIND, json_schema::<MultiFitReport>()),
        (EvalReport::KIND, json_schema::<EvalReport>()),
    ]
}
