//! Subcommand implementations. Each returns the exit status it wants.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rigfit_core::evaluate::{self, Categories, MetricKind};
use rigfit_core::fit_multi::{self, MultiFitConfig};
use rigfit_core::fit_single::{self, FitConfig};
use rigfit_core::formats::{
    self, Bundle, CameraSet, Document, EvalReport, FitReport, FrameObservations, GmmSpec, GroundTruth,
    MultiFitReport, ReportMeta, Status,
};
use rigfit_core::synth::{self, RenderConfig, SceneConfig};
use rigfit_core::{Error, GmmPrior, KinematicRig, RigDefinition, RigParams};

use crate::{service, CliError};

/// `-` writes to stdout.
pub fn emit<T: Document>(out: &Path, doc: &T) -> Result<(), CliError> {
    let text = formats::to_json(doc)?;
    if out == Path::new("-") {
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(text.as_bytes()).map_err(Error::from)?;
        stdout.flush().map_err(Error::from)?;
    } else {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::from)?;
        }
        fs::write(out, text).map_err(Error::from)?;
        log::info!("wrote {}", out.display());
    }
    Ok(())
}

fn load_prior(path: Option<&Path>) -> Result<Option<GmmPrior>, CliError> {
    Ok(match path {
        Some(p) => Some(formats::read::<GmmSpec>(p)?.build()?),
        None => None,
    })
}

pub struct SynthArgs {
    pub seed: u64,
    pub rig_seed: u64,
    pub cameras: usize,
    pub frames: usize,
    pub noise: f64,
    pub outliers: f64,
    pub occlusion: f64,
    pub out: PathBuf,
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SceneConfig {
        seed: a.seed,
        cameras: a.cameras,
        frames: a.frames,
        render: RenderConfig {
            noise_px: a.noise,
            outlier_rate: a.outliers,
            occlusion_rate: a.occlusion,
        },
        ..SceneConfig::default()
    };
    cfg.validate()?;
    let rig = synth::make_default_rig(a.rig_seed);
    let scene = synth::make_scene(&rig, &cfg)?;
    formats::write_bundle(&a.out, &Bundle::from_scene(&scene, Some(&cfg)))?;
    log::info!("wrote {} frames x {} views to {}", a.frames, a.cameras, a.out.display());
    Ok(())
}

pub struct FitSingleArgs {
    pub rig: PathBuf,
    pub obs: PathBuf,
    pub camera: PathBuf,
    pub view: usize,
    pub init: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn fit_single(a: &FitSingleArgs) -> Result<(), CliError> {
    let rig = KinematicRig::new(formats::read::<RigDefinition>(&a.rig)?)?;
    let frame: FrameObservations = formats::read(&a.obs)?;
    let cams: CameraSet = formats::read(&a.camera)?;
    let cfg = match &a.config {
        Some(p) => formats::read::<FitConfig>(p)?,
        None => FitConfig::default(),
    };
    cfg.validate()?;
    let view_err = |n: usize, what: &str| {
        CliError::Config(format!("view {} out of range: {what} has {n} views", a.view))
    };
    let camera = cams.cameras.get(a.view).ok_or_else(|| view_err(cams.cameras.len(), "camera file"))?;
    let obs = frame.views.get(a.view).ok_or_else(|| view_err(frame.views.len(), "observation file"))?;
    for o in obs {
        o.validate(&rig)?;
    }
    let init = match &a.init {
        Some(p) => formats::read::<RigParams>(p)?,
        None => service::default_init(&rig),
    };
    init.validate(&rig)?;
    let gt = match &a.gt {
        Some(p) => {
            let gt: GroundTruth = formats::read(p)?;
            let rec = gt.frames.get(frame.frame).cloned().ok_or_else(|| {
                CliError::Config(format!("ground truth has no frame {}", frame.frame))
            })?;
            Some(rec)
        }
        None => None,
    };
    let prior = load_prior(a.prior.as_deref())?;
    let meta = ReportMeta::new(&cfg);
    let outcome = fit_single::fit_single_view(&rig, &init, camera, obs, prior.as_ref(), &cfg).and_then(|r| {
        let evaluation = match &gt {
            Some(rec) => Some(evaluate::evaluate_sample(
                &rig,
                &frame.frame.to_string(),
                &r.params,
                rec,
                std::slice::from_ref(camera),
                &MetricKind::ALL,
            )?),
            None => None,
        };
        Ok((r, evaluation))
    });
    match outcome {
        Ok((result, evaluation)) => emit(
            &a.out,
            &FitReport {
                meta,
                status: Status::Ok,
                error: None,
                result: Some(result),
                evaluation,
            },
        ),
        Err(e) => {
            let stub = FitReport {
                meta,
                status: Status::Failed,
                error: Some(e.to_string()),
                result: None,
                evaluation: None,
            };
            emit(&a.out, &stub)?;
            Err(e.into())
        }
    }
}

pub struct FitMultiArgs {
    pub scene: PathBuf,
    pub config: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn fit_multi(a: &FitMultiArgs) -> Result<(), CliError> {
    let bundle = formats::read_bundle(&a.scene)?;
    let cfg = match &a.config {
        Some(p) => formats::read::<MultiFitConfig>(p)?,
        None => MultiFitConfig::default(),
    };
    cfg.validate()?;
    let prior = load_prior(a.prior.as_deref())?;
    let meta = ReportMeta::new(&cfg);
    let seq = &bundle.sequence;
    let outcome = fit_multi::fit_multi_view(&bundle.rig, seq, prior.as_ref(), &cfg).and_then(|r| {
        let evaluation = match &bundle.gt {
            Some(gt) => {
                let pred: Vec<RigParams> = r.frames.iter().map(|f| f.params.clone()).collect();
                Some(evaluate::evaluate_frames(
                    &bundle.rig,
                    &pred,
                    &gt.frames,
                    &seq.cameras,
                    &MetricKind::ALL,
                    None,
                )?)
            }
            None => None,
        };
        Ok((r, evaluation))
    });
    match outcome {
        Ok((result, evaluation)) => emit(
            &a.out,
            &MultiFitReport {
                meta,
                status: Status::Ok,
                error: None,
                result: Some(result),
                evaluation,
            },
        ),
        Err(e) => {
            let stub = MultiFitReport {
                meta,
                status: Status::Failed,
                error: Some(e.to_string()),
                result: None,
                evaluation: None,
            };
            emit(&a.out, &stub)?;
            Err(e.into())
        }
    }
}

pub struct EvalArgs {
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub rig: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub metrics: Option<String>,
    pub categories: Option<PathBuf>,
    pub out: PathBuf,
}

/// Settings an evaluation report is hashed over.
#[derive(serde::Serialize)]
struct EvalSettings<'a> {
    metrics: &'a [MetricKind],
    categories: Option<&'a Categories>,
}

/// Rig and cameras default to the files next to the ground truth.
pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let dir = a.gt.parent().unwrap_or(Path::new("."));
    let rig_path = a.rig.clone().unwrap_or_else(|| dir.join("rig.json"));
    let rig = KinematicRig::new(formats::read::<RigDefinition>(&rig_path)?)?;
    let gt: GroundTruth = formats::read(&a.gt)?;
    let pred = formats::load_frame_params(&a.pred)?;
    for p in &pred {
        p.validate(&rig)?;
    }
    let metrics = match &a.metrics {
        Some(s) => evaluate::parse_metric_list(s)?,
        None => MetricKind::ALL.to_vec(),
    };
    let cam_path = a.cameras.clone().or_else(|| {
        let p = dir.join("cameras.json");
        p.exists().then_some(p)
    });
    let cameras = match cam_path {
        Some(p) => formats::read::<CameraSet>(&p)?.cameras,
        None => Vec::new(),
    };
    let categories = match &a.categories {
        Some(p) => Some(formats::read::<Categories>(p)?),
        None => None,
    };
    let evaluation = evaluate::evaluate_frames(&rig, &pred, &gt.frames, &cameras, &metrics, categories.as_ref())?;
    let meta = ReportMeta::new(&EvalSettings {
        metrics: &metrics,
        categories: categories.as_ref(),
    });
    emit(&a.out, &EvalReport { meta, evaluation })
}

/// Writes one schema file per document kind, plus the service bodies.
pub fn schemas(out: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(out).map_err(Error::from)?;
    let mut written = Vec::new();
    let mut all = formats::schemas();
    all.extend(service::schemas());
    for (name, schema) in all {
        let path = out.join(format!("{name}.schema.json"));
        let mut text = serde_json::to_string_pretty(&schema).expect("schemas serialize");
        text.push('\n');
        fs::write(&path, text).map_err(Error::from)?;
        written.push(path);
    }
    Ok(written)
}
