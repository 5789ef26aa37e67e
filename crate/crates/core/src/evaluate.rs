//! Evaluation reports: per-sample metrics over fitted parameters, with
//! aggregates overall and per category label.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::metrics::{self, Align, PCK_THRESHOLDS};
use crate::rig::{KinematicRig, RigParams};
use crate::synth::GtRecord;

/// F-score distances, meters.
pub const FSCORE_DISTANCES: [f64; 2] = [0.005, 0.015];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Mpjpe,
    PaMpjpe,
    Pve,
    Pck,
    Fscore,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Mpjpe,
        MetricKind::PaMpjpe,
        MetricKind::Pve,
        MetricKind::Pck,
        MetricKind::Fscore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mpjpe => "mpjpe",
            MetricKind::PaMpjpe => "pa-mpjpe",
            MetricKind::Pve => "pve",
            MetricKind::Pck => "pck",
            MetricKind::Fscore => "fscore",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown metric {s:?}")))
    }
}

/// Parses a comma-separated metric list; duplicates collapse.
pub fn parse_metric_list(s: &str) -> Result<Vec<MetricKind>> {
    let mut out: Vec<MetricKind> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::InvalidParam("empty metric list".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PckScores {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub avg: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SampleMetrics {
    pub id: String,
    /// Pelvis-aligned.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mpjpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mpjpe_abs_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pa_mpjpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pve_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f15: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pck_body: Option<PckScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pck_feet: Option<PckScores>,
}

/// Means over the samples where each metric is defined.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Aggregate {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mpjpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mpjpe_abs_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pa_mpjpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pve_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f15: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pck_body: Option<PckScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pck_feet: Option<PckScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Evaluation {
    pub metrics: Vec<MetricKind>,
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
    pub categories: BTreeMap<String, Aggregate>,
}

/// Free-form labels per sample id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Categories {
    pub labels: BTreeMap<String, Vec<String>>,
}

fn geometry(rig: &KinematicRig, rec: &GtRecord, ids: &[usize]) -> Result<Vec<[f64; 3]>> {
    let nj = rig.joint_count();
    ids.iter()
        .map(|&id| {
            if id < nj {
                rec.joints.get(id).copied()
            } else {
                rec.vertices.get(id - nj).copied()
            }
            .ok_or_else(|| Error::MissingKeypoint(format!("keypoint id {id} not in record")))
        })
        .collect()
}

fn project_all(cam: &Camera, pts: &[[f64; 3]]) -> (Vec<[f64; 2]>, Vec<bool>) {
    pts.iter()
        .map(|p| match cam.project(*p) {
            Ok(uv) => (uv, true),
            Err(_) => ([f64::INFINITY; 2], false),
        })
        .unzip()
}

/// PCK over all views, averaged across the views where it is defined.
fn pck_views(cameras: &[Camera], pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Option<PckScores>> {
    let mut sums = [0.0; 5];
    let mut n = 0usize;
    for cam in cameras {
        let (p2, _) = project_all(cam, pred);
        let (g2, vis) = project_all(cam, gt);
        let Some(side) = metrics::bbox_side(&g2, &vis).filter(|s| *s > 0.0) else {
            continue;
        };
        let mut vals = [0.0; 5];
        let mut ok = true;
        for (v, a) in vals.iter_mut().zip(PCK_THRESHOLDS) {
            match metrics::pck(&p2, &g2, &vis, side, a)? {
                Some(x) => *v = x,
                None => ok = false,
            }
        }
        if ok {
            n += 1;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
        }
    }
    Ok((n > 0).then(|| {
        let values: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        PckScores {
            thresholds: PCK_THRESHOLDS.to_vec(),
            avg: values.iter().sum::<f64>() / values.len() as f64,
            values,
        }
    }))
}

/// Metrics of one predicted frame against its ground-truth record.
pub fn evaluate_sample(
    rig: &KinematicRig,
    id: &str,
    pred: &RigParams,
    gt: &GtRecord,
    cameras: &[Camera],
    which: &[MetricKind],
) -> Result<SampleMetrics> {
    let pred_rec = GtRecord::new(rig, pred)?;
    let maps = rig.keypoint_maps();
    let pj = geometry(rig, &pred_rec, &maps.eval24)?;
    let gj = geometry(rig, gt, &maps.eval24)?;
    let root = maps.eval24.iter().position(|&k| k == 0);
    let mut out = SampleMetrics {
        id: id.to_string(),
        ..Default::default()
    };
    for m in which {
        match m {
            MetricKind::Mpjpe => {
                out.mpjpe_abs_mm = Some(metrics::mpjpe(&pj, &gj, Align::None)?);
                out.mpjpe_mm = Some(metrics::mpjpe(&pj, &gj, root.map_or(Align::None, Align::Root))?);
            }
            MetricKind::PaMpjpe => out.pa_mpjpe_mm = Some(metrics::pa_mpjpe(&pj, &gj)?),
            MetricKind::Pve => {
                out.pve_mm = Some(metrics::pve(
                    &pred_rec.vertices,
                    &gt.vertices,
                    pred_rec.joints[0],
                    gt.joints[0],
                )?)
            }
            MetricKind::Fscore => {
                out.f5 = Some(metrics::fscore(&pred_rec.vertices, &gt.vertices, FSCORE_DISTANCES[0])?.f);
                out.f15 = Some(metrics::fscore(&pred_rec.vertices, &gt.vertices, FSCORE_DISTANCES[1])?.f);
            }
            MetricKind::Pck => {
                let body = |rec: &GtRecord| geometry(rig, rec, &maps.body17);
                let feet = |rec: &GtRecord| geometry(rig, rec, &maps.feet6);
                out.pck_body = pck_views(cameras, &body(&pred_rec)?, &body(gt)?)?;
                out.pck_feet = pck_views(cameras, &feet(&pred_rec)?, &feet(gt)?)?;
            }
        }
    }
    Ok(out)
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn mean_pck<'a>(scores: impl Iterator<Item = &'a PckScores> + Clone) -> Option<PckScores> {
    let n = scores.clone().count();
    if n == 0 {
        return None;
    }
    let mut values = vec![0.0; PCK_THRESHOLDS.len()];
    let mut avg = 0.0;
    for s in scores {
        for (a, v) in values.iter_mut().zip(&s.values) {
            *a += v / n as f64;
        }
        avg += s.avg / n as f64;
    }
    Some(PckScores {
        thresholds: PCK_THRESHOLDS.to_vec(),
        values,
        avg,
    })
}

pub fn aggregate<'a>(samples: impl Iterator<Item = &'a SampleMetrics> + Clone) -> Aggregate {
    Aggregate {
        count: samples.clone().count(),
        mpjpe_mm: mean(samples.clone().filter_map(|s| s.mpjpe_mm)),
        mpjpe_abs_mm: mean(samples.clone().filter_map(|s| s.mpjpe_abs_mm)),
        pa_mpjpe_mm: mean(samples.clone().filter_map(|s| s.pa_mpjpe_mm)),
        pve_mm: mean(samples.clone().filter_map(|s| s.pve_mm)),
        f5: mean(samples.clone().filter_map(|s| s.f5)),
        f15: mean(samples.clone().filter_map(|s| s.f15)),
        pck_body: mean_pck(samples.clone().filter_map(|s| s.pck_body.as_ref())),
        pck_feet: mean_pck(samples.filter_map(|s| s.pck_feet.as_ref())),
    }
}

/// Scores a predicted sequence frame by frame. Sample ids are frame indices;
/// `categories` labels refer to them.
pub fn evaluate_frames(
    rig: &KinematicRig,
    pred: &[RigParams],
    gt: &[GtRecord],
    cameras: &[Camera],
    which: &[MetricKind],
    categories: Option<&Categories>,
) -> Result<Evaluation> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            what: "frame count",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if which.contains(&MetricKind::Pck) && cameras.is_empty() {
        return Err(Error::InvalidParam("PCK needs at least one camera".into()));
    }
    let samples = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(t, (p, g))| evaluate_sample(rig, &t.to_string(), p, g, cameras, which))
        .collect::<Result<Vec<_>>>()?;
    let mut by_label: BTreeMap<String, Vec<&SampleMetrics>> = BTreeMap::new();
    if let Some(c) = categories {
        for (id, labels) in &c.labels {
            let Some(s) = samples.iter().find(|s| &s.id == id) else {
                return Err(Error::InvalidParam(format!("category labels for unknown sample {id:?}")));
            };
            for l in labels {
                by_label.entry(l.clone()).or_default().push(s);
            }
        }
    }
    let categories = by_label
        .into_iter()
        .map(|(l, ss)| (l, aggregate(ss.into_iter())))
        .collect();
    Ok(Evaluation {
        metrics: which.to_vec(),
        aggregate: aggregate(samples.iter()),
        samples,
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera;
    use crate::rig;
    use crate::synth::{self, PoseSampler};

    fn setup() -> (KinematicRig, Vec<Camera>, Vec<RigParams>, Vec<GtRecord>) {
        let rig = synth::make_default_rig(0);
        let k = camera::intrinsics_from_fov(50.0, 1024, 1024).unwrap();
        let cams = camera::camera_ring(2, 3.5, [0.0, 0.9, 0.0], &k);
        let params: Vec<RigParams> = (0..3)
            .map(|s| synth::sample_params(&rig, &PoseSampler::Natural { spread: 0.25 }, s))
            .collect();
        let gt = params.iter().map(|p| GtRecord::new(&rig, p).unwrap()).collect();
        (rig, cams, params, gt)
    }

    #[test]
    fn metric_names_round_trip() {
        for m in MetricKind::ALL {
            assert_eq!(m.name().parse::<MetricKind>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert_eq!(parse_metric_list("pck, mpjpe,pck").unwrap(), vec![MetricKind::Mpjpe, MetricKind::Pck]);
        assert!(parse_metric_list("mpjpe,bogus").is_err());
        assert!(parse_metric_list(" , ").is_err());
    }

    #[test]
    fn perfect_prediction_scores_perfectly() {
        let (rig, cams, params, gt) = setup();
        let e = evaluate_frames(&rig, &params, &gt, &cams, &MetricKind::ALL, None).unwrap();
        for s in e.samples.iter().map(|s| (s.mpjpe_mm, s.mpjpe_abs_mm, s.pa_mpjpe_mm, s.pve_mm)) {
            for v in [s.0, s.1, s.2, s.3] {
                assert!(v.unwrap() < 1e-6);
            }
        }
        let a = &e.aggregate;
        assert_eq!(a.count, 3);
        assert_eq!(a.f5, Some(1.0));
        assert_eq!(a.f15, Some(1.0));
        for p in [a.pck_body.as_ref().unwrap(), a.pck_feet.as_ref().unwrap()] {
            assert_eq!(p.thresholds, PCK_THRESHOLDS.to_vec());
            assert!(p.values.iter().all(|v| *v == 1.0));
            assert_eq!(p.avg, 1.0);
        }
    }

    #[test]
    fn translated_prediction_is_root_aligned_away() {
        let (rig, cams, mut params, gt) = setup();
        for p in &mut params {
            p.root_translation[0] += 0.01;
        }
        let e = evaluate_frames(&rig, &params, &gt, &cams, &[MetricKind::Mpjpe, MetricKind::Pve], None).unwrap();
        assert!(e.aggregate.mpjpe_mm.unwrap() < 1e-6);
        assert!((e.aggregate.mpjpe_abs_mm.unwrap() - 10.0).abs() < 1e-6);
        assert!(e.aggregate.pve_mm.unwrap() < 1e-6);
        assert!(e.aggregate.pck_body.is_none());
    }

    #[test]
    fn categories_average_their_own_samples() {
        let (rig, cams, mut params, gt) = setup();
        params[1].root_translation[2] += 0.02;
        params[2].root_translation[2] += 0.04;
        let cats = Categories {
            labels: [
                ("1".to_string(), vec!["far".to_string()]),
                ("2".to_string(), vec!["far".to_string(), "farthest".to_string()]),
            ]
            .into_iter()
            .collect(),
        };
        let e = evaluate_frames(&rig, &params, &gt, &cams, &[MetricKind::Mpjpe], Some(&cats)).unwrap();
        assert!((e.categories["far"].mpjpe_abs_mm.unwrap() - 30.0).abs() < 1e-6);
        assert_eq!(e.categories["far"].count, 2);
        assert!((e.categories["farthest"].mpjpe_abs_mm.unwrap() - 40.0).abs() < 1e-6);
        assert!((e.aggregate.mpjpe_abs_mm.unwrap() - 20.0).abs() < 1e-6);

        let bad = Categories {
            labels: [("9".to_string(), vec!["x".to_string()])].into_iter().collect(),
        };
        assert!(evaluate_frames(&rig, &params, &gt, &cams, &[MetricKind::Mpjpe], Some(&bad)).is_err());
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let (rig, cams, params, gt) = setup();
        assert!(matches!(
            evaluate_frames(&rig, &params[..2], &gt, &cams, &[MetricKind::Mpjpe], None),
            Err(Error::Dimension { .. })
        ));
        assert!(evaluate_frames(&rig, &params, &gt, &[], &[MetricKind::Pck], None).is_err());
    }

    /// PCK against a counting loop over the projected body keypoints.
    #[test]
    fn pck_matches_a_counting_oracle() {
        let (rig, cams, params, gt) = setup();
        let mut pred = params[0].clone();
        pred.pose[15][0] += 0.2;
        pred.pose[3][1] -= 0.1;
        let s = evaluate_sample(&rig, "0", &pred, &gt[0], &cams[..1], &[MetricKind::Pck]).unwrap();
        let ids = &rig.keypoint_maps().body17;
        let pp = rig::keypoint_positions(&rig, &pred, ids).unwrap();
        let gp = rig::keypoint_positions(&rig, &params[0], ids).unwrap();
        let p2: Vec<[f64; 2]> = pp.iter().map(|p| cams[0].project(*p).unwrap()).collect();
        let g2: Vec<[f64; 2]> = gp.iter().map(|p| cams[0].project(*p).unwrap()).collect();
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for g in &g2 {
            for k in 0..2 {
                lo[k] = lo[k].min(g[k]);
                hi[k] = hi[k].max(g[k]);
            }
        }
        let side = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let scores = s.pck_body.unwrap();
        for (a, v) in PCK_THRESHOLDS.iter().zip(&scores.values) {
            let mut hit = 0;
            for (p, g) in p2.iter().zip(&g2) {
                if ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() < a * side {
                    hit += 1;
                }
            }
            assert_eq!(*v, hit as f64 / 17.0);
        }
        assert!(scores.values.windows(2).all(|w| w[0] <= w[1]));
    }
}
