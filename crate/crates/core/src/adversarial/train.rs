//! Source/target training step with gradient reversal, plus the
//! domain-probe protocol used to measure feature invariance.

use log::warn;
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorGrad};
use super::grl::{grl_backward, grl_forward, GrlConfig};
use super::loss::{hinge_with_grads, total_loss, DiscriminatorScores, LossBreakdown};
use super::roi::{RoiConfig, RoiPlan};
use super::toy::{check_sample, ToyDetector, ToyGrad, ToySample, ToyTask, ToyTrace};
use crate::detection::{BBox, Detection, Domain};
use crate::error::{Error, Result};

/// Images from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub domain: Domain,
    pub samples: Vec<ToySample>,
}

impl DomainBatch {
    pub fn new(domain: Domain, samples: Vec<ToySample>) -> Self {
        DomainBatch { domain, samples }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Plain SGD with one fixed step size per model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sgd {
    pub lr_detector: f64,
    pub lr_discriminator: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            lr_detector: 0.2,
            lr_discriminator: 0.3,
        }
    }
}

/// ROI boxes per image, ranked by confidence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoiSelection {
    pub source: Vec<Vec<BBox>>,
    pub target: Vec<Vec<BBox>>,
}

/// The detector's `top_k` most confident cells on each image.
pub fn predicted_rois(det: &ToyDetector, traces: &[ToyTrace], top_k: usize) -> Vec<Vec<BBox>> {
    traces
        .iter()
        .map(|t| {
            det.ranked_cells(t)
                .into_iter()
                .take(top_k)
                .map(|d| d.bbox)
                .collect()
        })
        .collect()
}

/// Labeled boxes as ROIs, in annotation order.
pub fn labeled_rois(samples: &[ToySample], top_k: usize) -> Vec<Vec<BBox>> {
    samples
        .iter()
        .map(|s| s.labels.iter().take(top_k).map(|d| d.bbox).collect())
        .collect()
}

struct Adversarial {
    dis_loss: f64,
    dis_grad: DiscriminatorGrad,
    /// `dL_total/dlevels` per image, already passed through the reversal.
    source_levels: Vec<Vec<ndarray::Array3<f64>>>,
    target_levels: Vec<Vec<ndarray::Array3<f64>>>,
}

fn fused_rois(
    det: &ToyDetector,
    traces: &[ToyTrace],
    boxes: &[Vec<BBox>],
    cfg: &RoiConfig,
) -> Result<(Vec<RoiPlan>, Vec<Array1<f64>>, Vec<usize>)> {
    let mut plans = Vec::with_capacity(traces.len());
    let mut fused = Vec::new();
    let mut counts = Vec::with_capacity(traces.len());
    for (t, b) in traces.iter().zip(boxes) {
        let pyr = det.pyramid(t);
        let plan = RoiPlan::new(&pyr, b, cfg)?;
        let v = plan.forward(&pyr);
        counts.push(v.len());
        fused.extend(v.iter().map(grl_forward));
        plans.push(plan);
    }
    Ok((plans, fused, counts))
}

fn adversarial_pass(
    det: &ToyDetector,
    dis: &Discriminator,
    source: &[ToyTrace],
    target: &[ToyTrace],
    rois: &RoiSelection,
    grl: &GrlConfig,
    cfg: &RoiConfig,
) -> Result<Adversarial> {
    let (src_plans, src_fused, src_counts) = fused_rois(det, source, &rois.source, cfg)?;
    let (tgt_plans, tgt_fused, tgt_counts) = fused_rois(det, target, &rois.target, cfg)?;
    let n_src = src_fused.len();
    let mut all = src_fused;
    all.extend(tgt_fused);
    let (scores, trace) = dis.forward(&all);
    let scores = DiscriminatorScores {
        source_scores: scores[..n_src].to_vec(),
        target_scores: scores[n_src..].to_vec(),
    };
    let (dis_loss, d_src, d_tgt) = hinge_with_grads(&scores)?;
    let dscores: Vec<f64> = d_src.into_iter().chain(d_tgt).collect();
    let (dis_grad, drois) = dis.backward(&trace, &dscores);
    let drois: Vec<Array1<f64>> = drois.iter().map(|g| grl_backward(g, grl)).collect();

    let scatter = |traces: &[ToyTrace], plans: &[RoiPlan], counts: &[usize], grads: &[Array1<f64>]| {
        let mut offset = 0;
        traces
            .iter()
            .zip(plans.iter().zip(counts))
            .map(|(t, (plan, &n))| {
                let mut levels = det.pyramid(t).zeros_like();
                plan.backward(&grads[offset..offset + n], &mut levels);
                offset += n;
                levels
            })
            .collect::<Vec<_>>()
    };
    let source_levels = scatter(source, &src_plans, &src_counts, &drois[..n_src]);
    let target_levels = scatter(target, &tgt_plans, &tgt_counts, &drois[n_src..]);
    Ok(Adversarial {
        dis_loss,
        dis_grad,
        source_levels,
        target_levels,
    })
}

fn traces(det: &ToyDetector, samples: &[ToySample]) -> Result<Vec<ToyTrace>> {
    samples
        .iter()
        .map(|s| {
            check_sample(s)?;
            Ok(det.forward(&s.image))
        })
        .collect()
}

/// Mean detection loss over the source batch and its gradient.
fn detection_part(det: &ToyDetector, samples: &[ToySample], traces: &[ToyTrace]) -> (f64, Vec<ndarray::Array3<f64>>) {
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for (s, t) in samples.iter().zip(traces) {
        let (l, g) = det.detection_loss(t, &s.labels);
        loss += l * scale;
        grads.push(g * scale);
    }
    (loss, grads)
}

/// One detection-only SGD step on the source batch.
pub fn detection_step(det: &mut ToyDetector, source: &DomainBatch, sgd: &Sgd) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::Empty("source batch is empty"));
    }
    let tr = traces(det, &source.samples)?;
    let (loss, dlogits) = detection_part(det, &source.samples, &tr);
    let mut grad = det.zero_grad();
    for (t, g) in tr.iter().zip(&dlogits) {
        grad.add_assign(&det.backward(t, g, None));
    }
    det.apply(&grad, sgd.lr_detector);
    Ok(loss)
}

/// One joint step on `L_total = L_det + L_dis`.
///
/// Detection loss uses source labels only. ROIs for both domains are the
/// detector's current top-k cells. The discriminator descends on `L_dis`;
/// the backbone receives `dL_det - alpha * dL_dis` through the reversal.
pub fn da_train_step(
    source: &DomainBatch,
    target: &DomainBatch,
    det: &mut ToyDetector,
    dis: &mut Discriminator,
    grl: &GrlConfig,
    roi: &RoiConfig,
    sgd: &Sgd,
) -> Result<LossBreakdown> {
    if source.is_empty() {
        return Err(Error::Empty("source batch is empty"));
    }
    if target.is_empty() {
        warn!("target batch is empty; running a detection-only step");
        let det_loss = detection_step(det, source, sgd)?;
        return total_loss(det_loss, 0.0);
    }
    let src_traces = traces(det, &source.samples)?;
    let tgt_traces = traces(det, &target.samples)?;
    let (det_loss, dlogits) = detection_part(det, &source.samples, &src_traces);
    let rois = RoiSelection {
        source: predicted_rois(det, &src_traces, roi.top_k),
        target: predicted_rois(det, &tgt_traces, roi.top_k),
    };
    let adv = adversarial_pass(det, dis, &src_traces, &tgt_traces, &rois, grl, roi)?;

    let mut grad = det.zero_grad();
    for ((t, g), levels) in src_traces.iter().zip(&dlogits).zip(&adv.source_levels) {
        grad.add_assign(&det.backward(t, g, Some(levels)));
    }
    for (t, levels) in tgt_traces.iter().zip(&adv.target_levels) {
        grad.add_assign(&det.backward(t, &t.zero_logit_grad(), Some(levels)));
    }
    let breakdown = total_loss(det_loss, adv.dis_loss)?;
    det.apply(&grad, sgd.lr_detector);
    dis.apply(&adv.dis_grad, sgd.lr_discriminator);
    Ok(breakdown)
}

/// Gradients of `L_dis` through the reversal for a fixed ROI selection.
#[derive(Debug, Clone)]
pub struct AdversarialGradients {
    pub dis_loss: f64,
    /// Backbone gradient, i.e. `-alpha * dL_dis/dtheta`.
    pub extractor: Vec<f64>,
    pub discriminator: Vec<f64>,
}

pub fn adversarial_gradients(
    det: &ToyDetector,
    dis: &Discriminator,
    source: &[ToySample],
    target: &[ToySample],
    rois: &RoiSelection,
    grl: &GrlConfig,
    roi: &RoiConfig,
) -> Result<AdversarialGradients> {
    let src_traces = traces(det, source)?;
    let tgt_traces = traces(det, target)?;
    let adv = adversarial_pass(det, dis, &src_traces, &tgt_traces, rois, grl, roi)?;
    let mut grad: ToyGrad = det.zero_grad();
    for (t, levels) in src_traces
        .iter()
        .zip(&adv.source_levels)
        .chain(tgt_traces.iter().zip(&adv.target_levels))
    {
        grad.add_assign(&det.backward(t, &t.zero_logit_grad(), Some(levels)));
    }
    Ok(AdversarialGradients {
        dis_loss: adv.dis_loss,
        extractor: grad.extractor(),
        discriminator: adv.dis_grad.values(),
    })
}

/// Forward-only `L_dis` for a fixed ROI selection (no reversal involved).
pub fn discriminator_loss(
    det: &ToyDetector,
    dis: &Discriminator,
    source: &[ToySample],
    target: &[ToySample],
    rois: &RoiSelection,
    roi: &RoiConfig,
) -> Result<f64> {
    let src = features(det, source, &rois.source, roi)?;
    let tgt = features(det, target, &rois.target, roi)?;
    let scores = DiscriminatorScores {
        source_scores: dis.forward(&src).0,
        target_scores: dis.forward(&tgt).0,
    };
    Ok(hinge_with_grads(&scores)?.0)
}

/// Fused ROI vectors for a set of images.
pub fn features(
    det: &ToyDetector,
    samples: &[ToySample],
    boxes: &[Vec<BBox>],
    roi: &RoiConfig,
) -> Result<Vec<Array1<f64>>> {
    let tr = traces(det, samples)?;
    Ok(fused_rois(det, &tr, boxes, roi)?.1)
}

/// One discriminator-only step on fixed features; the detector is frozen.
pub fn discriminator_step(
    dis: &mut Discriminator,
    source: &[Array1<f64>],
    target: &[Array1<f64>],
    lr: f64,
) -> Result<f64> {
    let n_src = source.len();
    let all: Vec<Array1<f64>> = source.iter().chain(target).cloned().collect();
    let (scores, trace) = dis.forward(&all);
    let (loss, ds, dt) = hinge_with_grads(&DiscriminatorScores {
        source_scores: scores[..n_src].to_vec(),
        target_scores: scores[n_src..].to_vec(),
    })?;
    let dscores: Vec<f64> = ds.into_iter().chain(dt).collect();
    let (grad, _) = dis.backward(&trace, &dscores);
    dis.apply(&grad, lr);
    Ok(loss)
}

/// Protocol for measuring how much domain information the frozen backbone
/// still carries: a fresh discriminator is trained on labeled-box ROI
/// features of held-out images and scored on a second held-out set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_images: 64,
            test_images: 64,
            steps: 300,
            lr: 0.5,
            hidden: Discriminator::DEFAULT_HIDDEN,
        }
    }
}

/// Balanced held-out domain-classification accuracy of a fresh probe.
pub fn probe_domain_accuracy(
    det: &ToyDetector,
    task: &ToyTask,
    roi: &RoiConfig,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = |domain: Domain, n: usize| -> Result<Vec<Array1<f64>>> {
        let samples = task.batch(domain, n, &mut rng);
        features(det, &samples, &labeled_rois(&samples, roi.top_k), roi)
    };
    let train_src = feats(Domain::Source, probe.train_images)?;
    let train_tgt = feats(Domain::Target, probe.train_images)?;
    let test_src = feats(Domain::Source, probe.test_images)?;
    let test_tgt = feats(Domain::Target, probe.test_images)?;
    let Some(first) = train_src.first() else {
        return Err(Error::Empty("probe needs at least one training image"));
    };
    let mut dis = Discriminator::new(first.len(), probe.hidden, seed ^ 0x9E37_79B9_7F4A_7C15);
    for _ in 0..probe.steps {
        discriminator_step(&mut dis, &train_src, &train_tgt, probe.lr)?;
    }
    let rate = |v: &[Array1<f64>], want_positive: bool| {
        let hits = dis
            .forward(v)
            .0
            .iter()
            .filter(|&&s| (s > 0.0) == want_positive)
            .count();
        hits as f64 / v.len().max(1) as f64
    };
    Ok((rate(&test_src, true) + rate(&test_tgt, false)) / 2.0)
}

/// Full desk-scale training run on the toy task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaExperiment {
    pub task: ToyTask,
    pub steps: usize,
    pub batch_size: usize,
    pub grl: GrlConfig,
    pub roi: RoiConfig,
    pub sgd: Sgd,
    pub discriminator_hidden: usize,
    pub probe: ProbeConfig,
}

impl Default for DaExperiment {
    fn default() -> Self {
        DaExperiment {
            task: ToyTask::default(),
            steps: 1200,
            batch_size: 8,
            grl: GrlConfig::default(),
            roi: RoiConfig::default(),
            sgd: Sgd::default(),
            discriminator_hidden: 32,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct DaOutcome {
    pub detector: ToyDetector,
    pub discriminator: Discriminator,
    pub log: Vec<TrainLogEntry>,
}

impl DaExperiment {
    /// Trains from `seed`. With `adapt = false` target batches are empty,
    /// so every step is detection-only.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let mut errors = Vec::new();
        for (name, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("discriminator_hidden", self.discriminator_hidden),
            ("probe.train_images", self.probe.train_images),
            ("probe.test_images", self.probe.test_images),
            ("probe.hidden", self.probe.hidden),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be >= 1"));
            }
        }
        for (name, v) in [
            ("sgd.lr_detector", self.sgd.lr_detector),
            ("sgd.lr_discriminator", self.sgd.lr_discriminator),
            ("probe.lr", self.probe.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(errors))
        }
    }

    pub fn train(&self, seed: u64, adapt: bool) -> Result<DaOutcome> {
        self.validate()?;
        let mut det = ToyDetector::build(seed);
        let fused = 3 * det.backbone[2].outputs();
        let mut dis = Discriminator::new(fused, self.discriminator_hidden, seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut log = Vec::with_capacity(self.steps);
        for step in 0..self.steps {
            let source = DomainBatch::new(
                Domain::Source,
                self.task.batch(Domain::Source, self.batch_size, &mut rng),
            );
            let target_samples = self.task.batch(Domain::Target, self.batch_size, &mut rng);
            let losses = if adapt {
                let target = DomainBatch::new(Domain::Target, target_samples);
                da_train_step(&source, &target, &mut det, &mut dis, &self.grl, &self.roi, &self.sgd)?
            } else {
                total_loss(detection_step(&mut det, &source, &self.sgd)?, 0.0)?
            };
            log.push(TrainLogEntry { step, losses });
        }
        Ok(DaOutcome {
            detector: det,
            discriminator: dis,
            log,
        })
    }

    pub fn probe(&self, det: &ToyDetector, seed: u64) -> Result<f64> {
        probe_domain_accuracy(det, &self.task, &self.roi, &self.probe, seed.wrapping_add(3))
    }
}

/// Pod-count MAE of a detector over labeled samples.
pub fn count_mae(det: &ToyDetector, samples: &[ToySample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let pred: Vec<Detection> = det.detect_array(&s.image);
            (pred.len() as f64 - s.labels.len() as f64).abs()
        })
        .sum();
    total / samples.len().max(1) as f64
}
