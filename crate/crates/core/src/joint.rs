//! Joint view-prediction and multi-projection training.
//!
//! A single-projection GAN under the uniform view prior bootstraps the
//! generator. Each joint iteration then trains a fresh view classifier on
//! silhouettes rendered from the current generator, clusters the training
//! images by predicted view into `K` slots, and continues multi-projection
//! training on those slots.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::SilhouetteDataset;
use crate::error::{invalid, Result};
use crate::eval::{fid, sample_generator, view_accuracy, FeatureExtractor, ViewAccuracy};
use crate::gan::{ModelBundle, StepMetrics, TrainConfig};
use crate::nets::{NetConfig, ViewClassifier};
use crate::rng;
use crate::viewpoint::{
    assign_slots, cluster_views, single_slot, synthesize_view_pairs, train_view_classifier, ClassifierTraining,
    ClusterAssignment, ViewDistribution,
};

const STREAM_JOINT: u64 = 0x4a4f;
const STREAM_PROBE: u64 = 0x5052;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub bootstrap_steps: u64,
    pub gan_steps: u64,
    pub iterations: usize,
    /// Generator samples rendered once per bin for classifier training.
    pub view_shapes: usize,
    pub classifier: ClassifierTraining,
    /// Build slot histograms from summed probabilities instead of arg-max bins.
    pub soft_clusters: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            bootstrap_steps: 4000,
            gan_steps: 4000,
            iterations: 5,
            view_shapes: 1000,
            classifier: ClassifierTraining::default(),
            soft_clusters: false,
        }
    }
}

/// Outcome of one joint iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub classifier_loss: f64,
    pub cluster_sizes: Vec<usize>,
    pub distributions: Vec<ViewDistribution>,
    pub last_metrics: Option<StepMetrics>,
    /// Accuracy of this iteration's classifier on the training images, when
    /// oracle bins are attached.
    pub view_accuracy: Option<ViewAccuracy>,
    /// FID after the iteration's GAN phase, when a probe is attached.
    pub fid: Option<f64>,
}

/// FID scoring of the generator against fixed reference features.
pub struct FidProbe {
    pub extractor: FeatureExtractor,
    pub reference: Vec<Vec<f64>>,
    pub samples: usize,
}

/// Optional scoring for iteration reports. Neither probe feeds back into
/// training.
#[derive(Default)]
pub struct JointProbes {
    /// Ground-truth bins of the training images.
    pub oracle_bins: Option<Vec<usize>>,
    pub fid: Option<FidProbe>,
}

/// State of a joint run. Fields are public so callers can inspect the
/// classifier or checkpoint between iterations.
pub struct JointRun {
    pub cfg: JointConfig,
    pub bundle: ModelBundle,
    pub data: Arc<SilhouetteDataset>,
    /// Completed joint iterations (0 after bootstrap).
    pub iteration: usize,
    pub classifier: Option<ViewClassifier>,
    pub assignment: Option<ClusterAssignment>,
    pub bootstrapped: bool,
    pub probes: JointProbes,
}

impl JointRun {
    pub fn new(
        net: NetConfig,
        train: TrainConfig,
        cfg: JointConfig,
        data: Arc<SilhouetteDataset>,
        seed: u64,
    ) -> Result<Self> {
        if data.size() != net.resolution {
            return Err(invalid(format!("dataset images are {0}x{0}, model resolution {1}", data.size(), net.resolution)));
        }
        if data.len() < net.heads {
            return Err(invalid("fewer training images than projection slots"));
        }
        Ok(Self {
            cfg,
            bundle: ModelBundle::new(net, train, seed)?,
            data,
            iteration: 0,
            classifier: None,
            assignment: None,
            bootstrapped: false,
            probes: JointProbes::default(),
        })
    }

    /// Trains a single-discriminator model under the uniform prior and adopts
    /// its generator.
    pub fn bootstrap(&mut self, log: Option<&mut dyn Write>, observe: impl FnMut(&StepMetrics)) -> Result<()> {
        let net = NetConfig { heads: 1, ..self.bundle.net.clone() };
        let mut boot = ModelBundle::new(net, self.bundle.train.clone(), self.bundle.seed)?;
        boot.train(&single_slot(Arc::clone(&self.data)), self.cfg.bootstrap_steps, log, observe)?;
        self.bundle.gen = boot.gen;
        self.bundle.opt_g = boot.opt_g;
        self.bundle.step = boot.step;
        self.bootstrapped = true;
        Ok(())
    }

    /// Trains a view classifier on the current generator and clusters the
    /// training images with it.
    pub fn estimate_views(&mut self) -> Result<(ClusterAssignment, f64)> {
        let mut r = rng::derive(self.bundle.seed, STREAM_JOINT, self.iteration as u64);
        let pairs = synthesize_view_pairs(&mut self.bundle.gen, self.cfg.view_shapes, &mut r)?;
        let (mut clf, loss) = train_view_classifier(&pairs, &self.bundle.net, &self.cfg.classifier, &mut r)?;
        let probs = clf.predict(self.data.pixels())?;
        let mut assignment = cluster_views(&probs, self.bundle.net.heads, self.cfg.soft_clusters, &mut r)?;
        if let Some(prev) = &self.assignment {
            assignment = align(&assignment, prev);
        }
        self.classifier = Some(clf);
        Ok((assignment, loss))
    }

    /// One joint iteration: view estimation, clustering, then `gan_steps`
    /// multi-projection cycles.
    pub fn iterate(&mut self, log: Option<&mut dyn Write>, observe: impl FnMut(&StepMetrics)) -> Result<IterationReport> {
        if !self.bootstrapped {
            return Err(invalid("joint iterations need a bootstrapped generator"));
        }
        let (assignment, classifier_loss) = self.estimate_views()?;
        let view_accuracy = match (&self.probes.oracle_bins, self.classifier.as_mut()) {
            (Some(bins), Some(clf)) => {
                if bins.len() != self.data.len() {
                    return Err(invalid(format!("{} oracle bins for {} images", bins.len(), self.data.len())));
                }
                Some(view_accuracy(clf, self.data.pixels(), bins)?)
            }
            _ => None,
        };
        let slots = assign_slots(&assignment, Arc::clone(&self.data))?;
        let metrics = self.bundle.train(&slots, self.cfg.gan_steps, log, observe)?;
        let fid = match &self.probes.fid {
            Some(p) => {
                let mut r = rng::derive(self.bundle.seed, STREAM_PROBE, self.iteration as u64);
                let fake = sample_generator(&mut self.bundle.gen, p.samples, &mut r)?;
                Some(fid(&p.extractor.features(&fake)?, &p.reference)?)
            }
            None => None,
        };
        self.iteration += 1;
        let report = IterationReport {
            iteration: self.iteration,
            classifier_loss,
            cluster_sizes: assignment.sizes(),
            distributions: assignment.distributions.clone(),
            last_metrics: metrics.last().cloned(),
            view_accuracy,
            fid,
        };
        self.assignment = Some(assignment);
        Ok(report)
    }

    /// Bootstrap (if needed) and all remaining iterations.
    pub fn run(
        &mut self,
        mut log: Option<&mut dyn Write>,
        mut observe: impl FnMut(&StepMetrics),
        mut on_iteration: impl FnMut(&mut JointRun, &IterationReport) -> Result<()>,
    ) -> Result<Vec<IterationReport>> {
        if !self.bootstrapped {
            self.bootstrap(log.as_mut().map(|w| &mut **w as &mut dyn Write), &mut observe)?;
        }
        let mut reports = Vec::new();
        while self.iteration < self.cfg.iterations {
            let rep = self.iterate(log.as_mut().map(|w| &mut **w as &mut dyn Write), &mut observe)?;
            on_iteration(self, &rep)?;
            reports.push(rep);
        }
        Ok(reports)
    }

    pub fn extra(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": "vp-mp-gan",
            "iteration": self.iteration,
            "bootstrapped": self.bootstrapped,
            "joint": self.cfg,
        })
    }
}

/// Relabels `next` so that each cluster keeps the head whose previous view
/// distribution it is closest to (minimum total variation matching).
pub fn align(next: &ClusterAssignment, prev: &ClusterAssignment) -> ClusterAssignment {
    let k = next.clusters();
    if prev.clusters() != k {
        return next.clone();
    }
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| next.distributions[i].total_variation(&prev.distributions[j])).collect())
        .collect();
    let perm = if k <= 8 { best_permutation(&cost) } else { greedy_permutation(&cost) };
    let mut distributions = vec![ViewDistribution::uniform(); k];
    for (i, &j) in perm.iter().enumerate() {
        distributions[j] = next.distributions[i].clone();
    }
    ClusterAssignment { labels: next.labels.iter().map(|&l| perm[l]).collect(), distributions }
}

fn best_permutation(cost: &[Vec<f64>]) -> Vec<usize> {
    let k = cost.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (f64::INFINITY, perm.clone());
    fn search(i: usize, perm: &mut Vec<usize>, cost: &[Vec<f64>], acc: f64, best: &mut (f64, Vec<usize>)) {
        if acc >= best.0 {
            return;
        }
        if i == perm.len() {
            *best = (acc, perm.clone());
            return;
        }
        for j in i..perm.len() {
            perm.swap(i, j);
            search(i + 1, perm, cost, acc + cost[i][perm[i]], best);
            perm.swap(i, j);
        }
    }
    search(0, &mut perm, cost, 0.0, &mut best);
    best.1
}

fn greedy_permutation(cost: &[Vec<f64>]) -> Vec<usize> {
    let k = cost.len();
    let mut perm = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for i in 0..k {
        let j = (0..k).filter(|&j| !used[j]).min_by(|&a, &b| cost[i][a].total_cmp(&cost[i][b])).unwrap();
        perm[i] = j;
        used[j] = true;
    }
    perm
}
