//! View bins, view distributions, K-means clustering of classifier outputs
//! and the view classifier trained on synthesized silhouettes.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Collector, Manifest, Restorer};
use crate::datagen::SilhouetteDataset;
use crate::error::{invalid, Error, Result};
use crate::nets::{Generator, NetConfig, ViewClassifier};
use crate::nn::{softmax_cross_entropy, Adam, Module};
use crate::projection::{render, Viewpoint};

/// Number of azimuth bins, each `2*pi/16` wide starting at azimuth 0.
pub const NUM_BINS: usize = 16;
/// Bins holding less than this share of a cluster's mass are dropped.
pub const PRUNE_FRACTION: f64 = 0.1;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;

pub fn bin_width() -> f64 {
    TAU / NUM_BINS as f64
}

/// Bin of an azimuth in radians (any real value; wrapped to `[0, 2pi)`).
pub fn bin_of(azimuth: f64) -> usize {
    let a = azimuth.rem_euclid(TAU);
    ((a / bin_width()) as usize).min(NUM_BINS - 1)
}

/// Half-open azimuth interval `[lo, hi)` of a bin.
pub fn bin_range(bin: usize) -> (f64, f64) {
    let w = bin_width();
    (bin as f64 * w, (bin + 1) as f64 * w)
}

/// A normalized histogram over the 16 view bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ViewDistribution {
    weights: [f64; NUM_BINS],
}

impl TryFrom<Vec<f64>> for ViewDistribution {
    type Error = Error;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(&w)
    }
}

impl From<ViewDistribution> for Vec<f64> {
    fn from(d: ViewDistribution) -> Self {
        d.weights.to_vec()
    }
}

impl ViewDistribution {
    /// Requires 16 finite non-negative weights summing to 1 within `1e-6`.
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.len() != NUM_BINS {
            return Err(invalid(format!("view distribution needs {NUM_BINS} weights, got {}", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("view weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(invalid(format!("view weights sum to {sum}, expected 1")));
        }
        let mut w = [0.0; NUM_BINS];
        w.copy_from_slice(weights);
        Ok(Self { weights: w })
    }

    /// Normalizes non-negative weights; the total must be positive.
    pub fn from_weights_unnormalized(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("view weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(invalid("view weights have no mass"));
        }
        let mut w = [0.0; NUM_BINS];
        if weights.len() != NUM_BINS {
            return Err(invalid(format!("view distribution needs {NUM_BINS} weights, got {}", weights.len())));
        }
        for (o, &x) in w.iter_mut().zip(weights) {
            *o = x / sum;
        }
        Ok(Self { weights: w })
    }

    pub fn uniform() -> Self {
        Self { weights: [1.0 / NUM_BINS as f64; NUM_BINS] }
    }

    pub fn one_hot(bin: usize) -> Self {
        let mut weights = [0.0; NUM_BINS];
        weights[bin] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64; NUM_BINS] {
        &self.weights
    }

    /// Drops bins below `fraction` of the mass and renormalizes.
    pub fn pruned(&self, fraction: f64) -> Result<Self> {
        let kept: Vec<f64> = self.weights.iter().map(|&w| if w < fraction { 0.0 } else { w }).collect();
        Self::from_weights_unnormalized(&kept)
            .map_err(|_| Error::Clustering("pruning removed every bin of a view distribution".into()))
    }

    /// Total variation distance `0.5 * sum |p - q|`.
    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Mixture with the given non-negative weights.
    pub fn mixture(parts: &[(f64, &ViewDistribution)]) -> Result<Self> {
        let mut w = [0.0; NUM_BINS];
        for (m, d) in parts {
            for (o, x) in w.iter_mut().zip(&d.weights) {
                *o += m * x;
            }
        }
        Self::from_weights_unnormalized(&w)
    }
}

/// Result of K-means.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const MAX_RESEEDS: usize = 5;

/// Lloyd's algorithm with K-means++ seeding, stopping after `max_iter`
/// iterations or when no centroid moves more than `tol`.
///
/// A cluster that empties is reseeded with the worst-fit point of a cluster
/// that can spare one; after `5` reseeds of the same cluster it is an error.
/// Points only switch clusters when strictly closer, so identical inputs keep
/// one point per cluster and share one effective centroid.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, max_iter: usize, tol: f64, rng: &mut R) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::Clustering(format!("cannot form {k} clusters from {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
        return Err(invalid("k-means points must be finite and share a dimension"));
    }

    // K-means++ seeding.
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let nearest = |p: &[f64], cs: &[Vec<f64>]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in cs.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    };
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut reseeds = vec![0usize; k];
    let mut objective = Vec::new();

    for iter in 0..max_iter.max(1) {
        if iter > 0 {
            for (p, l) in points.iter().zip(labels.iter_mut()) {
                let (j, d) = nearest(p, &centroids);
                if d < sq_dist(p, &centroids[*l]) {
                    *l = j;
                }
            }
        }
        // Repair empty clusters.
        loop {
            let mut counts = vec![0usize; k];
            labels.iter().for_each(|&l| counts[l] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            reseeds[empty] += 1;
            if reseeds[empty] > MAX_RESEEDS {
                return Err(Error::Clustering(format!("cluster {empty} stayed empty after {MAX_RESEEDS} reseeds")));
            }
            let donor = (0..points.len())
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centroids[labels[a]]);
                    let db = sq_dist(&points[b], &centroids[labels[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("more points than clusters");
            labels[donor] = empty;
            centroids[empty] = points[donor].clone();
        }
        objective.push(points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum());

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < tol {
            break;
        }
    }
    objective.push(points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum());
    Ok(KMeans { centroids, labels, objective })
}

/// Cluster id per training image plus the cluster's view distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub distributions: Vec<ViewDistribution>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignmentFile {
    assignment: BTreeMap<String, usize>,
    histograms: Vec<ViewDistribution>,
}

impl ClusterAssignment {
    pub fn clusters(&self) -> usize {
        self.distributions.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == cluster).map(|(i, _)| i).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.clusters()];
        self.labels.iter().for_each(|&l| s[l] += 1);
        s
    }

    /// Size-weighted union of the slot distributions.
    pub fn union_distribution(&self) -> Result<ViewDistribution> {
        let sizes = self.sizes();
        let parts: Vec<_> = sizes.iter().zip(&self.distributions).map(|(&s, d)| (s as f64, d)).collect();
        ViewDistribution::mixture(&parts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = AssignmentFile {
            assignment: self.labels.iter().enumerate().map(|(i, &l)| (format!("{i:06}"), l)).collect(),
            histograms: self.distributions.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: AssignmentFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut labels = vec![usize::MAX; file.assignment.len()];
        for (id, l) in file.assignment {
            let i: usize = id.parse().map_err(|_| Error::Malformed(format!("bad image id {id:?}")))?;
            if i >= labels.len() || l >= file.histograms.len() {
                return Err(Error::Malformed(format!("assignment entry {id} -> {l} out of range")));
            }
            labels[i] = l;
        }
        if labels.contains(&usize::MAX) {
            return Err(Error::Malformed("image ids are not contiguous".into()));
        }
        Ok(Self { labels, distributions: file.histograms })
    }
}

/// Clusters classifier outputs into `k` groups and derives each group's view
/// distribution from its members' arg-max bins (or summed probabilities when
/// `soft`), pruned at 10% and renormalized.
pub fn cluster_views<R: Rng + ?Sized>(
    probabilities: &[[f32; NUM_BINS]],
    k: usize,
    soft: bool,
    rng: &mut R,
) -> Result<ClusterAssignment> {
    let points: Vec<Vec<f64>> = probabilities.iter().map(|p| p.iter().map(|&x| x as f64).collect()).collect();
    let km = kmeans(&points, k, 100, 1e-6, rng)?;
    let mut hist = vec![[0.0f64; NUM_BINS]; k];
    for (p, &l) in probabilities.iter().zip(&km.labels) {
        if soft {
            for (h, &x) in hist[l].iter_mut().zip(p) {
                *h += x as f64;
            }
        } else {
            hist[l][argmax(p)] += 1.0;
        }
    }
    let distributions = hist
        .iter()
        .map(|h| ViewDistribution::from_weights_unnormalized(h)?.pruned(PRUNE_FRACTION))
        .collect::<Result<_>>()?;
    Ok(ClusterAssignment { labels: km.labels, distributions })
}

pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Groups images by their true bins into `k` slots of consecutive bins
/// (`slot = bin * k / 16`); each slot's distribution is its empirical bin
/// histogram.
pub fn oracle_assignment(bins: &[usize], k: usize) -> Result<ClusterAssignment> {
    if k == 0 || k > NUM_BINS {
        return Err(invalid(format!("oracle slots need 1..={NUM_BINS} clusters, got {k}")));
    }
    let labels: Vec<usize> = bins.iter().map(|&b| b * k / NUM_BINS).collect();
    let mut hist = vec![[0.0f64; NUM_BINS]; k];
    for (&b, &l) in bins.iter().zip(&labels) {
        hist[l][b] += 1.0;
    }
    let distributions = hist
        .iter()
        .enumerate()
        .map(|(s, h)| {
            ViewDistribution::from_weights_unnormalized(h)
                .map_err(|_| Error::Clustering(format!("oracle slot {s} has no images")))
        })
        .collect::<Result<_>>()?;
    Ok(ClusterAssignment { labels, distributions })
}

/// One discriminator's data: a view distribution and its real images.
#[derive(Clone, Debug)]
pub struct ProjectionSlot {
    pub view: ViewDistribution,
    pub members: Vec<usize>,
    pub data: Arc<SilhouetteDataset>,
}

impl ProjectionSlot {
    /// Draws `batch` member images with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<f32> {
        let idx: Vec<usize> = (0..batch).map(|_| self.members[rng.random_range(0..self.members.len())]).collect();
        self.data.gather(&idx)
    }
}

/// Turns a clustering into projection slots over `data`.
pub fn assign_slots(assignment: &ClusterAssignment, data: Arc<SilhouetteDataset>) -> Result<Vec<ProjectionSlot>> {
    if assignment.labels.len() != data.len() {
        return Err(invalid(format!(
            "assignment covers {} images but the dataset has {}",
            assignment.labels.len(),
            data.len()
        )));
    }
    (0..assignment.clusters())
        .map(|c| {
            let members = assignment.members(c);
            if members.is_empty() {
                return Err(Error::Clustering(format!("slot {c} has no images")));
            }
            Ok(ProjectionSlot { view: assignment.distributions[c].clone(), members, data: Arc::clone(&data) })
        })
        .collect()
}

/// A single slot holding every image under the uniform distribution.
pub fn single_slot(data: Arc<SilhouetteDataset>) -> Vec<ProjectionSlot> {
    vec![ProjectionSlot { view: ViewDistribution::uniform(), members: (0..data.len()).collect(), data }]
}

/// Labeled silhouettes for view classification.
#[derive(Clone, Debug)]
pub struct ViewPairs {
    pub size: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// Rendering azimuth of each pair.
    pub azimuths: Vec<f64>,
}

impl ViewPairs {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Renders `shapes` generator samples (binarized at 0.5) once per bin at an
/// azimuth drawn uniformly inside the bin; silhouettes are thresholded at 0.5.
pub fn synthesize_view_pairs<R: Rng + ?Sized>(gen: &mut Generator, shapes: usize, rng: &mut R) -> Result<ViewPairs> {
    let n = gen.config().resolution;
    let latent = gen.latent();
    let mut images = Vec::with_capacity(shapes * NUM_BINS * n * n);
    let mut labels = Vec::with_capacity(shapes * NUM_BINS);
    let mut azimuths = Vec::with_capacity(shapes * NUM_BINS);
    let mut done = 0;
    while done < shapes {
        let b = (shapes - done).min(64);
        let z = latent.sample(b, rng);
        for grid in gen.generate(&z)? {
            let grid = grid.binarize(0.5)?;
            for bin in 0..NUM_BINS {
                let (lo, hi) = bin_range(bin);
                let view = Viewpoint::new(lo + (hi - lo) * rng.random::<f64>());
                let (sil, _) = render(n, grid.as_slice(), view);
                images.extend(sil.iter().map(|&v| if v >= 0.5 { 1.0f32 } else { 0.0 }));
                labels.push(bin);
                azimuths.push(view.azimuth());
            }
        }
        done += b;
    }
    Ok(ViewPairs { size: n, images, labels, azimuths })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self { steps: 2000, batch: 32, lr: 1e-4, beta1: 0.5, beta2: 0.9 }
    }
}

/// Trains a fresh classifier on `pairs`; every bin must be represented.
/// Returns the classifier and its mean loss over the final 10% of steps.
pub fn train_view_classifier<R: Rng + ?Sized>(
    pairs: &ViewPairs,
    net: &NetConfig,
    cfg: &ClassifierTraining,
    rng: &mut R,
) -> Result<(ViewClassifier, f64)> {
    let mut present = [false; NUM_BINS];
    pairs.labels.iter().for_each(|&l| present[l] = true);
    if pairs.len() < NUM_BINS || present.iter().any(|p| !p) {
        return Err(Error::Config("view classifier training needs every bin represented".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("classifier batch must be positive".into()));
    }
    let mut clf = ViewClassifier::new(net, rng)?;
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let px = pairs.size * pairs.size;
    let tail = (cfg.steps / 10).max(1);
    let mut tail_loss = 0.0;
    let mut batch = Vec::with_capacity(cfg.batch * px);
    let mut labels = Vec::with_capacity(cfg.batch);
    for step in 0..cfg.steps {
        batch.clear();
        labels.clear();
        for _ in 0..cfg.batch {
            let i = rng.random_range(0..pairs.len());
            batch.extend_from_slice(&pairs.images[i * px..(i + 1) * px]);
            labels.push(pairs.labels[i]);
        }
        let (logits, cache) = clf.forward(&batch, true)?;
        let (loss, grad) = softmax_cross_entropy(&logits, NUM_BINS, &labels);
        clf.backward(&cache, &grad);
        opt.step(&mut clf);
        if step + tail >= cfg.steps {
            tail_loss += loss as f64 / tail as f64;
        }
    }
    clf.zero_grad();
    Ok((clf, tail_loss))
}

const CLASSIFIER_KIND: &str = "view-classifier";

/// Packs a trained classifier into a checkpoint.
pub fn classifier_checkpoint(clf: &mut ViewClassifier, net: &NetConfig) -> Checkpoint {
    let mut c = Collector::default();
    clf.visit("classifier", &mut c);
    Checkpoint {
        manifest: Manifest { net: net.clone(), step: 0, seed: 0, extra: serde_json::json!({ "kind": CLASSIFIER_KIND }) },
        tensors: c.tensors,
    }
}

pub fn classifier_from_checkpoint(ckpt: &Checkpoint) -> Result<ViewClassifier> {
    if ckpt.manifest.extra.get("kind").and_then(|k| k.as_str()) != Some(CLASSIFIER_KIND) {
        return Err(Error::Malformed("checkpoint does not hold a view classifier".into()));
    }
    let mut clf = ViewClassifier::new(&ckpt.manifest.net, &mut crate::rng::seeded(0))?;
    let mut r = Restorer::new(ckpt);
    clf.visit("classifier", &mut r);
    r.finish()?;
    Ok(clf)
}
