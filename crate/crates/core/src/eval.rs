//! Evaluation: Frechet distance over learned 3D features, view accuracy and
//! view-distribution error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Collector, Manifest, Restorer};
use crate::datagen::{sample_shape, FamilyKind, OracleLabels, ShapeFamily};
use crate::error::{invalid, Error, Result};
use crate::nets::{Generator, NetConfig, ViewClassifier, LEAKY_SLOPE};
use crate::nn::{
    flatten, leaky_relu, leaky_relu_backward, softmax_cross_entropy, Adam, Conv, ConvCache, Dense, DenseCache,
    Module, Tensor, Visitor,
};
use crate::viewpoint::{argmax, ClusterAssignment, ViewDistribution, NUM_BINS};
use crate::voxel::VoxelGrid;

/// Width of the feature embedding used for the Frechet distance.
pub const FEATURE_DIM: usize = 64;

/// Relative tolerance for negative eigenvalues of the covariance product.
const EIGEN_TOLERANCE: f64 = 1e-6;

/// Mean and covariance of a feature set.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance; needs more rows than feature
    /// dimensions so the covariance can have full rank.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let d = features.first().map_or(0, Vec::len);
        if d == 0 || n < d + 1 {
            return Err(invalid(format!("feature statistics need at least {} samples, got {n}", d + 1)));
        }
        if features.iter().any(|f| f.len() != d || f.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical("features must be finite and share a dimension".into()));
        }
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut centered = DMatrix::zeros(n, d);
        for (i, f) in features.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] = f[j] - mean[j];
            }
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&v| v < -EIGEN_TOLERANCE * scale) {
        return Err(Error::Numerical(format!("{what} has eigenvalue {bad:e}")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(invalid("feature dimensions differ"));
    }
    let s1 = psd_sqrt(&a.cov, "first covariance")?;
    let inner = &s1 * &b.cov * &s1;
    let cross = psd_sqrt(&inner, "covariance product")?;
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianStats::from_features(a)?, &GaussianStats::from_features(b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorTraining {
    pub shapes_per_family: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for ExtractorTraining {
    fn default() -> Self {
        Self { shapes_per_family: 1000, steps: 1500, batch: 32, lr: 1e-3 }
    }
}

/// 3D convolutional shape classifier over the three families; its penultimate
/// layer is the feature embedding.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    n: usize,
    convs: Vec<Conv>,
    embed: Dense,
    out: Dense,
    final_channels: usize,
    final_spatial: usize,
}

struct ExtractorCache {
    convs: Vec<(ConvCache, Tensor)>,
    embed: DenseCache,
    embed_out: Tensor,
    out: DenseCache,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(invalid(format!("extractor resolution must be a power of two >= 8, got {n}")));
        }
        // Down to a 4^3 volume.
        let blocks = (n / 4).trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(blocks);
        let mut c = 1;
        for b in 0..blocks {
            let next = 8 << b;
            let std = (2.0 / (c * 64) as f32).sqrt();
            convs.push(Conv::new_3d(c, next, 4, 2, 1, std, false, rng));
            c = next;
        }
        let flat = c * 64;
        let embed = Dense::new(flat, FEATURE_DIM, (2.0 / flat as f32).sqrt(), false, rng);
        let out = Dense::new(FEATURE_DIM, FamilyKind::ALL.len(), (1.0 / FEATURE_DIM as f32).sqrt(), false, rng);
        Ok(Self { n, convs, embed, out, final_channels: c, final_spatial: 4 })
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    fn forward(&self, grids: &[f32]) -> (Tensor, Tensor, ExtractorCache) {
        let n = self.n;
        let b = grids.len() / (n * n * n);
        let mut h = Tensor::new(vec![1, b, n, n, n], grids.to_vec());
        let mut caches = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (y, cc) = conv.forward(&h);
            h = leaky_relu(y, LEAKY_SLOPE);
            caches.push((cc, h.clone()));
        }
        let (e, ec) = self.embed.forward(&flatten(&h));
        let act = leaky_relu(e.clone(), LEAKY_SLOPE);
        let (logits, oc) = self.out.forward(&act);
        (e, logits, ExtractorCache { convs: caches, embed: ec, embed_out: act, out: oc })
    }

    fn backward(&mut self, cache: &ExtractorCache, grad_logits: Tensor) {
        let g = self.out.backward(&cache.out, &grad_logits);
        let g = leaky_relu_backward(&cache.embed_out, g, LEAKY_SLOPE);
        let g = self.embed.backward(&cache.embed, &g);
        let s = self.final_spatial;
        let mut g = crate::nn::unflatten(&g, self.final_channels, [s, s, s]);
        for (conv, (cc, act)) in self.convs.iter_mut().zip(&cache.convs).rev() {
            g = leaky_relu_backward(act, g, LEAKY_SLOPE);
            g = conv.backward(cc, &g);
        }
    }

    /// Embeddings of binarized (threshold 0.5) grids.
    pub fn features(&self, grids: &[VoxelGrid]) -> Result<Vec<Vec<f64>>> {
        let vox = self.n * self.n * self.n;
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(128) {
            let mut flat = Vec::with_capacity(chunk.len() * vox);
            for g in chunk {
                if g.resolution() != self.n {
                    return Err(invalid(format!("grid resolution {} != extractor {}", g.resolution(), self.n)));
                }
                flat.extend(g.as_slice().iter().map(|&v| if v >= 0.5 { 1.0f32 } else { 0.0 }));
            }
            let (e, _, _) = self.forward(&flat);
            out.extend(e.data().chunks_exact(FEATURE_DIM).map(|r| r.iter().map(|&x| x as f64).collect()));
        }
        Ok(out)
    }

    /// Family predictions for binarized grids.
    pub fn classify(&self, grids: &[VoxelGrid]) -> Result<Vec<usize>> {
        let vox = self.n * self.n * self.n;
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(128) {
            let flat: Vec<f32> =
                chunk.iter().flat_map(|g| g.as_slice().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })).collect();
            if flat.len() != chunk.len() * vox {
                return Err(invalid("grid resolution does not match extractor"));
            }
            let (_, logits, _) = self.forward(&flat);
            out.extend(logits.data().chunks_exact(FamilyKind::ALL.len()).map(argmax));
        }
        Ok(out)
    }

    /// Trains on freshly sampled shapes of every family; returns the
    /// extractor and its accuracy on a held-out draw.
    pub fn train<R: Rng + ?Sized>(n: usize, cfg: &ExtractorTraining, rng: &mut R) -> Result<(Self, f64)> {
        if cfg.shapes_per_family == 0 || cfg.batch == 0 {
            return Err(invalid("extractor training needs shapes and a positive batch"));
        }
        let mut ex = Self::new(n, rng)?;
        let draw = |count: usize, rng: &mut R| -> Result<(Vec<VoxelGrid>, Vec<usize>)> {
            let mut grids = Vec::new();
            let mut labels = Vec::new();
            for kind in FamilyKind::ALL {
                let fam = ShapeFamily::of(kind);
                for _ in 0..count {
                    grids.push(sample_shape(&fam, n, rng)?);
                    labels.push(kind.index());
                }
            }
            Ok((grids, labels))
        };
        let (grids, labels) = draw(cfg.shapes_per_family, rng)?;
        let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
        let vox = n * n * n;
        for _ in 0..cfg.steps {
            let mut flat = Vec::with_capacity(cfg.batch * vox);
            let mut y = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let i = rng.random_range(0..grids.len());
                flat.extend_from_slice(grids[i].as_slice());
                y.push(labels[i]);
            }
            let (_, logits, cache) = ex.forward(&flat);
            let (_, grad) = softmax_cross_entropy(logits.data(), FamilyKind::ALL.len(), &y);
            ex.backward(&cache, Tensor::new(vec![cfg.batch, FamilyKind::ALL.len()], grad));
            opt.step(&mut ex);
        }
        let (test, truth) = draw(100, rng)?;
        let pred = ex.classify(&test)?;
        let acc = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        Ok((ex, acc))
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let mut c = Collector::default();
        self.visit("extractor", &mut c);
        Checkpoint {
            manifest: Manifest {
                net: NetConfig { resolution: self.n, heads: 1, ..NetConfig::default() },
                step: 0,
                seed: 0,
                extra: serde_json::json!({"kind": "extractor"}),
            },
            tensors: c.tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.manifest.extra.get("kind").and_then(|k| k.as_str()) != Some("extractor") {
            return Err(Error::Malformed("checkpoint does not hold a feature extractor".into()));
        }
        let mut ex = Self::new(ckpt.manifest.net.resolution, &mut crate::rng::seeded(0))?;
        let mut r = Restorer::new(ckpt);
        ex.visit("extractor", &mut r);
        r.finish()?;
        Ok(ex)
    }
}

impl Module for FeatureExtractor {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&crate::nn::join(prefix, &format!("conv{i}")), v);
        }
        self.embed.visit(&crate::nn::join(prefix, "embed"), v);
        self.out.visit(&crate::nn::join(prefix, "out"), v);
    }
}

/// Samples `count` shapes from the generator (evaluation mode).
pub fn sample_generator<R: Rng + ?Sized>(gen: &mut Generator, count: usize, rng: &mut R) -> Result<Vec<VoxelGrid>> {
    let latent = gen.latent();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let b = (count - out.len()).min(64);
        out.extend(gen.generate(&latent.sample(b, rng))?);
    }
    Ok(out)
}

/// FID between generator samples and reference shapes.
pub fn generator_fid<R: Rng + ?Sized>(
    gen: &mut Generator,
    extractor: &FeatureExtractor,
    reference: &[VoxelGrid],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let fake = sample_generator(gen, samples, rng)?;
    fid(&extractor.features(&fake)?, &extractor.features(reference)?)
}

/// Bin `b` and the bin whose silhouettes coincide with it for shapes that are
/// mirror-symmetric in `x` (azimuth `a` and `pi - a` give the same image).
pub fn mirror_bin(b: usize) -> usize {
    (7 + NUM_BINS - b) % NUM_BINS
}

/// Exact and mirror-tolerant accuracy of a classifier on labeled silhouettes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewAccuracy {
    pub exact: f64,
    pub up_to_mirror: f64,
}

pub fn view_accuracy(clf: &mut ViewClassifier, images: &[f32], bins: &[usize]) -> Result<ViewAccuracy> {
    let probs = clf.predict(images)?;
    if probs.len() != bins.len() {
        return Err(invalid(format!("{} images but {} labels", probs.len(), bins.len())));
    }
    let (mut exact, mut mirror) = (0usize, 0usize);
    for (p, &b) in probs.iter().zip(bins) {
        let guess = argmax(p);
        exact += (guess == b) as usize;
        mirror += (guess == b || guess == mirror_bin(b)) as usize;
    }
    let n = bins.len().max(1) as f64;
    Ok(ViewAccuracy { exact: exact as f64 / n, up_to_mirror: mirror as f64 / n })
}

/// Total variation between the size-weighted union of slot distributions and
/// the true bin histogram.
pub fn view_distribution_error(assignment: &ClusterAssignment, oracle: &OracleLabels) -> Result<f64> {
    let truth: ViewDistribution = oracle.histogram()?;
    Ok(assignment.union_distribution()?.total_variation(&truth))
}
