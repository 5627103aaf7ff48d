//! Generator, shared-stem discriminator set and view classifier.
//!
//! Desk-scale topology:
//!
//! - generator: dense projection to a `c0 x 4^3` volume (half extent along `x`
//!   when symmetric), then `log2(N/4)` stride-2 `4^3` transposed convolutions.
//!   Hidden blocks use batch norm and ReLU, the last block emits one channel
//!   through a sigmoid. Symmetric generators produce the `x < N/2` half and
//!   mirror it after the sigmoid.
//! - discriminators: `min(4, log2 N)` stride-2 `4x4` convolutions with leaky
//!   ReLU (slope 0.2) and a scalar dense output, spectral normalization on
//!   every layer. The first block is the stem shared by all heads.
//! - view classifier: the same convolutional topology with batch norm instead
//!   of spectral normalization and a 16-way softmax.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{
    flatten, leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax_rows,
    unflatten, BatchNorm, BatchNormCache, Conv, ConvCache, ConvTranspose, ConvTransposeCache, Dense, DenseCache,
    Module, Tensor, Visitor,
};
use crate::nn::join;
use crate::viewpoint::NUM_BINS;
use crate::voxel::{fold_gradient, mirror_into, VoxelGrid};

pub const LEAKY_SLOPE: f32 = 0.2;
const INIT_STD: f32 = 0.02;
/// Initial bias of the generator's output logits; sparse start (p ~ 0.05)
/// keeps early silhouettes from saturating.
const OUTPUT_BIAS: f32 = -3.0;

/// Shape of every network in a model bundle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Voxels per axis; also the silhouette width and height.
    pub resolution: usize,
    pub latent_dim: usize,
    /// Channels of the generator's base volume; halves per block.
    pub gen_channels: usize,
    /// Channels of the first discriminator/classifier block; doubles per block.
    pub disc_channels: usize,
    /// Number of discriminator heads (projections).
    pub heads: usize,
    pub symmetric: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { resolution: 32, latent_dim: 128, gen_channels: 64, disc_channels: 16, heads: 8, symmetric: true }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.resolution;
        if n < 8 || !n.is_power_of_two() {
            return Err(invalid(format!("resolution must be a power of two >= 8, got {n}")));
        }
        if self.latent_dim == 0 || self.heads == 0 || self.disc_channels == 0 {
            return Err(invalid("latent_dim, heads and disc_channels must be positive"));
        }
        let blocks = self.gen_blocks();
        if self.gen_channels >> (blocks - 1) == 0 {
            return Err(invalid(format!("gen_channels {} too small for {blocks} blocks", self.gen_channels)));
        }
        Ok(())
    }

    pub fn gen_blocks(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }

    pub fn disc_blocks(&self) -> usize {
        (self.resolution.trailing_zeros() as usize).min(4)
    }

    pub fn half_extent(&self) -> usize {
        if self.symmetric {
            self.resolution / 2
        } else {
            self.resolution
        }
    }
}

/// Latent vectors `z ~ N(0, I)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSpec {
    pub dim: usize,
}

impl LatentSpec {
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor {
        let data = (0..batch * self.dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f32>>();
        Tensor::new(vec![batch, self.dim], data)
    }
}

#[derive(Clone, Debug)]
struct GenBlock {
    conv: ConvTranspose,
    bn: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: NetConfig,
    base: [usize; 3],
    fc: Dense,
    bn0: BatchNorm,
    blocks: Vec<GenBlock>,
}

pub struct GeneratorCache {
    batch: usize,
    fc: DenseCache,
    bn0: BatchNormCache,
    act0: Tensor,
    blocks: Vec<(ConvTransposeCache, Option<(BatchNormCache, Tensor)>)>,
    output: Tensor,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let base = [if cfg.symmetric { 2 } else { 4 }, 4, 4];
        let c0 = cfg.gen_channels;
        let fc = Dense::new(cfg.latent_dim, c0 * base.iter().product::<usize>(), INIT_STD, false, rng);
        let nb = cfg.gen_blocks();
        let mut blocks = Vec::with_capacity(nb);
        let mut c = c0;
        for b in 0..nb {
            let last = b + 1 == nb;
            let out = if last { 1 } else { c / 2 };
            let mut conv = ConvTranspose::new_3d(c, out, 4, 2, 1, INIT_STD, rng);
            if last {
                conv.bias.value.iter_mut().for_each(|v| *v = OUTPUT_BIAS);
            }
            blocks.push(GenBlock { conv, bn: (!last).then(|| BatchNorm::new(out)) });
            c = out;
        }
        Ok(Self { cfg: cfg.clone(), base, fc, bn0: BatchNorm::new(c0), blocks })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn latent(&self) -> LatentSpec {
        LatentSpec { dim: self.cfg.latent_dim }
    }

    /// Maps `[B, latent]` to `[B, N^3]` occupancies in `(0,1)`; symmetric
    /// generators return exactly mirrored grids.
    pub fn forward(&mut self, z: &Tensor, train: bool) -> Result<(Tensor, GeneratorCache)> {
        if z.shape().len() != 2 || z.shape()[1] != self.cfg.latent_dim {
            return Err(invalid(format!("latent batch {:?} does not match dimension {}", z.shape(), self.cfg.latent_dim)));
        }
        let batch = z.shape()[0];
        let (h, fc) = self.fc.forward(z);
        let h = unflatten(&h, self.cfg.gen_channels, self.base);
        let (h, bn0) = self.bn0.forward(&h, train);
        let act0 = relu(h);
        let mut x = act0.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, cc) = block.conv.forward(&x);
            match &mut block.bn {
                Some(bn) => {
                    let (y, bc) = bn.forward(&y, train);
                    let a = relu(y);
                    caches.push((cc, Some((bc, a.clone()))));
                    x = a;
                }
                None => {
                    caches.push((cc, None));
                    x = y;
                }
            }
        }
        let output = sigmoid(x);
        let n = self.cfg.resolution;
        let vol = n * n * n;
        let per = output.len() / batch;
        let mut grids = vec![0.0; batch * vol];
        for b in 0..batch {
            let src = &output.data()[b * per..(b + 1) * per];
            let dst = &mut grids[b * vol..(b + 1) * vol];
            if self.cfg.symmetric {
                mirror_into(n, src, dst);
            } else {
                dst.copy_from_slice(src);
            }
        }
        let cache = GeneratorCache { batch, fc, bn0, act0, blocks: caches, output };
        Ok((Tensor::new(vec![batch, vol], grids), cache))
    }

    /// Accumulates parameter gradients from `d L / d grids` (`[B, N^3]`).
    pub fn backward(&mut self, cache: &GeneratorCache, grad: &Tensor) {
        let n = self.cfg.resolution;
        let vol = n * n * n;
        let per = cache.output.len() / cache.batch;
        let mut g = vec![0.0; cache.output.len()];
        for b in 0..cache.batch {
            let src = &grad.data()[b * vol..(b + 1) * vol];
            let dst = &mut g[b * per..(b + 1) * per];
            if self.cfg.symmetric {
                fold_gradient(n, src, dst);
            } else {
                dst.copy_from_slice(src);
            }
        }
        let mut g = sigmoid_backward(&cache.output, Tensor::new(cache.output.shape().to_vec(), g));
        for (block, (cc, bn)) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            if let (Some(layer), Some((bc, act))) = (&mut block.bn, bn) {
                g = relu_backward(act, g);
                g = layer.backward(bc, &g);
            }
            g = block.conv.backward(cc, &g);
        }
        g = relu_backward(&cache.act0, g);
        g = self.bn0.backward(&cache.bn0, &g);
        let g = flatten(&g);
        self.fc.backward(&cache.fc, &g);
    }

    /// Evaluation-mode sampling into grids.
    pub fn generate(&mut self, z: &Tensor) -> Result<Vec<VoxelGrid>> {
        let (t, _) = self.forward(z, false)?;
        let n = self.cfg.resolution;
        Ok(t.data()
            .chunks_exact(n * n * n)
            .map(|c| VoxelGrid::from_vec_clamped(n, c.to_vec()).expect("validated resolution"))
            .collect())
    }
}

impl Module for Generator {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.fc.visit(&join(prefix, "fc"), v);
        self.bn0.visit(&join(prefix, "bn0"), v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit(&join(prefix, &format!("block{i}.conv")), v);
            if let Some(bn) = &mut b.bn {
                bn.visit(&join(prefix, &format!("block{i}.bn")), v);
            }
        }
    }
}

/// A chain of stride-2 `4x4` convolution blocks with leaky ReLU.
#[derive(Clone, Debug)]
struct ConvStack {
    layers: Vec<(Conv, Option<BatchNorm>)>,
}

struct StackCache {
    items: Vec<(ConvCache, Option<BatchNormCache>, Tensor)>,
}

impl ConvStack {
    fn new<R: Rng + ?Sized>(channels: &[usize], spectral: bool, batch_norm: bool, rng: &mut R) -> Self {
        let layers = channels
            .windows(2)
            .map(|w| {
                let conv = Conv::new_2d(w[0], w[1], 4, 2, 1, INIT_STD, spectral, rng);
                (conv, batch_norm.then(|| BatchNorm::new(w[1])))
            })
            .collect();
        Self { layers }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, StackCache) {
        let mut items = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (conv, bn) in &mut self.layers {
            let (y, cc) = conv.forward(&h);
            let (y, bc) = match bn {
                Some(bn) => {
                    let (y, bc) = bn.forward(&y, train);
                    (y, Some(bc))
                }
                None => (y, None),
            };
            h = leaky_relu(y, LEAKY_SLOPE);
            items.push((cc, bc, h.clone()));
        }
        (h, StackCache { items })
    }

    fn backward(&mut self, cache: &StackCache, grad: Tensor) -> Tensor {
        let mut g = grad;
        for ((conv, bn), (cc, bc, act)) in self.layers.iter_mut().zip(&cache.items).rev() {
            g = leaky_relu_backward(act, g, LEAKY_SLOPE);
            if let (Some(bn), Some(bc)) = (bn.as_mut(), bc) {
                g = bn.backward(bc, &g);
            }
            g = conv.backward(cc, &g);
        }
        g
    }

    fn refresh_spectral(&mut self) {
        for (conv, _) in &mut self.layers {
            conv.weights.refresh_spectral();
        }
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        for (i, (conv, bn)) in self.layers.iter_mut().enumerate() {
            conv.visit(&join(prefix, &format!("conv{i}")), v);
            if let Some(bn) = bn {
                bn.visit(&join(prefix, &format!("bn{i}")), v);
            }
        }
    }
}

fn image_tensor(images: &[f32], size: usize) -> Result<Tensor> {
    let px = size * size;
    if images.is_empty() || images.len() % px != 0 {
        return Err(invalid(format!("image batch of {} values is not a multiple of {size}x{size}", images.len())));
    }
    Ok(Tensor::new(vec![1, images.len() / px, 1, size, size], images.to_vec()))
}

fn stack_channels(cfg: &NetConfig) -> Vec<usize> {
    let mut ch = vec![1];
    for b in 0..cfg.disc_blocks() {
        ch.push(cfg.disc_channels << b);
    }
    ch
}

#[derive(Clone, Debug)]
struct Head {
    convs: ConvStack,
    fc: Dense,
}

/// `K` discriminators sharing their first convolution block.
#[derive(Clone, Debug)]
pub struct DiscriminatorSet {
    size: usize,
    stem: ConvStack,
    heads: Vec<Head>,
    final_channels: usize,
    final_spatial: usize,
}

pub struct DiscriminatorCache {
    head: usize,
    stem: StackCache,
    body: StackCache,
    fc: DenseCache,
}

impl DiscriminatorSet {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = stack_channels(cfg);
        let stem = ConvStack::new(&ch[..2], true, false, rng);
        let final_spatial = cfg.resolution >> cfg.disc_blocks();
        let final_channels = *ch.last().unwrap();
        let heads = (0..cfg.heads)
            .map(|_| Head {
                convs: ConvStack::new(&ch[1..], true, false, rng),
                fc: Dense::new(final_channels * final_spatial * final_spatial, 1, INIT_STD, true, rng),
            })
            .collect();
        Ok(Self { size: cfg.resolution, stem, heads, final_channels, final_spatial })
    }

    pub fn heads(&self) -> usize {
        self.heads.len()
    }

    /// Advances every layer's spectral-norm estimate by one power iteration.
    pub fn refresh_spectral(&mut self) {
        self.stem.refresh_spectral();
        for h in &mut self.heads {
            h.convs.refresh_spectral();
            h.fc.weights.refresh_spectral();
        }
    }

    /// Raw scores (logits) of head `head` for a batch of `size x size` images
    /// stored back to back.
    pub fn forward(&mut self, head: usize, images: &[f32]) -> Result<(Vec<f32>, DiscriminatorCache)> {
        if head >= self.heads.len() {
            return Err(invalid(format!("head {head} out of range for {} heads", self.heads.len())));
        }
        let x = image_tensor(images, self.size)?;
        let (h, stem) = self.stem.forward(&x, true);
        let hd = &mut self.heads[head];
        let (h, body) = hd.convs.forward(&h, true);
        let (scores, fc) = hd.fc.forward(&flatten(&h));
        Ok((scores.into_data(), DiscriminatorCache { head, stem, body, fc }))
    }

    /// Accumulates gradients into the stem and the cached head; returns
    /// `d L / d images`.
    pub fn backward(&mut self, cache: &DiscriminatorCache, grad_scores: &[f32]) -> Vec<f32> {
        let hd = &mut self.heads[cache.head];
        let g = hd.fc.backward(&cache.fc, &Tensor::new(vec![grad_scores.len(), 1], grad_scores.to_vec()));
        let g = unflatten(&g, self.final_channels, [1, self.final_spatial, self.final_spatial]);
        let g = hd.convs.backward(&cache.body, g);
        self.stem.backward(&cache.stem, g).into_data()
    }

    /// Weight matrices of every layer as `(name, normalized weight, rows, cols)`.
    pub fn normalized_weights(&self) -> Vec<(String, Vec<f32>, usize, usize)> {
        let mut out = Vec::new();
        let mut push = |name: String, w: &crate::nn::Weights| {
            out.push((name, w.effective().0.into_owned(), w.rows(), w.cols()));
        };
        for (i, (c, _)) in self.stem.layers.iter().enumerate() {
            push(format!("stem.conv{i}"), &c.weights);
        }
        for (h, head) in self.heads.iter().enumerate() {
            for (i, (c, _)) in head.convs.layers.iter().enumerate() {
                push(format!("head{h}.conv{i}"), &c.weights);
            }
            push(format!("head{h}.fc"), &head.fc.weights);
        }
        out
    }
}

impl Module for DiscriminatorSet {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.stem.visit(&join(prefix, "stem"), v);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.convs.visit(&join(prefix, &format!("head{i}")), v);
            h.fc.visit(&join(prefix, &format!("head{i}.fc")), v);
        }
    }
}

/// 16-way view-bin classifier over silhouettes.
#[derive(Clone, Debug)]
pub struct ViewClassifier {
    size: usize,
    convs: ConvStack,
    fc: Dense,
    final_channels: usize,
    final_spatial: usize,
}

pub struct ClassifierCache {
    body: StackCache,
    fc: DenseCache,
}

impl ViewClassifier {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = stack_channels(cfg);
        let final_spatial = cfg.resolution >> cfg.disc_blocks();
        let final_channels = *ch.last().unwrap();
        Ok(Self {
            size: cfg.resolution,
            convs: ConvStack::new(&ch, false, true, rng),
            fc: Dense::new(final_channels * final_spatial * final_spatial, NUM_BINS, INIT_STD, false, rng),
            final_channels,
            final_spatial,
        })
    }

    /// Logits `[B, 16]`.
    pub fn forward(&mut self, images: &[f32], train: bool) -> Result<(Vec<f32>, ClassifierCache)> {
        let x = image_tensor(images, self.size)?;
        let (h, body) = self.convs.forward(&x, train);
        let (logits, fc) = self.fc.forward(&flatten(&h));
        Ok((logits.into_data(), ClassifierCache { body, fc }))
    }

    pub fn backward(&mut self, cache: &ClassifierCache, grad_logits: &[f32]) {
        let b = grad_logits.len() / NUM_BINS;
        let g = self.fc.backward(&cache.fc, &Tensor::new(vec![b, NUM_BINS], grad_logits.to_vec()));
        let g = unflatten(&g, self.final_channels, [1, self.final_spatial, self.final_spatial]);
        self.convs.backward(&cache.body, g);
    }

    /// Evaluation-mode view probabilities, one 16-vector per image.
    pub fn predict(&mut self, images: &[f32]) -> Result<Vec<[f32; NUM_BINS]>> {
        let px = self.size * self.size;
        let mut out = Vec::with_capacity(images.len() / px.max(1));
        for chunk in images.chunks(px * 256) {
            let (logits, _) = self.forward(chunk, false)?;
            for row in softmax_rows(&logits, NUM_BINS).chunks_exact(NUM_BINS) {
                out.push(row.try_into().unwrap());
            }
        }
        Ok(out)
    }
}

impl Module for ViewClassifier {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.convs.visit(&join(prefix, "convs"), v);
        self.fc.visit(&join(prefix, "fc"), v);
    }
}
