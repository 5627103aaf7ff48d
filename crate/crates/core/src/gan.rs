//! Multi-projection adversarial training.
//!
//! One cycle: a single generator batch is rendered once per projection slot
//! under that slot's view distribution; each discriminator head is updated
//! against its own independently drawn real batch (shared-stem gradients are
//! accumulated over heads and applied once); then the generator descends the
//! mean over heads of the non-saturating per-head loss.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Collector, Manifest, Restorer};
use crate::error::{invalid, Error, Result};
use crate::nets::{DiscriminatorSet, Generator, NetConfig};
use crate::nn::{log_sigmoid, log_sigmoid_grad, Adam, Module, Tensor};
use crate::projection::{render, render_backward, sample_viewpoint, RenderCache};
use crate::rng;
pub use crate::viewpoint::ProjectionSlot;

const STREAM_INIT: u64 = 0x494e;
const STREAM_STEP: u64 = 0x5354;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch: 32, lr: 1e-4, beta1: 0.5, beta2: 0.9 }
    }
}

/// Randomness consumed by training cycle `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> rng::Rng {
    rng::derive(seed, STREAM_STEP, step)
}

/// `mean log sigma(real) + mean log(1 - sigma(fake))`; the discriminator
/// ascends this.
pub fn discriminator_objective(real: &[f32], fake: &[f32]) -> f64 {
    mean(real.iter().map(|&s| log_sigmoid(s) as f64)) + mean(fake.iter().map(|&s| log_sigmoid(-s) as f64))
}

/// `sum_i mean log sigma(D_i(fake_i))`; the generator ascends this.
pub fn generator_objective(fake_per_head: &[Vec<f32>]) -> f64 {
    fake_per_head.iter().map(|f| mean(f.iter().map(|&s| log_sigmoid(s) as f64))).sum()
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.sum::<f64>() / n as f64
}

/// Gradients of the negated discriminator objective w.r.t. the scores.
pub fn discriminator_loss_grad(real: &[f32], fake: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let gr = real.iter().map(|&s| -log_sigmoid_grad(s) / real.len() as f32).collect();
    let gf = fake.iter().map(|&s| log_sigmoid_grad(-s) / fake.len() as f32).collect();
    (gr, gf)
}

/// Gradient of `-mean log sigma(fake) / heads` w.r.t. one head's scores.
pub fn generator_loss_grad(fake: &[f32], heads: usize) -> Vec<f32> {
    let scale = (fake.len() * heads) as f32;
    fake.iter().map(|&s| -log_sigmoid_grad(s) / scale).collect()
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Per-head discriminator loss (negated objective).
    pub d_loss: Vec<f64>,
    /// Generator loss averaged over heads: `-generator_objective / K`.
    pub g_loss: f64,
    pub wall_ms: f64,
}

/// Generator, discriminators and their optimizers.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Completed cycles.
    pub step: u64,
    pub gen: Generator,
    pub disc: DiscriminatorSet,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

impl ModelBundle {
    pub fn new(net: NetConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        net.validate()?;
        if train.batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        let mut r = rng::derive(seed, STREAM_INIT, 0);
        let gen = Generator::new(&net, &mut r)?;
        let disc = DiscriminatorSet::new(&net, &mut r)?;
        let opt_g = Adam::new(train.lr, train.beta1, train.beta2);
        let opt_d = Adam::new(train.lr, train.beta1, train.beta2);
        Ok(Self { net, train, seed, step: 0, gen, disc, opt_g, opt_d })
    }

    fn check_slots(&self, slots: &[ProjectionSlot]) -> Result<()> {
        if slots.len() != self.disc.heads() {
            return Err(invalid(format!("{} slots for {} discriminator heads", slots.len(), self.disc.heads())));
        }
        for (i, s) in slots.iter().enumerate() {
            if s.members.is_empty() {
                return Err(Error::Clustering(format!("slot {i} has no images")));
            }
            if s.data.size() != self.net.resolution {
                return Err(invalid(format!(
                    "slot {i} images are {0}x{0}, model resolution is {1}",
                    s.data.size(),
                    self.net.resolution
                )));
            }
        }
        Ok(())
    }

    /// Runs one training cycle; randomness is derived from `(seed, step)`.
    pub fn train_step(&mut self, slots: &[ProjectionSlot]) -> Result<StepMetrics> {
        self.check_slots(slots)?;
        let start = Instant::now();
        let mut r = step_rng(self.seed, self.step);
        let n = self.net.resolution;
        let (b, k) = (self.train.batch, slots.len());
        let vox = n * n * n;

        let z = self.gen.latent().sample(b, &mut r);
        let (volumes, gcache) = self.gen.forward(&z, true)?;

        // Render the same batch once per slot.
        let mut fakes: Vec<Vec<f32>> = Vec::with_capacity(k);
        let mut caches: Vec<Vec<RenderCache>> = Vec::with_capacity(k);
        for slot in slots {
            let mut images = Vec::with_capacity(b * n * n);
            let mut cs = Vec::with_capacity(b);
            for occ in volumes.data().chunks_exact(vox) {
                let view = sample_viewpoint(&slot.view, &mut r);
                let (sil, c) = render(n, occ, view);
                images.extend_from_slice(&sil);
                cs.push(c);
            }
            fakes.push(images);
            caches.push(cs);
        }
        let reals: Vec<Vec<f32>> = slots.iter().map(|s| s.sample_batch(b, &mut r)).collect();

        // Discriminator update.
        self.disc.refresh_spectral();
        let mut d_loss = Vec::with_capacity(k);
        for i in 0..k {
            let (rs, rc) = self.disc.forward(i, &reals[i])?;
            let (fs, fc) = self.disc.forward(i, &fakes[i])?;
            d_loss.push(-discriminator_objective(&rs, &fs));
            let (gr, gf) = discriminator_loss_grad(&rs, &fs);
            self.disc.backward(&rc, &gr);
            self.disc.backward(&fc, &gf);
        }
        self.opt_d.step(&mut self.disc);

        // Generator update against the refreshed discriminators.
        let mut grad_vol = vec![0.0f32; b * vox];
        let mut scores = Vec::with_capacity(k);
        for i in 0..k {
            let (fs, fc) = self.disc.forward(i, &fakes[i])?;
            let g = generator_loss_grad(&fs, k);
            let gimg = self.disc.backward(&fc, &g);
            for (j, cache) in caches[i].iter().enumerate() {
                render_backward(cache, &gimg[j * n * n..(j + 1) * n * n], &mut grad_vol[j * vox..(j + 1) * vox]);
            }
            scores.push(fs);
        }
        self.disc.zero_grad();
        self.gen.backward(&gcache, &Tensor::new(vec![b, vox], grad_vol));
        self.opt_g.step(&mut self.gen);

        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            d_loss,
            g_loss: -generator_objective(&scores) / k as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs `steps` cycles, writing one JSON line per cycle to `log` and
    /// calling `observe` after each.
    pub fn train(
        &mut self,
        slots: &[ProjectionSlot],
        steps: u64,
        mut log: Option<&mut dyn Write>,
        mut observe: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let m = self.train_step(slots)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                writeln!(w)?;
            }
            observe(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// Visits generator, discriminators and optimizer state under fixed prefixes.
    fn visit_all(&mut self, v: &mut dyn crate::nn::Visitor) {
        self.gen.visit("gen", v);
        self.disc.visit("disc", v);
        self.opt_g.visit_state("opt_g", v);
        self.opt_d.visit_state("opt_d", v);
        let mut cfg = vec![self.train.lr, self.train.beta1, self.train.beta2, self.train.batch as f32];
        v.buffer("train", &[4], &mut cfg);
        self.train = TrainConfig { lr: cfg[0], beta1: cfg[1], beta2: cfg[2], batch: cfg[3] as usize };
    }

    pub fn to_checkpoint(&mut self, extra: serde_json::Value) -> Checkpoint {
        let mut c = Collector::default();
        self.visit_all(&mut c);
        Checkpoint {
            manifest: Manifest { net: self.net.clone(), step: self.step, seed: self.seed, extra },
            tensors: c.tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        let mut bundle = Self::new(m.net.clone(), TrainConfig::default(), m.seed)?;
        let mut r = Restorer::new(ckpt);
        bundle.visit_all(&mut r);
        r.finish()?;
        bundle.opt_g.lr = bundle.train.lr;
        bundle.opt_g.beta1 = bundle.train.beta1;
        bundle.opt_g.beta2 = bundle.train.beta2;
        bundle.opt_d.lr = bundle.train.lr;
        bundle.opt_d.beta1 = bundle.train.beta1;
        bundle.opt_d.beta2 = bundle.train.beta2;
        bundle.step = m.step;
        Ok(bundle)
    }

    pub fn save(&mut self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let c = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&c)?, c.manifest.extra))
    }

    /// Digest over all weights, buffers and optimizer state.
    pub fn checksum(&mut self) -> u64 {
        self.gen.checksum() ^ self.disc.checksum().rotate_left(1)
    }
}
