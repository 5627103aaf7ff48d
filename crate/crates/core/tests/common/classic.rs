//! Scalar loss oracles and a plain single-discriminator training cycle.

use std::sync::Arc;

use mpgan::datagen::{build_dataset, DatasetSpec};
use mpgan::gan::{
    discriminator_loss_grad, discriminator_objective, generator_loss_grad, generator_objective, step_rng, ModelBundle,
    TrainConfig,
};
use mpgan::nets::NetConfig;
use mpgan::nn::{log_sigmoid_grad, Module, Tensor};
use mpgan::projection::{render, render_backward, sample_viewpoint};
use mpgan::rng;
use mpgan::viewpoint::{single_slot, ProjectionSlot};
use rand::Rng;

use super::suites::Outcome;

pub fn ln_sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// `mean ln D(real) + mean ln(1 - D(fake))` with `D = sigmoid(score)`.
pub fn d_objective_oracle(real: &[f32], fake: &[f32]) -> f64 {
    mean(real.iter().map(|&s| sigmoid(s as f64).ln())) + mean(fake.iter().map(|&s| (1.0 - sigmoid(s as f64)).ln()))
}

/// `sum_i mean ln D_i(fake_i)`.
pub fn g_objective_oracle(heads: &[Vec<f32>]) -> f64 {
    heads.iter().map(|h| mean(h.iter().map(|&s| ln_sigmoid(s as f64)))).sum()
}

/// Worst absolute deviation between the library losses (and their score
/// gradients) and the scalar oracles over random score vectors.
pub fn loss_equivalence(trials: usize, tol: f64) -> Outcome {
    let mut r = rng::seeded(0x10c5);
    let mut worst = 0.0f64;
    let draw = |r: &mut rng::Rng| -> Vec<f32> {
        let len = r.random_range(1..48);
        let scale = [0.1f32, 1.0, 5.0, 12.0][r.random_range(0..4)];
        (0..len).map(|_| r.random_range(-scale..=scale)).collect()
    };
    for _ in 0..trials {
        let real = draw(&mut r);
        let fake = draw(&mut r);
        let k = r.random_range(1..6);
        let heads: Vec<Vec<f32>> = (0..k).map(|_| draw(&mut r)).collect();
        worst = worst.max((discriminator_objective(&real, &fake) - d_objective_oracle(&real, &fake)).abs());
        worst = worst.max((generator_objective(&heads) - g_objective_oracle(&heads)).abs());
        let (gr, gf) = discriminator_loss_grad(&real, &fake);
        for (g, &s) in gr.iter().zip(&real) {
            worst = worst.max((*g as f64 + (1.0 - sigmoid(s as f64)) / real.len() as f64).abs());
        }
        for (g, &s) in gf.iter().zip(&fake) {
            worst = worst.max((*g as f64 - sigmoid(s as f64) / fake.len() as f64).abs());
        }
        for h in &heads {
            for (g, &s) in generator_loss_grad(h, k).iter().zip(h) {
                worst = worst.max((*g as f64 + (1.0 - sigmoid(s as f64)) / (h.len() * k) as f64).abs());
            }
        }
    }
    if worst <= tol {
        Ok(format!("{trials} random score sets, worst deviation {worst:.2e}"))
    } else {
        Err(format!("loss deviation {worst:.3e} exceeds {tol:e}"))
    }
}

/// A plain single-discriminator cycle written against the networks directly.
/// Returns the discriminator and generator losses.
pub fn classic_step(b: &mut ModelBundle, data: &ProjectionSlot) -> (f64, f64) {
    let n = b.net.resolution;
    let vox = n * n * n;
    let batch = b.train.batch;
    let mut r = step_rng(b.seed, b.step);
    let z = b.gen.latent().sample(batch, &mut r);
    let (volumes, gcache) = b.gen.forward(&z, true).unwrap();
    let mut fake = Vec::new();
    let mut caches = Vec::new();
    for occ in volumes.data().chunks_exact(vox) {
        let (sil, c) = render(n, occ, sample_viewpoint(&data.view, &mut r));
        fake.extend_from_slice(&sil);
        caches.push(c);
    }
    let real = data.sample_batch(batch, &mut r);

    b.disc.refresh_spectral();
    let (rs, rc) = b.disc.forward(0, &real).unwrap();
    let (fs, fc) = b.disc.forward(0, &fake).unwrap();
    let d_loss = -discriminator_objective(&rs, &fs);
    let gr: Vec<f32> = rs.iter().map(|&s| -log_sigmoid_grad(s) / batch as f32).collect();
    let gf: Vec<f32> = fs.iter().map(|&s| log_sigmoid_grad(-s) / batch as f32).collect();
    b.disc.backward(&rc, &gr);
    b.disc.backward(&fc, &gf);
    b.opt_d.step(&mut b.disc);

    let (fs, fc) = b.disc.forward(0, &fake).unwrap();
    let g: Vec<f32> = fs.iter().map(|&s| -log_sigmoid_grad(s) / batch as f32).collect();
    let gimg = b.disc.backward(&fc, &g);
    let mut grad_vol = vec![0.0f32; batch * vox];
    for (j, c) in caches.iter().enumerate() {
        render_backward(c, &gimg[j * n * n..(j + 1) * n * n], &mut grad_vol[j * vox..(j + 1) * vox]);
    }
    b.disc.zero_grad();
    b.gen.backward(&gcache, &Tensor::new(vec![batch, vox], grad_vol));
    b.opt_g.step(&mut b.gen);
    b.step += 1;
    (d_loss, -generator_objective(&[fs]))
}

/// Runs the library step with one slot next to [`classic_step`] on a copy of
/// the same model and compares losses and all weights bit for bit.
pub fn classic_equivalence(n: usize, steps: usize) -> Outcome {
    let mut spec = DatasetSpec::chairs(n, 0xc1a5);
    spec.shapes = 60;
    let data = build_dataset(&spec).map_err(|e| e.to_string())?;
    let slots = single_slot(Arc::new(data.training));
    let net = NetConfig { resolution: n, latent_dim: 16, gen_channels: 16, disc_channels: 8, heads: 1, symmetric: true };
    let mut a = ModelBundle::new(net, TrainConfig { batch: 8, lr: 1e-3, ..Default::default() }, 7).map_err(|e| e.to_string())?;
    let mut b = a.clone();
    for step in 0..steps {
        let m = a.train_step(&slots).map_err(|e| e.to_string())?;
        let (dl, gl) = classic_step(&mut b, &slots[0]);
        if m.d_loss != [dl] || m.g_loss != gl {
            return Err(format!("step {step}: losses {:?}/{} vs classic {dl}/{gl}", m.d_loss, m.g_loss));
        }
        if a.checksum() != b.checksum() {
            return Err(format!("step {step}: weights diverge from the classic step"));
        }
    }
    Ok(format!("{steps} steps at N={n} bitwise identical"))
}
