//! Property suites shared by the integration tests and the acceptance binary.
//! Each returns a one-line summary or the first failure.

use std::fmt::Debug;

use mpgan::eval::{fid, FeatureExtractor};
use mpgan::nets::{Generator, NetConfig};
use mpgan::projection::{silhouette_from_grid, silhouette_gradient, Viewpoint};
use mpgan::rng;
use mpgan::viewpoint::{cluster_views, kmeans, oracle_assignment, ViewDistribution, NUM_BINS, PRUNE_FRACTION};
use mpgan::voxel::{mirror_symmetric, HalfGrid, VoxelGrid};
use mpgan::datagen::{sample_shape, FamilyKind, ShapeFamily};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Outcome = Result<String, String>;

fn runner(cases: u32) -> TestRunner {
    let cfg = Config { cases, failure_persistence: None, max_shrink_iters: 64, ..Config::default() };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S>(name: &str, cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

pub fn random_binary_grid(n: usize, density: f64, seed: u64) -> VoxelGrid {
    let mut r = rng::seeded(seed);
    VoxelGrid::from_vec(n, (0..n * n * n).map(|_| if r.random::<f64>() < density { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Exact set projection at azimuth `quarter * pi/2`: the maximum along each
/// ray, with the ray geometry written out per quarter turn.
pub fn max_projection(g: &VoxelGrid, quarter: usize) -> Vec<f32> {
    let n = g.resolution();
    let mut out = vec![0.0f32; n * n];
    for row in 0..n {
        let y = n - 1 - row;
        for col in 0..n {
            let ray = (0..n).map(|t| match quarter % 4 {
                0 => g.get(col, y, t),
                1 => g.get(t, y, n - 1 - col),
                2 => g.get(n - 1 - col, y, t),
                _ => g.get(t, y, col),
            });
            out[row * n + col] = ray.fold(0.0, f32::max);
        }
    }
    out
}

fn quarter_view(q: usize) -> Viewpoint {
    Viewpoint::new(q as f64 * std::f64::consts::FRAC_PI_2)
}

/// Binary grids at axis-aligned azimuths render to their exact max projection.
pub fn projection_oracle(grids: u32, n: usize) -> Outcome {
    run("binary max-projection", grids, (any::<u64>(), 0.0f64..0.4), |(seed, density)| {
        let g = random_binary_grid(n, density, seed);
        for q in 0..4 {
            let sil = silhouette_from_grid(&g, quarter_view(q));
            if sil.as_slice() != max_projection(&g, q).as_slice() {
                return Err(fail(format!("quarter {q} differs from the max projection")));
            }
        }
        Ok(())
    })?;
    Ok(format!("{grids} binary {n}^3 grids x 4 axis-aligned azimuths match exactly"))
}

/// Soft grid whose rays stay partly transparent, so every voxel has a
/// resolvable gradient.
pub fn random_soft_grid(n: usize, seed: u64) -> VoxelGrid {
    let mut r = rng::seeded(seed);
    VoxelGrid::from_vec(n, (0..n * n * n).map(|_| 0.05 + 0.55 * r.random::<f32>().powi(2)).collect()).unwrap()
}

/// Independent f64 projection: bilinear resampling in the horizontal plane
/// at `R_y(azimuth) q` about the grid center (zero outside), then
/// `1 - prod (1 - x)` along rotated `z`; pixel `(row, col)` covers
/// `x = col, y = N-1-row`.
pub fn render_f64(n: usize, occ: &[f64], azimuth: f64) -> Vec<f64> {
    let (s, c) = azimuth.sin_cos();
    let center = (n as f64 - 1.0) / 2.0;
    let at = |x: f64, y: usize, z: f64| -> f64 {
        if x < 0.0 || z < 0.0 || x > (n - 1) as f64 || z > (n - 1) as f64 {
            return 0.0;
        }
        occ[(x as usize * n + y) * n + z as usize]
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for y in 0..n {
            let mut escape = 1.0;
            for k in 0..n {
                let (qx, qz) = (i as f64 - center, k as f64 - center);
                let sx = c * qx + s * qz + center;
                let sz = -s * qx + c * qz + center;
                let (x0, z0) = (sx.floor(), sz.floor());
                let (fx, fz) = (sx - x0, sz - z0);
                let v = (1.0 - fx) * (1.0 - fz) * at(x0, y, z0)
                    + fx * (1.0 - fz) * at(x0 + 1.0, y, z0)
                    + (1.0 - fx) * fz * at(x0, y, z0 + 1.0)
                    + fx * fz * at(x0 + 1.0, y, z0 + 1.0);
                escape *= 1.0 - v;
            }
            out[(n - 1 - y) * n + i] = 1.0 - escape;
        }
    }
    out
}

/// Largest relative error between the analytic silhouette gradient and
/// central differences of the f64 projection over every voxel of one random
/// configuration. Also returns the largest forward discrepancy.
pub fn projection_gradient_error(n: usize, seed: u64, h: f64) -> (f64, f64) {
    let g = random_soft_grid(n, seed);
    let mut r = rng::seeded(seed ^ 0x9e37);
    let az = r.random_range(0.0..std::f64::consts::TAU);
    let view = Viewpoint::new(az);
    let upstream: Vec<f32> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
    let analytic = silhouette_gradient(&g, view, &upstream).unwrap();
    let mut data: Vec<f64> = g.as_slice().iter().map(|&v| v as f64).collect();
    let forward = silhouette_from_grid(&g, view)
        .as_slice()
        .iter()
        .zip(render_f64(n, &data, az))
        .fold(0.0f64, |m, (&a, b)| m.max((a as f64 - b).abs()));
    let loss = |data: &[f64]| render_f64(n, data, az).iter().zip(&upstream).map(|(s, &u)| s * u as f64).sum::<f64>();
    let scale = analytic.iter().fold(0.0f64, |m, &a| m.max(a.abs() as f64));
    let mut worst = 0.0f64;
    for i in 0..data.len() {
        let x = data[i];
        data[i] = x + h;
        let up = loss(&data);
        data[i] = x - h;
        let down = loss(&data);
        data[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2 * scale);
        worst = worst.max(err);
    }
    (worst, forward)
}

pub fn projection_gradients(seeds: u32, n: usize, tol: f64) -> Outcome {
    let h = 1e-3;
    let (mut worst, mut fwd) = (0.0f64, 0.0f64);
    for seed in 0..seeds as u64 {
        let (e, f) = projection_gradient_error(n, seed, h);
        if e > tol {
            return Err(format!("seed {seed}: gradient relative error {e:.3e} > {tol:e}"));
        }
        if f > 1e-5 {
            return Err(format!("seed {seed}: forward differs from the f64 projection by {f:.3e}"));
        }
        worst = worst.max(e);
        fwd = fwd.max(f);
    }
    Ok(format!("{seeds} seeds at {n}^3, every voxel checked (h = {h:e}), worst relative error {worst:.2e}, forward agreement {fwd:.1e}"))
}

fn half_grid() -> impl Strategy<Value = HalfGrid> {
    (1usize..=8, any::<u64>()).prop_map(|(k, seed)| {
        let n = 2 * k;
        let mut r = rng::seeded(seed);
        HalfGrid::from_vec(n, (0..n * n * n / 2).map(|_| r.random::<f32>()).collect()).unwrap()
    })
}

/// Grid values drawn to include the interval's edge cases.
fn awkward_grid() -> impl Strategy<Value = VoxelGrid> {
    let value = prop_oneof![
        Just(0.0f32),
        Just(-0.0f32),
        Just(1.0f32),
        Just(f32::MIN_POSITIVE),
        Just(f32::from_bits(1)),
        Just(1.0 - f32::EPSILON / 2.0),
        0.0f32..=1.0,
    ];
    (1usize..=3).prop_flat_map(move |k| {
        let n = 2 * k;
        proptest::collection::vec(value.clone(), n * n * n).prop_map(move |d| VoxelGrid::from_vec(n, d).unwrap())
    })
}

/// Mirroring, binarization, the voxel file format and symmetric generation.
pub fn symmetry_suite(cases: u32) -> Outcome {
    run("mirror reflection", cases, half_grid(), |h| {
        let g = mirror_symmetric(&h);
        let n = g.resolution();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    if g.get(x, y, z) != g.get(n - 1 - x, y, z) {
                        return Err(fail(format!("({x},{y},{z}) differs from its reflection")));
                    }
                    if x < n / 2 && g.get(x, y, z) != h.get(x, y, z) {
                        return Err(fail(format!("({x},{y},{z}) differs from the half grid")));
                    }
                }
            }
        }
        Ok(())
    })?;
    run("binarize idempotent", cases, (half_grid(), 0.001f32..0.999), |(h, t)| {
        let g = mirror_symmetric(&h);
        let once = g.binarize(t).unwrap();
        prop_assert_eq!(once.binarize(t).unwrap(), once);
        Ok(())
    })?;
    run("file round trip", cases, awkward_grid(), |g| {
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let back = VoxelGrid::read_from(buf.as_slice()).map_err(|e| fail(e.to_string()))?;
        let same = back.as_slice().iter().zip(g.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same && back.resolution() == g.resolution());
        Ok(())
    })?;
    let gen_cases = (cases / 8).max(8);
    run("symmetric generator", gen_cases, (any::<u64>(), prop_oneof![Just(8usize), Just(16)], 0.1f32..50.0), |(seed, n, scale)| {
        let cfg = NetConfig { resolution: n, latent_dim: 16, gen_channels: 16, disc_channels: 4, heads: 1, symmetric: true };
        let mut r = rng::seeded(seed);
        let mut g = Generator::new(&cfg, &mut r).unwrap();
        let mut z = g.latent().sample(4, &mut r);
        z.data_mut().iter_mut().for_each(|v| *v *= scale);
        let (train, _) = g.forward(&z, true).unwrap();
        let mut grids: Vec<VoxelGrid> =
            train.data().chunks_exact(n * n * n).map(|c| VoxelGrid::from_vec(n, c.to_vec()).unwrap()).collect();
        grids.extend(g.generate(&z).unwrap());
        prop_assert!(grids.iter().all(VoxelGrid::is_x_symmetric));
        Ok(())
    })?;
    run("procedural shapes", cases, (any::<u64>(), 0usize..3), |(seed, fam)| {
        let g = sample_shape(&ShapeFamily::of(FamilyKind::ALL[fam]), 16, &mut rng::seeded(seed)).unwrap();
        prop_assert!(g.is_x_symmetric());
        Ok(())
    })?;
    Ok(format!("mirror, binarize, file format ({cases} cases each), generator ({gen_cases}), procedural shapes"))
}

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

fn one_hot(bin: usize) -> [f32; NUM_BINS] {
    let mut p = [0.0; NUM_BINS];
    p[bin] = 1.0;
    p
}

/// Expected slot histogram: normalized arg-max counts with bins under 10%
/// removed, then renormalized.
fn pruned_histogram(bins: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut counts = vec![0.0; NUM_BINS];
    bins.for_each(|b| counts[b] += 1.0);
    let total: f64 = counts.iter().sum();
    let kept: Vec<f64> = counts.iter().map(|c| if c / total < PRUNE_FRACTION { 0.0 } else { c / total }).collect();
    let s: f64 = kept.iter().sum();
    kept.iter().map(|k| k / s).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// K-means monotonicity on `instances` random problems plus the view
/// clustering invariants.
pub fn clustering_suite(instances: u32) -> Outcome {
    let problem = (any::<u64>(), 1usize..=8, 2usize..=16, 20usize..=200);
    run("k-means objective non-increasing", instances, problem, |(seed, k, dim, n)| {
        let mut r = rng::seeded(seed);
        let centers: Vec<Vec<f64>> = (0..k + 2).map(|_| (0..dim).map(|_| 3.0 * normal(&mut r)).collect()).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centers[r.random_range(0..centers.len())];
                c.iter().map(|x| x + normal(&mut r)).collect()
            })
            .collect();
        let km = kmeans(&points, k, 100, 1e-6, &mut r).map_err(|e| fail(e.to_string()))?;
        for w in km.objective.windows(2) {
            if w[1] > w[0] * (1.0 + 1e-12) + 1e-12 {
                return Err(fail(format!("objective rose from {} to {}", w[0], w[1])));
            }
        }
        let mut sizes = vec![0; k];
        km.labels.iter().for_each(|&l| sizes[l] += 1);
        prop_assert!(sizes.iter().all(|&s| s > 0), "empty cluster: {:?}", sizes);
        Ok(())
    })?;

    run("identical vectors share one centroid", 32, (any::<u64>(), 1usize..=6, 6usize..40), |(seed, k, n)| {
        let mut r = rng::seeded(seed);
        let v: Vec<f64> = (0..NUM_BINS).map(|_| r.random::<f64>()).collect();
        let points = vec![v.clone(); n];
        let km = kmeans(&points, k, 100, 1e-6, &mut r).map_err(|e| fail(e.to_string()))?;
        prop_assert!(km.centroids.iter().all(|c| close(c, &v, 1e-12)));
        prop_assert!(*km.objective.last().unwrap() <= 1e-20);
        Ok(())
    })?;

    let histogram = (proptest::collection::vec(0.0f64..1.0, NUM_BINS), 0..NUM_BINS, 1.6f64..20.0);
    run("pruning keeps the mode", 256, histogram, |(mut w, peak, boost)| {
        // A cluster's dominant bin holds at least 10% of its members.
        w[peak] += boost;
        let d = ViewDistribution::from_weights_unnormalized(&w).map_err(|e| fail(e.to_string()))?;
        let p = d.pruned(PRUNE_FRACTION).map_err(|e| fail(e.to_string()))?;
        let mode = (0..NUM_BINS).max_by(|&a, &b| d.weights()[a].total_cmp(&d.weights()[b])).unwrap();
        prop_assert!(p.weights()[mode] > 0.0);
        prop_assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.weights().iter().zip(d.weights()).all(|(&a, &b)| a == 0.0 || b >= PRUNE_FRACTION));
        Ok(())
    })?;
    if ViewDistribution::uniform().pruned(PRUNE_FRACTION).is_ok() {
        return Err("pruning a flat histogram below 10% everywhere should be an error".into());
    }

    run("bimodal vectors cluster together", 32, any::<u64>(), |seed| {
        let mut r = rng::seeded(seed);
        let mut probs = Vec::new();
        // Front/back ambiguous images split their mass between bins 3 and 11.
        for _ in 0..60 {
            let e = r.random_range(-0.1f32..0.1);
            let mut p = [0.0; NUM_BINS];
            p[3] = 0.5 + e;
            p[11] = 0.5 - e;
            probs.push(p);
        }
        for _ in 0..60 {
            let e = r.random_range(0.0f32..0.2);
            let mut p = [0.0; NUM_BINS];
            p[7] = 1.0 - e;
            p[8] = e;
            probs.push(p);
        }
        let a = cluster_views(&probs, 2, false, &mut r).map_err(|e| fail(e.to_string()))?;
        let first = a.labels[0];
        prop_assert!(a.labels[..60].iter().all(|&l| l == first));
        prop_assert!(a.labels[60..].iter().all(|&l| l != first));
        let hist = a.distributions[first].weights();
        prop_assert!(hist[3] > 0.0 && hist[11] > 0.0 && (hist[3] + hist[11] - 1.0).abs() < 1e-9);
        Ok(())
    })?;

    run("separated one-hot populations", 16, (any::<u64>(), 2usize..40, 2usize..40), |(seed, a, b)| {
        let mut probs = vec![one_hot(2); a];
        probs.extend(vec![one_hot(10); b]);
        let asg = cluster_views(&probs, 2, false, &mut rng::seeded(seed)).map_err(|e| fail(e.to_string()))?;
        prop_assert!(asg.labels[..a].iter().all(|&l| l == asg.labels[0]));
        prop_assert!(asg.labels[a..].iter().all(|&l| l != asg.labels[0]));
        prop_assert_eq!(asg.distributions[asg.labels[0]].clone(), ViewDistribution::one_hot(2));
        prop_assert_eq!(asg.distributions[asg.labels[a]].clone(), ViewDistribution::one_hot(10));
        Ok(())
    })?;

    run("single cluster histogram", 32, (any::<u64>(), 16usize..200), |(seed, n)| {
        let mut r = rng::seeded(seed);
        let probs: Vec<[f32; NUM_BINS]> = (0..n)
            .map(|_| {
                // Predictions favour four bins, so the arg-max histogram has a mode above 10%.
                let mut p = [0.0f32; NUM_BINS];
                p.iter_mut().for_each(|x| *x = r.random::<f32>().powi(4));
                p[4 * r.random_range(0..4)] += 1.0;
                let s: f32 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
                p
            })
            .collect();
        let a = cluster_views(&probs, 1, false, &mut r).map_err(|e| fail(e.to_string()))?;
        prop_assert!(a.labels.iter().all(|&l| l == 0));
        let argmax = probs.iter().map(|p| (0..NUM_BINS).max_by(|&i, &j| p[i].total_cmp(&p[j]).then(j.cmp(&i))).unwrap());
        prop_assert!(close(a.distributions[0].weights(), &pruned_histogram(argmax), 1e-12));
        Ok(())
    })?;

    let mut w = [0.0; NUM_BINS];
    w[1] = 0.92;
    w[2] = 0.08;
    let p = ViewDistribution::new(&w).and_then(|d| d.pruned(PRUNE_FRACTION)).map_err(|e| e.to_string())?;
    if p != ViewDistribution::one_hot(1) {
        return Err(format!("pruning {{0.92, 0.08}} gave {:?}", p.weights()));
    }

    run("oracle slots merge bin pairs", 16, any::<u64>(), |seed| {
        let mut r = rng::seeded(seed);
        let mut bins: Vec<usize> = (0..NUM_BINS).collect();
        bins.extend((0..200).map(|_| r.random_range(0..NUM_BINS)));
        let a = oracle_assignment(&bins, 8).map_err(|e| fail(e.to_string()))?;
        for (s, d) in a.distributions.iter().enumerate() {
            let support: Vec<usize> = (0..NUM_BINS).filter(|&b| d.weights()[b] > 0.0).collect();
            prop_assert_eq!(support, vec![2 * s, 2 * s + 1]);
        }
        Ok(())
    })?;
    Ok(format!("k-means monotone on {instances} instances; identical, pruning, bimodal, one-hot, K=1, oracle-slot cases"))
}

/// Flips each voxel with probability `p`.
pub fn corrupt(grids: &[VoxelGrid], p: f64, seed: u64) -> Vec<VoxelGrid> {
    let mut r = rng::seeded(seed);
    grids
        .iter()
        .map(|g| {
            let data = g.as_slice().iter().map(|&v| if r.random::<f64>() < p { 1.0 - v } else { v }).collect();
            VoxelGrid::from_vec(g.resolution(), data).unwrap()
        })
        .collect()
}

fn gaussian_cloud(n: usize, shift: &[f64], r: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| shift.iter().map(|s| s + normal(r)).collect()).collect()
}

/// FID on identical sets, against the Gaussian closed form, under increasing
/// corruption, symmetry and separation from noise grids. `reference` should
/// hold at least a few hundred real shapes.
pub fn fid_self_tests(extractor: &FeatureExtractor, reference: &[VoxelGrid]) -> Outcome {
    let feats = extractor.features(reference).map_err(|e| e.to_string())?;
    let same = fid(&feats, &feats).map_err(|e| e.to_string())?;
    if same > 1e-4 {
        return Err(format!("FID(A, A) = {same:e}"));
    }

    let mut r = rng::seeded(17);
    let d = 4;
    let shift: Vec<f64> = (0..d).map(|i| if i == 0 { 2.0 } else { 0.0 }).collect();
    let a = gaussian_cloud(20_000, &vec![0.0; d], &mut r);
    let b = gaussian_cloud(20_000, &shift, &mut r);
    let gauss = fid(&a, &b).map_err(|e| e.to_string())?;
    if (gauss - 4.0).abs() > 0.2 {
        return Err(format!("Gaussian clouds with mean offset 2: FID {gauss:.4}, closed form 4"));
    }

    let half = reference.len() / 2;
    let (fa, fb) = feats.split_at(half);
    let split = fid(fa, fb).map_err(|e| e.to_string())?;
    let ab = fid(fb, fa).map_err(|e| e.to_string())?;
    if (split - ab).abs() > 1e-4 {
        return Err(format!("asymmetric FID: {split} vs {ab}"));
    }
    let mut levels = Vec::new();
    for (i, p) in [0.02, 0.05, 0.15].into_iter().enumerate() {
        let noisy = extractor.features(&corrupt(&reference[half..], p, 100 + i as u64)).map_err(|e| e.to_string())?;
        levels.push(fid(fa, &noisy).map_err(|e| e.to_string())?);
    }
    if !(split < levels[0] && levels[0] < levels[1] && levels[1] < levels[2]) {
        return Err(format!("FID not monotone in corruption: clean {split:.3}, flips 2/5/15% {levels:.3?}"));
    }

    let noise: Vec<VoxelGrid> = (0..half)
        .map(|i| {
            let n = reference[0].resolution();
            let mut r = rng::seeded(1000 + i as u64);
            VoxelGrid::from_vec(n, (0..n * n * n).map(|_| r.random::<f32>()).collect()).unwrap()
        })
        .collect();
    let noise_fid = fid(fa, &extractor.features(&noise).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if noise_fid <= 10.0 * split {
        return Err(format!("noise grids FID {noise_fid:.3} not above 10x split-half {split:.3}"));
    }
    Ok(format!(
        "FID(A,A) {same:.1e}; Gaussian {gauss:.3} (closed form 4); split-half {split:.3} < flips {levels:.3?}; noise {noise_fid:.1}"
    ))
}
