#![allow(dead_code)]

pub mod classic;
pub mod suites;

use mpgan::nn::{Module, Param, Visitor};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Flat addresses `(parameter name, element)` for every trainable scalar.
pub fn param_index(m: &mut dyn Module) -> Vec<(String, usize)> {
    struct V(Vec<(String, usize)>);
    impl Visitor for V {
        fn param(&mut self, name: &str, p: &mut Param) {
            self.0.extend((0..p.value.len()).map(|i| (name.to_owned(), i)));
        }
        fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f32>) {}
    }
    let mut v = V(Vec::new());
    m.visit("", &mut v);
    v.0
}

/// Applies `f(value, grad)` to one scalar parameter.
pub fn with_param<T>(m: &mut dyn Module, name: &str, idx: usize, f: impl FnOnce(&mut f32, f32) -> T) -> T {
    struct V<'a, T, F: FnOnce(&mut f32, f32) -> T> {
        name: &'a str,
        idx: usize,
        f: Option<F>,
        out: Option<T>,
    }
    impl<T, F: FnOnce(&mut f32, f32) -> T> Visitor for V<'_, T, F> {
        fn param(&mut self, name: &str, p: &mut Param) {
            if name == self.name {
                let g = p.grad[self.idx];
                self.out = Some((self.f.take().unwrap())(&mut p.value[self.idx], g));
            }
        }
        fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f32>) {}
    }
    let mut v = V { name, idx, f: Some(f), out: None };
    m.visit("", &mut v);
    v.out.unwrap_or_else(|| panic!("no parameter {name}"))
}

pub fn grad_of(m: &mut dyn Module, name: &str, idx: usize) -> f32 {
    with_param(m, name, idx, |_, g| g)
}

pub fn set_param(m: &mut dyn Module, name: &str, idx: usize, value: f32) {
    with_param(m, name, idx, |v, _| *v = value)
}

pub fn get_param(m: &mut dyn Module, name: &str, idx: usize) -> f32 {
    with_param(m, name, idx, |v, _| *v)
}

/// `count` random scalars, at least one from every parameter tensor.
pub fn pick_params<R: Rng>(m: &mut dyn Module, count: usize, rng: &mut R) -> Vec<(String, usize)> {
    let all = param_index(m);
    let mut names: Vec<String> = all.iter().map(|(n, _)| n.clone()).collect();
    names.dedup();
    let mut out: Vec<(String, usize)> = names
        .iter()
        .map(|n| {
            let members: Vec<&(String, usize)> = all.iter().filter(|(m, _)| m == n).collect();
            members[rng.random_range(0..members.len())].clone()
        })
        .collect();
    let extra = count.saturating_sub(out.len());
    out.extend(sample(rng, all.len(), extra).into_iter().map(|i| all[i].clone()));
    out
}

/// Central difference of `loss` along one parameter.
pub fn central_difference<M: Module>(
    m: &mut M,
    name: &str,
    idx: usize,
    h: f32,
    mut loss: impl FnMut(&mut M) -> f64,
) -> f64 {
    let orig = get_param(m, name, idx);
    set_param(m, name, idx, orig + h);
    let up = loss(m);
    set_param(m, name, idx, orig - h);
    let down = loss(m);
    set_param(m, name, idx, orig);
    let actual = (orig + h) - (orig - h);
    (up - down) / actual as f64
}

pub fn param_rms(m: &mut dyn Module, name: &str) -> f32 {
    struct V<'a>(&'a str, f32);
    impl Visitor for V<'_> {
        fn param(&mut self, name: &str, p: &mut Param) {
            if name == self.0 {
                self.1 = (p.value.iter().map(|v| v * v).sum::<f32>() / p.value.len() as f32).sqrt();
            }
        }
        fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f32>) {}
    }
    let mut v = V(name, 0.0);
    m.visit("", &mut v);
    v.1
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose difference quotients at `h` and `h/2` disagree, i.e.
    /// a kink lies within the step.
    pub kinks: usize,
    pub failures: Vec<String>,
}

/// Compares accumulated analytic gradients against central differences until
/// `want` parameters have been checked away from kinks. Steps are `rel_step`
/// times each tensor's RMS. Errors are relative with a floor of 10% of the
/// tensor's gradient RMS (never below 1e-5 of the largest tensor RMS): f32
/// scores resolve loss differences only to about 1e-8, which is the whole
/// signal for the smallest entries.
pub fn grad_check<M: Module, R: Rng>(
    m: &mut M,
    want: usize,
    tol: f64,
    rel_step: f32,
    rng: &mut R,
    mut loss: impl FnMut(&mut M) -> f64,
    filter: impl Fn(&str) -> bool,
) -> GradCheck {
    let all: Vec<(String, usize)> = param_index(m).into_iter().filter(|(n, _)| filter(n)).collect();
    let mut out = GradCheck::default();
    let grad_rms = grad_rms_by_tensor(m);
    let abs_floor = 1e-5 * grad_rms.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    let mut order = pick_params(m, 0, rng);
    order.retain(|(n, _)| filter(n));
    order.extend(sample(rng, all.len(), (4 * want).min(all.len())).into_iter().map(|i| all[i].clone()));
    for (name, idx) in order {
        if out.checked >= want {
            break;
        }
        let rms = param_rms(m, &name);
        let h = if rms > 0.0 { rel_step * rms } else { rel_step };
        let analytic = grad_of(m, &name, idx) as f64;
        let floor = (1e-1 * grad_rms.iter().find(|(n, _)| *n == name).map_or(0.0, |(_, r)| *r)).max(abs_floor);
        let coarse = central_difference(m, &name, idx, h, &mut loss);
        let fine = central_difference(m, &name, idx, h / 2.0, &mut loss);
        if rel_err(coarse, fine, floor) > tol {
            out.kinks += 1;
            continue;
        }
        out.checked += 1;
        let e = rel_err(analytic, fine, floor);
        if e > tol {
            out.failures.push(format!("{name}[{idx}]: analytic {analytic:.6e} numeric {fine:.6e} err {e:.3e}"));
        }
    }
    out
}

/// Redraws every parameter at unit activation scale: weights `N(0, 1/fan_in)`
/// with `fan_in` the row length, other tensors `N(0, 0.1^2)` (plus 1 for
/// batch-norm scales). Initialisation-scale weights make f32 differences too
/// small to resolve.
pub fn rescale_params<R: Rng>(m: &mut dyn Module, rng: &mut R) {
    struct V<'a, R: Rng>(&'a mut R);
    impl<R: Rng> Visitor for V<'_, R> {
        fn param(&mut self, name: &str, p: &mut Param) {
            let (mean, std) = if name.ends_with("weight") && p.shape.len() == 2 {
                (0.0, 1.0 / (p.shape[1] as f32).sqrt())
            } else if name.ends_with("gamma") {
                (1.0, 0.1)
            } else {
                (0.0, 0.1)
            };
            let d = Normal::new(mean, std).unwrap();
            p.value.iter_mut().for_each(|v| *v = d.sample(self.0));
        }
        fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f32>) {}
    }
    m.visit("", &mut V(rng));
}

fn grad_rms_by_tensor(m: &mut dyn Module) -> Vec<(String, f64)> {
    struct V(Vec<(String, f64)>);
    impl Visitor for V {
        fn param(&mut self, name: &str, p: &mut Param) {
            let ms = p.grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>() / p.grad.len() as f64;
            self.0.push((name.to_owned(), ms.sqrt()));
        }
        fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f32>) {}
    }
    let mut v = V(Vec::new());
    m.visit("", &mut v);
    v.0
}
