use super::{join, Module, Param, Visitor};

/// Adam with bias correction. Moment buffers are allocated lazily in the
/// module's visit order and persist across steps.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update from the accumulated gradients and clears them.
    pub fn step(&mut self, module: &mut dyn Module) {
        self.step += 1;
        let t = self.step as i32;
        struct Update<'a> {
            opt: &'a mut Adam,
            index: usize,
            c1: f32,
            c2: f32,
        }
        impl Visitor for Update<'_> {
            fn param(&mut self, _: &str, p: &mut Param) {
                let o = &mut *self.opt;
                if o.m.len() <= self.index {
                    o.m.push(vec![0.0; p.value.len()]);
                    o.v.push(vec![0.0; p.value.len()]);
                }
                let (m, v) = (&mut o.m[self.index], &mut o.v[self.index]);
                assert_eq!(m.len(), p.value.len(), "optimizer state does not match parameter");
                for i in 0..p.value.len() {
                    let g = p.grad[i];
                    m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
                    v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
                    let mh = m[i] / self.c1;
                    let vh = v[i] / self.c2;
                    p.value[i] -= o.lr * mh / (vh.sqrt() + o.eps);
                    p.grad[i] = 0.0;
                }
                self.index += 1;
            }
            fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f32>) {}
        }
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        module.visit("", &mut Update { opt: self, index: 0, c1, c2 });
    }

    /// Exposes moment buffers (and the step counter) for checkpointing.
    pub fn visit_state(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let mut step = vec![self.step as f32];
        // Step counts stay far below 2^24, so f32 storage is exact.
        v.buffer(&join(prefix, "step"), &[1], &mut step);
        self.step = step[0] as u64;
        let mut count = vec![self.m.len() as f32];
        v.buffer(&join(prefix, "slots"), &[1], &mut count);
        let slots = count[0] as usize;
        self.m.resize(slots, Vec::new());
        self.v.resize(slots, Vec::new());
        for i in 0..slots {
            let len = self.m[i].len();
            v.buffer(&join(prefix, &format!("m{i}")), &[len], &mut self.m[i]);
            v.buffer(&join(prefix, &format!("v{i}")), &[len], &mut self.v[i]);
        }
    }
}
