use rand::Rng;

use super::{join, Act, Module, Param};

/// Squeeze-and-excitation gate: per-sample global average pool, a ReLU bottleneck and a
/// sigmoid produce one gate per channel that rescales the input.
#[derive(Debug, Clone)]
pub struct SeGate {
    pub channels: usize,
    pub bottleneck: usize,
    /// `bottleneck × channels`
    pub w1: Param,
    pub b1: Param,
    /// `channels × bottleneck`
    pub w2: Param,
    pub b2: Param,
}

pub struct SeCache {
    x: Act,
    pooled: Vec<f32>,
    hidden: Vec<f32>,
    gates: Vec<f32>,
}

impl SeCache {
    /// Gate values, `channels × N`.
    pub fn gates(&self) -> &[f32] {
        &self.gates
    }
}

impl SeGate {
    pub fn new<R: Rng>(channels: usize, bottleneck: usize, rng: &mut R) -> Self {
        Self {
            channels,
            bottleneck,
            w1: Param::he_normal(&[bottleneck, channels], channels, rng),
            b1: Param::zeros(&[bottleneck]),
            w2: Param::he_normal(&[channels, bottleneck], bottleneck, rng),
            b2: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: Act) -> (Act, SeCache) {
        let (c, n) = (x.c, x.n);
        let hw = x.h * x.w;
        let r = self.bottleneck;
        let mut pooled = vec![0.0f32; c * n];
        for ch in 0..c {
            for b in 0..n {
                let s = &x.data[(ch * n + b) * hw..(ch * n + b + 1) * hw];
                pooled[ch * n + b] = s.iter().sum::<f32>() / hw as f32;
            }
        }
        let mut hidden = vec![0.0f32; r * n];
        for j in 0..r {
            for b in 0..n {
                let mut acc = self.b1.value[j];
                for ch in 0..c {
                    acc += self.w1.value[j * c + ch] * pooled[ch * n + b];
                }
                hidden[j * n + b] = acc.max(0.0);
            }
        }
        let mut gates = vec![0.0f32; c * n];
        for ch in 0..c {
            for b in 0..n {
                let mut acc = self.b2.value[ch];
                for j in 0..r {
                    acc += self.w2.value[ch * r + j] * hidden[j * n + b];
                }
                gates[ch * n + b] = 1.0 / (1.0 + (-acc).exp());
            }
        }
        let mut y = x.clone();
        for (i, plane) in y.data.chunks_mut(hw).enumerate() {
            let g = gates[i];
            plane.iter_mut().for_each(|v| *v *= g);
        }
        (y, SeCache { x, pooled, hidden, gates })
    }

    pub fn backward(&mut self, cache: SeCache, dy: &Act) -> Act {
        let SeCache { x, pooled, hidden, gates } = cache;
        let (c, n) = (x.c, x.n);
        let hw = x.h * x.w;
        let r = self.bottleneck;
        for p in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            if p.grad.len() != p.value.len() {
                p.zero_grad();
            }
        }
        // gate pre-activation gradients
        let mut dz2 = vec![0.0f32; c * n];
        let mut dx = Act::zeros(c, n, x.h, x.w);
        for i in 0..c * n {
            let xs = &x.data[i * hw..(i + 1) * hw];
            let ds = &dy.data[i * hw..(i + 1) * hw];
            let dg: f32 = xs.iter().zip(ds).map(|(a, b)| a * b).sum();
            let g = gates[i];
            dz2[i] = dg * g * (1.0 - g);
            for (o, d) in dx.data[i * hw..(i + 1) * hw].iter_mut().zip(ds) {
                *o = d * g;
            }
        }
        let mut dh = vec![0.0f32; r * n];
        for ch in 0..c {
            for b in 0..n {
                let d = dz2[ch * n + b];
                self.b2.grad[ch] += d;
                for j in 0..r {
                    self.w2.grad[ch * r + j] += d * hidden[j * n + b];
                    dh[j * n + b] += self.w2.value[ch * r + j] * d;
                }
            }
        }
        let mut dpool = vec![0.0f32; c * n];
        for j in 0..r {
            for b in 0..n {
                if hidden[j * n + b] <= 0.0 {
                    continue;
                }
                let d = dh[j * n + b];
                self.b1.grad[j] += d;
                for ch in 0..c {
                    self.w1.grad[j * c + ch] += d * pooled[ch * n + b];
                    dpool[ch * n + b] += self.w1.value[j * c + ch] * d;
                }
            }
        }
        for (i, plane) in dx.data.chunks_mut(hw).enumerate() {
            let add = dpool[i] / hw as f32;
            plane.iter_mut().for_each(|v| *v += add);
        }
        dx
    }
}

impl Module for SeGate {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "fc1.weight"), &self.w1);
        f(&join(prefix, "fc1.bias"), &self.b1);
        f(&join(prefix, "fc2.weight"), &self.w2);
        f(&join(prefix, "fc2.bias"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "fc1.weight"), &mut self.w1);
        f(&join(prefix, "fc1.bias"), &mut self.b1);
        f(&join(prefix, "fc2.weight"), &mut self.w2);
        f(&join(prefix, "fc2.bias"), &mut self.b2);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;

    fn gate(c: usize, r: usize, seed: u64) -> SeGate {
        SeGate::new(c, r, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let mut se = gate(4, 2, 1);
        for p in [&mut se.w1, &mut se.b1, &mut se.w2, &mut se.b2] {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = act(4, 2, 3, 3, 4);
        let (y, cache) = se.forward(x.clone());
        assert!(cache.gates().iter().all(|&g| g == 0.5));
        for (a, b) in y.data.iter().zip(&x.data) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn gates_inside_unit_interval_and_shrink_magnitudes() {
        let se = gate(8, 2, 3);
        let x = act(8, 3, 4, 4, 5);
        let (y, cache) = se.forward(x.clone());
        assert!(cache.gates().iter().all(|&g| g > 0.0 && g < 1.0));
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut se = gate(4, 3, 7);
        se.b1.value = vec![0.3, 0.2, 0.4];
        let x = act(4, 2, 3, 3, 6);
        let (y, cache) = se.forward(x.clone());
        let r = values(y.data.len(), 8);
        let dy = Act { data: r.clone(), ..y };
        let dx = se.backward(cache, &dy);
        let eps = 1e-2f32;
        let f = |se: &SeGate, x: &Act| probe(&se.forward(x.clone()).0, &r);
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            assert_close(dx.data[idx] as f64, (f(&se, &xp) - f(&se, &xm)) / (2.0 * eps as f64), "se dx");
        }
        for idx in 0..se.w1.len() {
            let orig = se.w1.value[idx];
            se.w1.value[idx] = orig + eps;
            let lp = f(&se, &x);
            se.w1.value[idx] = orig - eps;
            let lm = f(&se, &x);
            se.w1.value[idx] = orig;
            assert_close(se.w1.grad[idx] as f64, (lp - lm) / (2.0 * eps as f64), "se dw1");
        }
        for idx in 0..se.w2.len() {
            let orig = se.w2.value[idx];
            se.w2.value[idx] = orig + eps;
            let lp = f(&se, &x);
            se.w2.value[idx] = orig - eps;
            let lm = f(&se, &x);
            se.w2.value[idx] = orig;
            assert_close(se.w2.grad[idx] as f64, (lp - lm) / (2.0 * eps as f64), "se dw2");
        }
    }
}
