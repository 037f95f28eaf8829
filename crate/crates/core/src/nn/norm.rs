use super::{join, Act, Module, Param};

/// Group normalization with per-channel affine parameters. Statistics are taken per
/// sample over each group of channels, so results do not depend on batch size.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
}

pub struct NormCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            groups: default_groups(channels),
            eps: 1e-5,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
        }
    }

    /// Normalizes `x` in place and returns the values needed for backward.
    pub fn forward(&self, mut x: Act) -> (Act, NormCache) {
        let (c, n) = (x.c, x.n);
        let hw = x.h * x.w;
        let m = x.plane();
        let cg = c / self.groups;
        let count = (cg * hw) as f64;
        let mut rstd = vec![0.0f32; n * self.groups];
        let mut xhat = vec![0.0f32; x.data.len()];
        for b in 0..n {
            for g in 0..self.groups {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for ch in g * cg..(g + 1) * cg {
                    for &v in &x.data[ch * m + b * hw..ch * m + (b + 1) * hw] {
                        sum += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let mean = sum / count;
                let var = (sq / count - mean * mean).max(0.0);
                let r = 1.0 / (var + self.eps as f64).sqrt();
                rstd[b * self.groups + g] = r as f32;
                for ch in g * cg..(g + 1) * cg {
                    let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
                    let range = ch * m + b * hw..ch * m + (b + 1) * hw;
                    for (xv, hv) in x.data[range.clone()].iter_mut().zip(&mut xhat[range]) {
                        let nv = ((*xv as f64 - mean) * r) as f32;
                        *hv = nv;
                        *xv = nv * ga + be;
                    }
                }
            }
        }
        (x, NormCache { xhat, rstd })
    }

    /// Output mask `y > 0` recomputed from the cache, for a ReLU that followed this norm.
    pub fn positive_mask(&self, cache: &NormCache, c: usize, m: usize) -> Vec<bool> {
        let mut mask = vec![false; cache.xhat.len()];
        for ch in 0..c {
            let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in ch * m..(ch + 1) * m {
                mask[i] = cache.xhat[i] * ga + be > 0.0;
            }
        }
        mask
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Act) -> Act {
        let (c, n) = (dy.c, dy.n);
        let hw = dy.h * dy.w;
        let m = dy.plane();
        let cg = c / self.groups;
        let count = (cg * hw) as f32;
        if self.gamma.grad.len() != c {
            self.gamma.zero_grad();
            self.beta.zero_grad();
        }
        let mut dx = Act::zeros(c, n, dy.h, dy.w);
        for b in 0..n {
            for g in 0..self.groups {
                let r = cache.rstd[b * self.groups + g];
                let mut sum_dxhat = 0.0f32;
                let mut sum_dxhat_xhat = 0.0f32;
                for ch in g * cg..(g + 1) * cg {
                    let ga = self.gamma.value[ch];
                    let mut dg = 0.0f32;
                    let mut db = 0.0f32;
                    for i in ch * m + b * hw..ch * m + (b + 1) * hw {
                        let d = dy.data[i];
                        let xh = cache.xhat[i];
                        dg += d * xh;
                        db += d;
                        sum_dxhat += d * ga;
                        sum_dxhat_xhat += d * ga * xh;
                    }
                    self.gamma.grad[ch] += dg;
                    self.beta.grad[ch] += db;
                }
                for ch in g * cg..(g + 1) * cg {
                    let ga = self.gamma.value[ch];
                    for i in ch * m + b * hw..ch * m + (b + 1) * hw {
                        let dxhat = dy.data[i] * ga;
                        dx.data[i] = r / count * (count * dxhat - sum_dxhat - cache.xhat[i] * sum_dxhat_xhat);
                    }
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
