use rand::Rng;

use super::{join, Act, Module, Param};

/// Grouped 2D convolution, square kernel, symmetric zero padding.
/// Weight layout: `out_c × (in_c / groups) × k × k`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(in_c.is_multiple_of(groups) && out_c.is_multiple_of(groups), "channels must divide into groups");
        let cin_g = in_c / groups;
        let weight = Param::he_normal(&[out_c, cin_g, k, k], cin_g * k * k, rng);
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
            groups,
            weight,
            bias: bias.then(|| Param::zeros(&[out_c])),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Fills `col` (`K × M`, `K = cin_g·k·k`, `M = N·Ho·Wo`) for group `g`.
    fn im2col(&self, x: &Act, g: usize, ho: usize, wo: usize, col: &mut [f32]) {
        let cin_g = self.in_c / self.groups;
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let m = x.n * ho * wo;
        let xplane = x.plane();
        let hw = x.h * x.w;
        for ci in 0..cin_g {
            let xc = &x.data[(g * cin_g + ci) * xplane..(g * cin_g + ci + 1) * xplane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * m..][..m];
                    for b in 0..x.n {
                        let xb = &xc[b * hw..(b + 1) * hw];
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ky as isize - p;
                            let dst = &mut row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                            if iy < 0 || iy >= x.h as isize {
                                dst.iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let xr = &xb[iy as usize * x.w..(iy as usize + 1) * x.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + kx as isize - p;
                                *d = if ix < 0 || ix >= x.w as isize { 0.0 } else { xr[ix as usize] };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `dcol` back into `dx` for group `g`.
    fn col2im(&self, dcol: &[f32], g: usize, ho: usize, wo: usize, dx: &mut Act) {
        let cin_g = self.in_c / self.groups;
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let m = dx.n * ho * wo;
        let xplane = dx.plane();
        let hw = dx.h * dx.w;
        let (h, w) = (dx.h, dx.w);
        for ci in 0..cin_g {
            let xc = &mut dx.data[(g * cin_g + ci) * xplane..(g * cin_g + ci + 1) * xplane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &dcol[((ci * k + ky) * k + kx) * m..][..m];
                    for b in 0..dx.n {
                        let xb = &mut xc[b * hw..(b + 1) * hw];
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                            let xr = &mut xb[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, v) in src.iter().enumerate() {
                                let ix = (ox * s) as isize + kx as isize - p;
                                if ix >= 0 && (ix as usize) < w {
                                    xr[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Act) -> Act {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let cin_g = self.in_c / self.groups;
        let cout_g = self.out_c / self.groups;
        let kdim = cin_g * self.k * self.k;
        let m = x.n * ho * wo;
        let mut y = Act::zeros(self.out_c, x.n, ho, wo);
        let mut col = if self.pointwise() { Vec::new() } else { vec![0.0; kdim * m] };
        for g in 0..self.groups {
            let b: &[f32] = if self.pointwise() {
                &x.data[g * cin_g * m..(g + 1) * cin_g * m]
            } else {
                self.im2col(x, g, ho, wo, &mut col);
                &col
            };
            let a = &self.weight.value[g * cout_g * kdim..(g + 1) * cout_g * kdim];
            let c = &mut y.data[g * cout_g * m..(g + 1) * cout_g * m];
            // SAFETY: slices cover exactly cout_g×kdim, kdim×m and cout_g×m row-major matrices.
            unsafe {
                matrixmultiply::sgemm(
                    cout_g, kdim, m, 1.0,
                    a.as_ptr(), kdim as isize, 1,
                    b.as_ptr(), m as isize, 1,
                    0.0,
                    c.as_mut_ptr(), m as isize, 1,
                );
            }
        }
        if let Some(bias) = &self.bias {
            for (o, bv) in bias.value.iter().enumerate() {
                y.data[o * m..(o + 1) * m].iter_mut().for_each(|v| *v += bv);
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Act, dy: &Act) -> Act {
        let (ho, wo) = (dy.h, dy.w);
        let cin_g = self.in_c / self.groups;
        let cout_g = self.out_c / self.groups;
        let kdim = cin_g * self.k * self.k;
        let m = x.n * ho * wo;
        let mut dx = Act::zeros(x.c, x.n, x.h, x.w);
        let pointwise = self.pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * m] };
        let mut dcol = if pointwise { Vec::new() } else { vec![0.0; kdim * m] };
        if self.weight.grad.len() != self.weight.value.len() {
            self.weight.zero_grad();
        }
        for g in 0..self.groups {
            let dyg = &dy.data[g * cout_g * m..(g + 1) * cout_g * m];
            let b: &[f32] = if pointwise {
                &x.data[g * cin_g * m..(g + 1) * cin_g * m]
            } else {
                self.im2col(x, g, ho, wo, &mut col);
                &col
            };
            let dw = &mut self.weight.grad[g * cout_g * kdim..(g + 1) * cout_g * kdim];
            // dW_g += dY_g · colᵀ
            // SAFETY: dyg is cout_g×m, b is kdim×m (read transposed), dw is cout_g×kdim.
            unsafe {
                matrixmultiply::sgemm(
                    cout_g, m, kdim, 1.0,
                    dyg.as_ptr(), m as isize, 1,
                    b.as_ptr(), 1, m as isize,
                    1.0,
                    dw.as_mut_ptr(), kdim as isize, 1,
                );
            }
            let wg = &self.weight.value[g * cout_g * kdim..(g + 1) * cout_g * kdim];
            let target: &mut [f32] = if pointwise {
                &mut dx.data[g * cin_g * m..(g + 1) * cin_g * m]
            } else {
                &mut dcol
            };
            // dcol = W_gᵀ · dY_g
            // SAFETY: wg is cout_g×kdim (read transposed), dyg cout_g×m, target kdim×m.
            unsafe {
                matrixmultiply::sgemm(
                    kdim, cout_g, m, 1.0,
                    wg.as_ptr(), 1, kdim as isize,
                    dyg.as_ptr(), m as isize, 1,
                    0.0,
                    target.as_mut_ptr(), m as isize, 1,
                );
            }
            if !pointwise {
                self.col2im(&dcol, g, ho, wo, &mut dx);
            }
        }
        if let Some(bias) = &mut self.bias {
            if bias.grad.len() != bias.value.len() {
                bias.zero_grad();
            }
            for (o, gb) in bias.grad.iter_mut().enumerate() {
                *gb += dy.data[o * m..(o + 1) * m].iter().sum::<f32>();
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;

    /// Direct-loop reference convolution.
    fn naive(conv: &Conv2d, x: &Act) -> Act {
        let (ho, wo) = conv.out_hw(x.h, x.w);
        let cin_g = conv.in_c / conv.groups;
        let cout_g = conv.out_c / conv.groups;
        let mut y = Act::zeros(conv.out_c, x.n, ho, wo);
        for b in 0..x.n {
            for o in 0..conv.out_c {
                let g = o / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..cin_g {
                            for ky in 0..conv.k {
                                for kx in 0..conv.k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xi = (((g * cin_g + ci) * x.n + b) * x.h + iy as usize) * x.w + ix as usize;
                                    let wi = ((o * cin_g + ci) * conv.k + ky) * conv.k + kx;
                                    acc += conv.weight.value[wi] * x.data[xi];
                                }
                            }
                        }
                        y.data[((o * x.n + b) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn configs() -> Vec<(usize, usize, usize, usize, usize)> {
        // (in, out, k, stride, groups)
        vec![(3, 4, 3, 1, 1), (4, 6, 3, 2, 2), (4, 4, 1, 1, 1), (6, 4, 1, 2, 2), (4, 8, 3, 2, 4)]
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (i, (ci, co, k, s, g)) in configs().into_iter().enumerate() {
            let mut conv = Conv2d::new(ci, co, k, s, g, true, &mut rng);
            conv.bias.as_mut().unwrap().value = values(co, 99);
            let x = act(ci, 2, 7, 6, i as u64);
            let a = conv.forward(&x);
            let b = naive(&conv, &x);
            assert_eq!((a.c, a.n, a.h, a.w), (b.c, b.n, b.h, b.w));
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for (i, (ci, co, k, s, g)) in configs().into_iter().enumerate() {
            let mut conv = Conv2d::new(ci, co, k, s, g, true, &mut rng);
            let x = act(ci, 2, 5, 6, 10 + i as u64);
            let y = conv.forward(&x);
            let r = values(y.data.len(), 77);
            let dy = Act { data: r.clone(), ..y.clone() };
            conv.weight.zero_grad();
            conv.bias.as_mut().unwrap().zero_grad();
            let dx = conv.backward(&x, &dy);
            let eps = 1e-2f32;
            for idx in (0..x.data.len()).step_by(7) {
                let mut xp = x.clone();
                xp.data[idx] += eps;
                let mut xm = x.clone();
                xm.data[idx] -= eps;
                let num = (probe(&conv.forward(&xp), &r) - probe(&conv.forward(&xm), &r)) / (2.0 * eps as f64);
                assert_close(dx.data[idx] as f64, num, "conv dx");
            }
            for idx in (0..conv.weight.len()).step_by(5) {
                let orig = conv.weight.value[idx];
                conv.weight.value[idx] = orig + eps;
                let lp = probe(&conv.forward(&x), &r);
                conv.weight.value[idx] = orig - eps;
                let lm = probe(&conv.forward(&x), &r);
                conv.weight.value[idx] = orig;
                assert_close(conv.weight.grad[idx] as f64, (lp - lm) / (2.0 * eps as f64), "conv dw");
            }
            let db: f64 = conv.bias.as_ref().unwrap().grad[0] as f64;
            let expect: f64 = r[..y.plane()].iter().map(|v| *v as f64).sum();
            assert_close(db, expect, "conv db");
        }
    }
}
