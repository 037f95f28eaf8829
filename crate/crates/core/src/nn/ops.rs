use super::Act;

pub fn relu_inplace(x: &mut Act) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn relu_backward_by_mask(dy: &mut Act, mask: &[bool]) {
    for (d, &keep) in dy.data.iter_mut().zip(mask) {
        if !keep {
            *d = 0.0;
        }
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x(x: &Act) -> Act {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Act::zeros(x.c, x.n, h2, w2);
    for (src, dst) in x.data.chunks(x.h * x.w).zip(y.data.chunks_mut(h2 * w2)) {
        for yy in 0..h2 {
            let srow = &src[(yy / 2) * x.w..(yy / 2 + 1) * x.w];
            let drow = &mut dst[yy * w2..(yy + 1) * w2];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &Act) -> Act {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    for (src, dst) in dy.data.chunks(dy.h * dy.w).zip(dx.data.chunks_mut(h * w)) {
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Concatenates along channels (channel-major layout makes this an append).
pub fn concat_channels(a: Act, b: &Act) -> Act {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat geometry");
    let mut out = a;
    out.c += b.c;
    out.data.extend_from_slice(&b.data);
    out
}

/// Inverse of [`concat_channels`]: the first `c_first` channels and the rest.
pub fn split_channels(x: Act, c_first: usize) -> (Act, Act) {
    let m = x.plane();
    let mut first = x;
    let rest = first.data.split_off(c_first * m);
    let second = Act { c: first.c - c_first, n: first.n, h: first.h, w: first.w, data: rest };
    first.c = c_first;
    (first, second)
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::*;
    use super::*;

    #[test]
    fn upsample_and_adjoint() {
        let x = act(2, 2, 3, 2, 1);
        let y = upsample2x(&x);
        assert_eq!((y.h, y.w), (6, 4));
        assert_eq!(y.data[0], x.data[0]);
        assert_eq!(y.data[5], x.data[0]);
        // <up(x), r> == <x, up^T(r)>
        let r = act(2, 2, 6, 4, 2);
        let lhs = probe(&y, &r.data);
        let rhs = probe(&x, &upsample2x_backward(&r).data);
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = act(2, 2, 2, 2, 1);
        let b = act(3, 2, 2, 2, 2);
        let c = concat_channels(a.clone(), &b);
        assert_eq!(c.c, 5);
        let (a2, b2) = split_channels(c, 2);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
