//! im2col convolution kernels. 2-D convolution is the `kt = 1` case of the
//! volumetric kernel.

use crate::error::{Error, Result};
use crate::par;

use super::Scalar;

/// Stride and zero padding per (time, height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// Square stride/padding over the two spatial axes of an NCHW input.
    pub fn planar(stride: usize, padding: usize) -> Self {
        Self { stride: [1, stride, stride], padding: [0, padding, padding] }
    }

    pub fn volumetric(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }
}

/// Samples per partial weight-gradient accumulator. Fixed so the summation
/// order never depends on the thread count.
const WGRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub input: [usize; 3],
    pub o: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out: [usize; 3],
}

const AXES: [&str; 3] = ["time", "height", "width"];

impl ConvGeom {
    /// `x` is N,C,T,H,W and `w` is O,C,KT,KH,KW.
    pub fn new(op: &'static str, x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        debug_assert!(x.len() == 5 && w.len() == 5);
        if x[1] != w[1] {
            return Err(Error::shape(
                op,
                format!("channel dimension: input has {} channels, weight expects {}", x[1], w[1]),
            ));
        }
        let mut out = [0; 3];
        for ax in 0..3 {
            if spec.stride[ax] == 0 {
                return Err(Error::shape(op, format!("{} stride must be positive", AXES[ax])));
            }
            let span = x[2 + ax] + 2 * spec.padding[ax];
            if span < w[2 + ax] {
                return Err(Error::shape(
                    op,
                    format!(
                        "{} dimension: padded extent {span} smaller than kernel {}",
                        AXES[ax],
                        w[2 + ax]
                    ),
                ));
            }
            out[ax] = (span - w[2 + ax]) / spec.stride[ax] + 1;
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            input: [x[2], x[3], x[4]],
            o: w[0],
            kernel: [w[2], w[3], w[4]],
            stride: spec.stride,
            pad: spec.padding,
            out,
        })
    }

    pub fn in_len(&self) -> usize {
        self.c * self.input.iter().product::<usize>()
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.out.iter().product()
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let [it, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.out;
        let p = self.out_positions();
        let mut row = 0;
        for c in 0..self.c {
            let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        let mut q = 0;
                        for t in 0..ot {
                            let st = (t * self.stride[0] + a) as isize - self.pad[0] as isize;
                            for h in 0..oh {
                                let sh = (h * self.stride[1] + b) as isize - self.pad[1] as isize;
                                let row_ok = st >= 0
                                    && (st as usize) < it
                                    && sh >= 0
                                    && (sh as usize) < ih;
                                if !row_ok {
                                    dst[q..q + ow].fill(T::zero());
                                    q += ow;
                                    continue;
                                }
                                let base = (st as usize * ih + sh as usize) * iw;
                                for w in 0..ow {
                                    let sw = (w * self.stride[2] + d) as isize - self.pad[2] as isize;
                                    dst[q] = if sw >= 0 && (sw as usize) < iw {
                                        xc[base + sw as usize]
                                    } else {
                                        T::zero()
                                    };
                                    q += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let [it, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.out;
        let p = self.out_positions();
        let mut row = 0;
        for c in 0..self.c {
            let dxc = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        let mut q = 0;
                        for t in 0..ot {
                            let st = (t * self.stride[0] + a) as isize - self.pad[0] as isize;
                            for h in 0..oh {
                                let sh = (h * self.stride[1] + b) as isize - self.pad[1] as isize;
                                if st < 0 || st as usize >= it || sh < 0 || sh as usize >= ih {
                                    q += ow;
                                    continue;
                                }
                                let base = (st as usize * ih + sh as usize) * iw;
                                for w in 0..ow {
                                    let sw = (w * self.stride[2] + d) as isize - self.pad[2] as isize;
                                    if sw >= 0 && (sw as usize) < iw {
                                        dxc[base + sw as usize] = dxc[base + sw as usize] + src[q];
                                    }
                                    q += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let p = g.out_positions();
    let k = g.patch_len();
    let in_len = g.in_len();
    let mut y = vec![T::zero(); g.n * g.o * p];
    par::for_each_chunk_mut(&mut y, g.o * p, |n, yn| {
        let mut cols = vec![T::zero(); k * p];
        g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
        T::gemm(g.o, k, p, w, (k as isize, 1), &cols, (p as isize, 1), T::zero(), yn, (p as isize, 1));
        for (o, row) in yn.chunks_mut(p).enumerate() {
            let bo = b[o];
            row.iter_mut().for_each(|v| *v = *v + bo);
        }
    });
    y
}

pub(crate) fn backward_input<T: Scalar>(g: &ConvGeom, w: &[T], dy: &[T]) -> Vec<T> {
    let p = g.out_positions();
    let k = g.patch_len();
    let in_len = g.in_len();
    let mut dx = vec![T::zero(); g.n * in_len];
    par::for_each_chunk_mut(&mut dx, in_len, |n, dxn| {
        let mut dcols = vec![T::zero(); k * p];
        // dcols = W^T (k x o) * dy_n (o x p)
        T::gemm(
            k,
            g.o,
            p,
            w,
            (1, k as isize),
            &dy[n * g.o * p..(n + 1) * g.o * p],
            (p as isize, 1),
            T::zero(),
            &mut dcols,
            (p as isize, 1),
        );
        g.col2im(&dcols, dxn);
    });
    dx
}

pub(crate) fn backward_params<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let p = g.out_positions();
    let k = g.patch_len();
    let in_len = g.in_len();
    let chunks = g.n.div_ceil(WGRAD_CHUNK);
    let partials = par::map_range(chunks, |ci| {
        let mut dw = vec![T::zero(); g.o * k];
        let mut db = vec![T::zero(); g.o];
        let mut cols = vec![T::zero(); k * p];
        for n in ci * WGRAD_CHUNK..((ci + 1) * WGRAD_CHUNK).min(g.n) {
            g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
            let dyn_ = &dy[n * g.o * p..(n + 1) * g.o * p];
            // dw += dy_n (o x p) * cols^T (p x k)
            T::gemm(g.o, p, k, dyn_, (p as isize, 1), &cols, (1, p as isize), T::one(), &mut dw, (k as isize, 1));
            for (o, row) in dyn_.chunks(p).enumerate() {
                db[o] = db[o] + row.iter().copied().sum::<T>();
            }
        }
        (dw, db)
    });
    let mut partials = partials.into_iter();
    let (mut dw, mut db) = partials.next().unwrap_or_else(|| (vec![T::zero(); g.o * k], vec![T::zero(); g.o]));
    for (pw, pb) in partials {
        dw.iter_mut().zip(&pw).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a = *a + b);
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [it, ih, iw] = g.input;
        let [kt, kh, kw] = g.kernel;
        let [ot, oh, ow] = g.out;
        let mut y = vec![0.0; g.n * g.o * ot * oh * ow];
        let mut idx = 0;
        for n in 0..g.n {
            for o in 0..g.o {
                for t in 0..ot {
                    for h in 0..oh {
                        for wq in 0..ow {
                            let mut s = b[o];
                            for c in 0..g.c {
                                for a in 0..kt {
                                    for bb in 0..kh {
                                        for d in 0..kw {
                                            let st = (t * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let sh = (h * g.stride[1] + bb) as isize - g.pad[1] as isize;
                                            let sw = (wq * g.stride[2] + d) as isize - g.pad[2] as isize;
                                            if st < 0 || sh < 0 || sw < 0 {
                                                continue;
                                            }
                                            let (st, sh, sw) = (st as usize, sh as usize, sw as usize);
                                            if st >= it || sh >= ih || sw >= iw {
                                                continue;
                                            }
                                            let xi = (((n * g.c + c) * it + st) * ih + sh) * iw + sw;
                                            let wi = (((o * g.c + c) * kt + a) * kh + bb) * kw + d;
                                            s += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            y[idx] = s;
                            idx += 1;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_gemm_matches_direct_loop() {
        let spec = ConvSpec::volumetric([1, 2, 2], [1, 1, 0]);
        let g = ConvGeom::new("conv3d", &[2, 3, 3, 7, 6], &[4, 3, 2, 3, 3], spec).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 3 * 7 * 6).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 2 * 3 * 3).map(|i| ((i * 13 % 29) as f64) / 14.0 - 1.0).collect();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let fast = forward(&g, &x, &w, &b);
        let slow = naive(&g, &x, &w, &b);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch_naming_dimension() {
        let err = ConvGeom::new("conv2d", &[1, 3, 1, 8, 8], &[4, 2, 1, 3, 3], ConvSpec::planar(1, 0))
            .unwrap_err();
        assert!(err.to_string().contains("channel"));
        let err = ConvGeom::new("conv2d", &[1, 3, 1, 2, 8], &[4, 3, 1, 3, 3], ConvSpec::planar(1, 0))
            .unwrap_err();
        assert!(err.to_string().contains("height"));
    }
}
