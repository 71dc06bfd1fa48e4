use super::Scalar;

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Per-axis source taps for half-pixel-centre bilinear sampling.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl Taps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (s.floor() as usize).min(src - 1);
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(if l + 1 < src { s - l as f64 } else { 0.0 });
        }
        Self { lo, hi, frac }
    }
}

pub(crate) fn resize_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if (ih, iw) == (oh, ow) {
        return x.to_vec();
    }
    let ty = Taps::new(ih, oh);
    let tx = Taps::new(iw, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        for i in 0..oh {
            let fy = T::lit(ty.frac[i]);
            let r0 = &src[ty.lo[i] * iw..(ty.lo[i] + 1) * iw];
            let r1 = &src[ty.hi[i] * iw..(ty.hi[i] + 1) * iw];
            for j in 0..ow {
                let fx = T::lit(tx.frac[j]);
                let top = r0[tx.lo[j]] * (T::one() - fx) + r0[tx.hi[j]] * fx;
                let bot = r1[tx.lo[j]] * (T::one() - fx) + r1[tx.hi[j]] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if (ih, iw) == (oh, ow) {
        return dy.to_vec();
    }
    let ty = Taps::new(ih, oh);
    let tx = Taps::new(iw, ow);
    let mut dx = vec![T::zero(); planes * ih * iw];
    for p in 0..planes {
        let d = &mut dx[p * ih * iw..(p + 1) * ih * iw];
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let fy = T::lit(ty.frac[i]);
            for j in 0..ow {
                let fx = T::lit(tx.frac[j]);
                let v = g[i * ow + j];
                let (a, b) = (v * (T::one() - fy), v * fy);
                let (l, h) = (tx.lo[j], tx.hi[j]);
                let r0 = ty.lo[i] * iw;
                let r1 = ty.hi[i] * iw;
                d[r0 + l] = d[r0 + l] + a * (T::one() - fx);
                d[r0 + h] = d[r0 + h] + a * fx;
                d[r1 + l] = d[r1 + l] + b * (T::one() - fx);
                d[r1 + h] = d[r1 + h] + b * fx;
            }
        }
    }
    dx
}

/// Geometry of a framed canvas: interior `h x w` surrounded by `width` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameGeom {
    pub width: usize,
    pub interior_h: usize,
    pub interior_w: usize,
    /// Parameters per border pixel: 3 (colour) or 1 (grey, replicated).
    pub channels: usize,
}

impl FrameGeom {
    pub fn outer(&self) -> (usize, usize) {
        (self.interior_h + 2 * self.width, self.interior_w + 2 * self.width)
    }

    pub fn border_pixels(&self) -> usize {
        2 * self.width * (self.interior_h + self.interior_w + 2 * self.width)
    }

    pub fn border_len(&self) -> usize {
        self.border_pixels() * self.channels
    }

    /// For each canvas position in row-major order: `Some(border index)` or
    /// `None` for interior positions.
    pub fn canvas_map(&self) -> Vec<Option<usize>> {
        let (oh, ow) = self.outer();
        let w = self.width;
        let mut next = 0;
        let mut map = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let inside = r >= w && r < w + self.interior_h && c >= w && c < w + self.interior_w;
                if inside {
                    map.push(None);
                } else {
                    map.push(Some(next));
                    next += 1;
                }
            }
        }
        map
    }
}

/// `image` is laid out as `n` samples of `ch` channels of `frames` planes.
pub(crate) fn frame_forward<T: Scalar>(
    image: &[T],
    border: &[T],
    g: &FrameGeom,
    (n, ch, frames): (usize, usize, usize),
) -> Vec<T> {
    let (oh, ow) = g.outer();
    let (ih, iw) = (g.interior_h, g.interior_w);
    let map = g.canvas_map();
    let mut out = Vec::with_capacity(n * ch * frames * oh * ow);
    for s in 0..n {
        for c in 0..ch {
            let coff = if g.channels == 1 { 0 } else { c };
            for f in 0..frames {
                let plane = ((s * ch + c) * frames + f) * ih * iw;
                for r in 0..oh {
                    for col in 0..ow {
                        match map[r * ow + col] {
                            Some(p) => out.push(border[p * g.channels + coff]),
                            None => out.push(image[plane + (r - g.width) * iw + col - g.width]),
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (d image, d border).
pub(crate) fn frame_backward<T: Scalar>(
    dy: &[T],
    g: &FrameGeom,
    (n, ch, frames): (usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = g.outer();
    let (ih, iw) = (g.interior_h, g.interior_w);
    let map = g.canvas_map();
    let mut dimage = vec![T::zero(); n * ch * frames * ih * iw];
    let mut dborder = vec![T::zero(); g.border_len()];
    let mut q = 0;
    for s in 0..n {
        for c in 0..ch {
            let coff = if g.channels == 1 { 0 } else { c };
            for f in 0..frames {
                let plane = ((s * ch + c) * frames + f) * ih * iw;
                for r in 0..oh {
                    for col in 0..ow {
                        let v = dy[q];
                        q += 1;
                        match map[r * ow + col] {
                            Some(p) => {
                                let i = p * g.channels + coff;
                                dborder[i] = dborder[i] + v;
                            }
                            None => dimage[plane + (r - g.width) * iw + col - g.width] = v,
                        }
                    }
                }
            }
        }
    }
    (dimage, dborder)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_identity_for_equal_sizes() {
        let t = Taps::new(5, 5);
        assert_eq!(t.lo, vec![0, 1, 2, 3, 4]);
        assert!(t.frac.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn canvas_map_counts_border_once() {
        let g = FrameGeom { width: 2, interior_h: 3, interior_w: 5, channels: 3 };
        let map = g.canvas_map();
        let border: Vec<usize> = map.iter().flatten().copied().collect();
        assert_eq!(border.len(), g.border_pixels());
        assert_eq!(border, (0..g.border_pixels()).collect::<Vec<_>>());
        assert_eq!(map.iter().filter(|m| m.is_none()).count(), 15);
    }
}
