//! Raw numeric kernels behind the differentiable ops. Everything here works on
//! flat row-major slices; shape checking happens in the tape layer.

use std::sync::OnceLock;

/// Number of worker threads for per-sample kernels, read once from `PQK_THREADS`.
pub fn thread_count() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("PQK_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized pieces of `out`,
/// spreading the pieces across up to [`thread_count`] threads. Each piece is
/// written by exactly one call, so the result does not depend on the thread count.
pub fn for_each_chunk<F>(out: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let pieces = out.len() / chunk_len;
    let threads = thread_count().min(pieces.max(1));
    if threads <= 1 {
        for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
        return;
    }
    let per_thread = pieces.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, group) in out.chunks_mut(per_thread * chunk_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, chunk) in group.chunks_mut(chunk_len).enumerate() {
                    f(t * per_thread + j, chunk);
                }
            });
        }
    });
}

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), with `op` an optional transpose.
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths were checked against the logical dimensions and
    // strides above, so every index the kernel touches is in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.out_h() * self.out_w()
    }

    /// Unfolds one sample `[cin, h, w]` into `[cin*kh*kw, oh*ow]` columns.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                plane[iy as usize * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds columns back into `[cin, h, w]`.
    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                plane[iy as usize * self.w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, batch: usize, x: &[f32], w: &[f32]) -> Vec<f32> {
    let spatial = g.out_h() * g.out_w();
    let mut out = vec![0.0; batch * g.out_len()];
    for_each_chunk(&mut out, g.out_len(), |n, y| {
        let mut cols = vec![0.0; g.patch_len() * spatial];
        g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        gemm(g.cout, g.patch_len(), spatial, w, false, &cols, false, y, false);
    });
    out
}

/// Returns `(dx, dw)` for upstream gradient `dy`.
pub fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let spatial = g.out_h() * g.out_w();
    let k = g.patch_len();
    let wlen = g.cout * k;
    // Per-sample [dx | dw] scratch, reduced over samples in index order afterwards.
    let stride = g.in_len() + wlen;
    let mut scratch = vec![0.0; batch * stride];
    for_each_chunk(&mut scratch, stride, |n, buf| {
        let (dx, dw) = buf.split_at_mut(g.in_len());
        let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        let mut cols = vec![0.0; k * spatial];
        g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        gemm(g.cout, spatial, k, dyn_, false, &cols, true, dw, false);
        gemm(k, g.cout, spatial, w, true, dyn_, false, &mut cols, false);
        g.col2im(&cols, dx);
    });
    let mut dx = vec![0.0; batch * g.in_len()];
    let mut dw = vec![0.0; wlen];
    for (n, buf) in scratch.chunks(stride).enumerate() {
        dx[n * g.in_len()..(n + 1) * g.in_len()].copy_from_slice(&buf[..g.in_len()]);
        for (acc, v) in dw.iter_mut().zip(&buf[g.in_len()..]) {
            *acc += v;
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Valid input rows/cols `[start, end)` covered by output cell `o` along one axis.
    fn span(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = start + self.kernel as isize;
        (start.max(0) as usize, (end.min(len as isize)) as usize)
    }
}

/// Average pooling over `planes` independent `[h, w]` planes. Each window is
/// averaged over the input cells it actually covers (padding is not counted).
pub fn avg_pool_forward(g: &PoolGeom, planes: usize, x: &[f32]) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..oh {
            let (y0, y1) = g.span(oy, g.h);
            for ox in 0..ow {
                let (x0, x1) = g.span(ox, g.w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[y * g.w + xx];
                    }
                }
                out[p * oh * ow + oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &PoolGeom, planes: usize, dy: &[f32]) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![0.0; planes * g.h * g.w];
    for p in 0..planes {
        let dst = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..oh {
            let (y0, y1) = g.span(oy, g.h);
            for ox in 0..ow {
                let (x0, x1) = g.span(ox, g.w);
                let share = dy[p * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * g.w + xx] += share;
                    }
                }
            }
        }
    }
    dx
}
