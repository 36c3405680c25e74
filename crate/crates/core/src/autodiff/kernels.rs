//! Numeric kernels for the graph ops. Convolution is lowered to im2col plus
//! a single-precision GEMM.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `[rows, cols]` matrix, viewed in place.
    pub const fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn extent(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = a · b + beta · c` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    lc: Layout,
) {
    assert!(la.extent(m, k) <= a.len(), "gemm: lhs out of bounds");
    assert!(lb.extent(k, n) <= b.len(), "gemm: rhs out of bounds");
    assert!(lc.extent(m, n) <= c.len(), "gemm: output out of bounds");
    // The stride checks above guarantee every access stays inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_ch: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_ch
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.in_ch
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Images per im2col chunk; bounds the scratch buffer.
const CONV_CHUNK: usize = 32;

/// Valid kernel-column range `[lo, hi)` for output column `ox`.
fn kx_span(g: &ConvGeometry, ox: usize) -> (usize, usize) {
    let left = ox as isize - g.pad_left as isize;
    let lo = (-left).max(0) as usize;
    let hi = ((g.width as isize - left).min(g.kw as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Fills `patches` (`[nb * out_h * out_w, kh * kw * in_ch]`) for `nb` images.
/// Within one kernel row the `kw * in_ch` inputs are contiguous in NHWC, so
/// each in-bounds span is a single copy.
fn im2col(g: &ConvGeometry, images: &[f32], nb: usize, patches: &mut [f32]) {
    let plen = g.patch_len();
    let c = g.in_ch;
    let row_len = g.kw * c;
    for img in 0..nb {
        let src = &images[img * g.image_len()..(img + 1) * g.image_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let (lo, hi) = kx_span(g, ox);
                let ix0 = ox + lo - g.pad_left;
                let row = (img * g.out_pixels() + oy * g.out_w + ox) * plen;
                let dst = &mut patches[row..row + plen];
                for ky in 0..g.kh {
                    let cell = &mut dst[ky * row_len..(ky + 1) * row_len];
                    let iy = oy as isize + ky as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        cell.fill(0.0);
                        continue;
                    }
                    cell[..lo * c].fill(0.0);
                    cell[hi * c..].fill(0.0);
                    let s = (iy as usize * g.width + ix0) * c;
                    cell[lo * c..hi * c].copy_from_slice(&src[s..s + (hi - lo) * c]);
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back into image gradients.
fn col2im(g: &ConvGeometry, dpatches: &[f32], nb: usize, dimages: &mut [f32]) {
    let plen = g.patch_len();
    let c = g.in_ch;
    let row_len = g.kw * c;
    for img in 0..nb {
        let dst = &mut dimages[img * g.image_len()..(img + 1) * g.image_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let (lo, hi) = kx_span(g, ox);
                if lo == hi {
                    continue;
                }
                let ix0 = ox + lo - g.pad_left;
                let row = (img * g.out_pixels() + oy * g.out_w + ox) * plen;
                let src = &dpatches[row..row + plen];
                for ky in 0..g.kh {
                    let iy = oy as isize + ky as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let d = (iy as usize * g.width + ix0) * c;
                    let span = &src[ky * row_len + lo * c..ky * row_len + hi * c];
                    for (a, &b) in dst[d..d + span.len()].iter_mut().zip(span) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f32], kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let plen = g.patch_len();
    let opix = g.out_pixels();
    let mut out = vec![0.0; g.batch * opix * g.out_ch];
    let mut patches = vec![0.0; CONV_CHUNK.min(g.batch) * opix * plen];
    for start in (0..g.batch).step_by(CONV_CHUNK) {
        let nb = CONV_CHUNK.min(g.batch - start);
        let rows = nb * opix;
        im2col(g, &x[start * g.image_len()..], nb, &mut patches[..rows * plen]);
        let dst = &mut out[start * opix * g.out_ch..(start + nb) * opix * g.out_ch];
        for row in dst.chunks_exact_mut(g.out_ch) {
            row.copy_from_slice(bias);
        }
        gemm(
            rows,
            plen,
            g.out_ch,
            &patches,
            Layout::row_major(plen),
            kernel,
            Layout::row_major(g.out_ch),
            1.0,
            dst,
            Layout::row_major(g.out_ch),
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dkernel: Option<Vec<f32>>,
    pub dbias: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f32],
    kernel: &[f32],
    dy: &[f32],
    want_dx: bool,
    want_params: bool,
) -> ConvGrads {
    let plen = g.patch_len();
    let opix = g.out_pixels();
    let mut dx = want_dx.then(|| vec![0.0; g.batch * g.image_len()]);
    let mut dk = want_params.then(|| vec![0.0; plen * g.out_ch]);
    let db = want_params.then(|| {
        let mut db = vec![0.0f32; g.out_ch];
        for row in dy.chunks_exact(g.out_ch) {
            for (a, &b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        db
    });
    let chunk = CONV_CHUNK.min(g.batch);
    let mut patches = vec![0.0; chunk * opix * plen];
    let mut dpatches = if want_dx { vec![0.0; chunk * opix * plen] } else { Vec::new() };
    for start in (0..g.batch).step_by(CONV_CHUNK) {
        let nb = CONV_CHUNK.min(g.batch - start);
        let rows = nb * opix;
        let dy_chunk = &dy[start * opix * g.out_ch..(start + nb) * opix * g.out_ch];
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[start * g.image_len()..], nb, &mut patches[..rows * plen]);
            // dK[plen, out] += patchesᵀ · dY
            gemm(
                plen,
                rows,
                g.out_ch,
                &patches,
                Layout::transposed(plen),
                dy_chunk,
                Layout::row_major(g.out_ch),
                1.0,
                dk,
                Layout::row_major(g.out_ch),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dPatches = dY · Kᵀ
            gemm(
                rows,
                g.out_ch,
                plen,
                dy_chunk,
                Layout::row_major(g.out_ch),
                kernel,
                Layout::transposed(g.out_ch),
                0.0,
                &mut dpatches[..rows * plen],
                Layout::row_major(plen),
            );
            col2im(g, &dpatches, nb, &mut dx[start * g.image_len()..]);
        }
    }
    ConvGrads {
        dx,
        dkernel: dk,
        dbias: db,
    }
}

/// 2×2/stride-2 max pooling over `[n, h, w, c]`. Returns the output and, for
/// each output cell, the flat input index of the selected element. Ties go to
/// the first element in row-major window order.
pub(crate) fn maxpool2x2_forward(
    x: &[f32],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut idx = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let at = |dy: usize, dx: usize| ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    let mut best = at(0, 0);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = at(dy, dx);
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool2x2_backward(dy: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

/// `y[n, out] = x[n, in] · Wᵀ + b`.
pub(crate) fn dense_forward(x: &[f32], n: usize, inp: usize, w: &[f32], b: &[f32]) -> Vec<f32> {
    let out_dim = b.len();
    let mut y = Vec::with_capacity(n * out_dim);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(
        n,
        inp,
        out_dim,
        x,
        Layout::row_major(inp),
        w,
        Layout::transposed(inp),
        1.0,
        &mut y,
        Layout::row_major(out_dim),
    );
    y
}

pub(crate) fn dense_backward_input(dy: &[f32], n: usize, w: &[f32], inp: usize, out_dim: usize) -> Vec<f32> {
    let mut dx = vec![0.0; n * inp];
    gemm(
        n,
        out_dim,
        inp,
        dy,
        Layout::row_major(out_dim),
        w,
        Layout::row_major(inp),
        0.0,
        &mut dx,
        Layout::row_major(inp),
    );
    dx
}

pub(crate) fn dense_backward_params(
    dy: &[f32],
    x: &[f32],
    n: usize,
    inp: usize,
    out_dim: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut dw = vec![0.0; out_dim * inp];
    gemm(
        out_dim,
        n,
        inp,
        dy,
        Layout::transposed(out_dim),
        x,
        Layout::row_major(inp),
        0.0,
        &mut dw,
        Layout::row_major(inp),
    );
    let mut db = vec![0.0; out_dim];
    for row in dy.chunks_exact(out_dim) {
        for (a, &b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f32], k: &[f32], b: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; g.batch * g.out_h * g.out_w * g.out_ch];
        for n in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for o in 0..g.out_ch {
                        let mut acc = b[o] as f64;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = oy as isize + ky as isize - g.pad_top as isize;
                                let ix = ox as isize + kx as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                for c in 0..g.in_ch {
                                    let xi = ((n * g.height + iy as usize) * g.width + ix as usize) * g.in_ch + c;
                                    let ki = ((ky * g.kw + kx) * g.in_ch + c) * g.out_ch + o;
                                    acc += x[xi] as f64 * k[ki] as f64;
                                }
                            }
                        }
                        out[((n * g.out_h + oy) * g.out_w + ox) * g.out_ch + o] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeometry {
            batch: 35,
            height: 6,
            width: 5,
            in_ch: 2,
            kh: 3,
            kw: 3,
            out_ch: 4,
            pad_top: 1,
            pad_left: 1,
            out_h: 6,
            out_w: 5,
        };
        let mut rng = crate::rng::CounterRng::new(5);
        let x: Vec<f32> = (0..g.batch * 60).map(|_| rng.normal() as f32).collect();
        let k: Vec<f32> = (0..3 * 3 * 2 * 4).map(|_| rng.normal() as f32).collect();
        let b = vec![0.5, -0.25, 0.0, 1.0];
        let fast = conv2d_forward(&g, &x, &k, &b);
        let slow = naive_conv(&g, &x, &k, &b);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let (y, idx) = maxpool2x2_forward(&x, 1, 2, 2, 1);
        assert_eq!(y, vec![1.0]);
        assert_eq!(idx, vec![0]);
        let x = [0.0, 2.0, 2.0, 1.0];
        let (_, idx) = maxpool2x2_forward(&x, 1, 2, 2, 1);
        assert_eq!(idx, vec![1]);
    }
}
