//! Dense kernels behind the tensor ops and their adjoints.
//!
//! Every kernel accumulates in a fixed order so that results are bitwise
//! reproducible across runs on the same build.

/// Marks a gather/scatter slot that points at zero padding.
pub(crate) const PADDING: usize = usize::MAX;

/// Geometry of one batched 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_extent(len: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if k == 0 || stride == 0 || k > padded {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.c_out * self.positions()
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating each output over `k` in ascending order.
pub(crate) fn gemm_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n.max(1))) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n.max(1))) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
fn gemm_tn_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Unfolds one image `[C,H,W]` into columns `[C·k·k, H_out·W_out]`; padding reads as zero.
fn im2col(g: &ConvGeom, img: &[f64], col: &mut [f64]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for m in 0..g.k {
            for n in 0..g.k {
                let dst = &mut col[row * p..(row + 1) * p];
                for a in 0..g.h_out {
                    let y = (a * g.stride + m) as isize - g.pad as isize;
                    let out = &mut dst[a * g.w_out..(a + 1) * g.w_out];
                    if y < 0 || y >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (b, o) in out.iter_mut().enumerate() {
                        let x = (b * g.stride + n) as isize - g.pad as isize;
                        *o = if x < 0 || x >= g.w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, summing overlaps.
fn col2im_acc(g: &ConvGeom, col: &[f64], img: &mut [f64]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for m in 0..g.k {
            for n in 0..g.k {
                let src = &col[row * p..(row + 1) * p];
                for a in 0..g.h_out {
                    let y = (a * g.stride + m) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for b in 0..g.w_out {
                        let x = (b * g.stride + n) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += src[a * g.w_out + b];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Bias-free convolution: `[B,C,H,W] ⊛ [O,C,k,k] → [B,O,H',W']`.
///
/// Each output element is summed over `(c, m, n)` in row-major order starting
/// from zero, the same order as a direct nested-loop evaluation.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (kl, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; g.batch * g.out_plane()];
    let mut col = vec![0.0; kl * p];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_plane()..(b + 1) * g.in_plane()], &mut col);
        let dst = &mut out[b * g.out_plane()..(b + 1) * g.out_plane()];
        gemm_acc(g.c_out, p, kl, w, &col, dst);
    }
    out
}

/// Gradient of the convolution with respect to its input, given the output gradient.
pub(crate) fn conv_input_grad(g: &ConvGeom, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let (kl, p) = (g.patch_len(), g.positions());
    let mut gx = vec![0.0; g.batch * g.in_plane()];
    let mut col = vec![0.0; kl * p];
    for b in 0..g.batch {
        col.fill(0.0);
        let src = &gy[b * g.out_plane()..(b + 1) * g.out_plane()];
        gemm_tn_acc(kl, p, g.c_out, w, src, &mut col);
        col2im_acc(g, &col, &mut gx[b * g.in_plane()..(b + 1) * g.in_plane()]);
    }
    gx
}

/// Gradient of the convolution with respect to its filters, summed over the batch.
pub(crate) fn conv_weight_grad(g: &ConvGeom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let (kl, p) = (g.patch_len(), g.positions());
    let mut gw = vec![0.0; g.c_out * kl];
    let mut col = vec![0.0; kl * p];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_plane()..(b + 1) * g.in_plane()], &mut col);
        let src = &gy[b * g.out_plane()..(b + 1) * g.out_plane()];
        for o in 0..g.c_out {
            let gy_row = &src[o * p..(o + 1) * p];
            for r in 0..kl {
                gw[o * kl + r] += dot(gy_row, &col[r * p..(r + 1) * p]);
            }
        }
    }
    gw
}

/// Argmax source index of every max-pool window over `planes` stacked `h×w` planes.
///
/// Windows are scanned in row-major order and the first maximum wins; padded
/// cells count as zeros and are reported as [`PADDING`].
pub(crate) fn maxpool_indices(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize, Vec<usize>) {
    let ho = ConvGeom::out_extent(h, k, pad, stride).unwrap_or(0);
    let wo = ConvGeom::out_extent(w, k, pad, stride).unwrap_or(0);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for a in 0..ho {
            let rows_inside = a * stride >= pad && a * stride + k <= h + pad;
            for b in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = PADDING;
                if rows_inside && b * stride >= pad && b * stride + k <= w + pad {
                    let top = base + (a * stride - pad) * w + (b * stride - pad);
                    for m in 0..k {
                        let row = top + m * w;
                        for (n, &v) in x[row..row + k].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_at = row + n;
                            }
                        }
                    }
                    idx.push(best_at);
                    continue;
                }
                for m in 0..k {
                    for n in 0..k {
                        let y = (a * stride + m) as isize - pad as isize;
                        let xx = (b * stride + n) as isize - pad as isize;
                        let inside = y >= 0 && y < h as isize && xx >= 0 && xx < w as isize;
                        let (v, at) = if inside {
                            let at = base + y as usize * w + xx as usize;
                            (x[at], at)
                        } else {
                            (0.0, PADDING)
                        };
                        if v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                idx.push(best_at);
            }
        }
    }
    (ho, wo, idx)
}

/// Bin `[floor(a·len/out), ceil((a+1)·len/out))` of adaptive pooling.
pub(crate) fn adaptive_bin(a: usize, len: usize, out: usize) -> (usize, usize) {
    let start = a * len / out;
    let end = ((a + 1) * len).div_ceil(out);
    (start, end)
}

pub(crate) fn adaptive_avg(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let plane = &x[pl * h * w..(pl + 1) * h * w];
        for a in 0..ho {
            let (r0, r1) = adaptive_bin(a, h, ho);
            for b in 0..wo {
                let (c0, c1) = adaptive_bin(b, w, wo);
                let mut s = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        s += plane[r * w + c];
                    }
                }
                out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

/// Adjoint of [`adaptive_avg`]: spreads each output cell evenly over its bin.
pub(crate) fn adaptive_avg_t(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let plane = &mut out[pl * h * w..(pl + 1) * h * w];
        for a in 0..ho {
            let (r0, r1) = adaptive_bin(a, h, ho);
            for b in 0..wo {
                let (c0, c1) = adaptive_bin(b, w, wo);
                let share = g[(pl * ho + a) * wo + b] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for c in c0..c1 {
                        plane[r * w + c] += share;
                    }
                }
            }
        }
    }
    out
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Walks every element of `big` and yields the matching flat offset into
/// `small`, where `small` has size 1 along broadcast axes.
fn for_each_broadcast(big: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = big.iter().product();
    if n == 0 {
        return;
    }
    let small_strides: Vec<usize> = strides(small)
        .into_iter()
        .zip(small)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let rank = big.len();
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..n {
        f(flat, off);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            off += small_strides[ax];
            if index[ax] < big[ax] {
                break;
            }
            off -= small_strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
}

/// Splits off the trailing axes the two shapes share, which stay contiguous
/// in both, and returns the outer shapes with the shared block length.
fn split_block<'a>(big: &'a [usize], small: &'a [usize]) -> (&'a [usize], &'a [usize], usize) {
    let mut k = big.len();
    while k > 0 && big[k - 1] == small[k - 1] {
        k -= 1;
    }
    (&big[..k], &small[..k], big[k..].iter().product())
}

pub(crate) fn expand(x: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; to.iter().product()];
    let (outer_to, outer_from, len) = split_block(to, from);
    for_each_broadcast(outer_to, outer_from, |flat, off| {
        out[flat * len..(flat + 1) * len].copy_from_slice(&x[off * len..(off + 1) * len])
    });
    out
}

pub(crate) fn reduce(x: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; to.iter().product()];
    let (outer_from, outer_to, len) = split_block(from, to);
    for_each_broadcast(outer_from, outer_to, |flat, off| {
        let src = &x[flat * len..(flat + 1) * len];
        for (o, v) in out[off * len..(off + 1) * len].iter_mut().zip(src) {
            *o += v;
        }
    });
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}
