//! Plain slice kernels shared by forward and backward rules. All loops run in
//! a fixed order so results are bit-reproducible.

const MR: usize = 4;
const NR: usize = 8;
const TILE_N: usize = 128;

/// Register-blocked `c += A·b` where `a_at(i, p)` reads A. Every output
/// element accumulates over `p` in ascending order, exactly as a naive
/// triple loop would, so the blocking does not change any bits.
#[inline(always)]
fn gemm_blocked(m: usize, k: usize, n: usize, a_at: impl Fn(usize, usize) -> f64 + Copy, b: &[f64], c: &mut [f64]) {
    if k == 0 || n == 0 {
        return;
    }
    let m_full = m - m % MR;
    let mut panels = vec![0.0; m_full * k];
    for (blk, panel) in panels.chunks_exact_mut(k * MR).enumerate() {
        for p in 0..k {
            for r in 0..MR {
                panel[p * MR + r] = a_at(blk * MR + r, p);
            }
        }
    }
    let mut t0 = 0;
    while t0 < n {
        let t1 = (t0 + TILE_N).min(n);
        let n_full = t1 - (t1 - t0) % NR;
        for (blk, panel) in panels.chunks_exact(k * MR).enumerate() {
            let i = blk * MR;
            let mut j = t0;
            while j < n_full {
                let mut acc = [[0.0; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
                }
                for (ap, brow) in panel.chunks_exact(MR).zip(b.chunks_exact(n)) {
                    let bv: [f64; NR] = brow[j..j + NR].try_into().unwrap();
                    for r in 0..MR {
                        let x = ap[r];
                        for l in 0..NR {
                            acc[r][l] += x * bv[l];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
                }
                j += NR;
            }
            if n_full < t1 {
                edge(i, i + MR, n_full, t1, k, n, a_at, b, c);
            }
        }
        if m_full < m {
            edge(m_full, m, t0, t1, k, n, a_at, b, c);
        }
        t0 = t1;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn edge(
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    k: usize,
    n: usize,
    a_at: impl Fn(usize, usize) -> f64,
    b: &[f64],
    c: &mut [f64],
) {
    for i in i0..i1 {
        for p in 0..k {
            let x = a_at(i, p);
            let c_row = &mut c[i * n + j0..i * n + j1];
            for (cv, bv) in c_row.iter_mut().zip(&b[p * n + j0..p * n + j1]) {
                *cv += x * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_blocked(m, k, n, |i, p| a[i * k + p], b, c);
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            // four fixed lanes: vectorisable and still order-deterministic
            let mut acc = [0.0; 4];
            let mut xs = a_row.chunks_exact(4);
            let mut ys = b_row.chunks_exact(4);
            for (x, y) in (&mut xs).zip(&mut ys) {
                for l in 0..4 {
                    acc[l] += x[l] * y[l];
                }
            }
            let mut tail = 0.0;
            for (x, y) in xs.remainder().iter().zip(ys.remainder()) {
                tail += x * y;
            }
            c[i * n + j] += (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_blocked(m, k, n, |i, p| a[p * m + i], b, c);
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column `ox·stride + kx − pad`
    /// lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi = if self.width + self.pad > kx {
            ((self.width - 1 + self.pad - kx) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds a batch of `C×H×W` images into one `(C·kh·kw) × (n·H'·W')`
/// column matrix, sample `s` owning columns `s·H'·W'..(s + 1)·H'·W'`.
pub(crate) fn im2col(g: &ConvGeom, images: &[f64], n: usize) -> Vec<f64> {
    let img = g.channels * g.height * g.width;
    let mut cols = Vec::with_capacity(g.patch() * n * g.positions());
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = g.valid_cols(kx);
                for s in 0..n {
                    let image = &images[s * img..(s + 1) * img];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.height || lo == hi {
                            cols.resize(cols.len() + g.out_w, 0.0);
                            continue;
                        }
                        cols.resize(cols.len() + lo, 0.0);
                        let start = (c * g.height + iy as usize) * g.width + kx + lo * g.stride - g.pad;
                        let src = &image[start..start + (hi - lo - 1) * g.stride + 1];
                        if g.stride == 1 {
                            cols.extend_from_slice(src);
                        } else {
                            cols.extend(src.iter().step_by(g.stride));
                        }
                        cols.resize(cols.len() + g.out_w - hi, 0.0);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, off: usize, image: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ld + off..row * ld + off + p];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if lo == hi {
                        continue;
                    }
                    let start = (c * g.height + iy as usize) * g.width + kx + lo * g.stride - g.pad;
                    let dst = &mut image[start..start + (hi - lo - 1) * g.stride + 1];
                    for (x, v) in dst.iter_mut().step_by(g.stride).zip(&line[lo..hi]) {
                        *x += v;
                    }
                }
            }
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
