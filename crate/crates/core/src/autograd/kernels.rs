//! Forward and backward kernels for the fused primitives.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{gemm_strided, Mat, NdArray};

/// Geometry of a temporal convolution over `[N, C, T, V]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub v: usize,
    pub kt: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 3 || w[1] != x[1] {
            return Err(Error::Shape {
                op: "temporal_conv",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let (n, c_in, t_in, v) = (x[0], x[1], x[2], x[3]);
        let (c_out, kt) = (w[0], w[2]);
        if stride == 0 {
            return Err(Error::InvalidKernel(alloc::format!("stride must be positive")));
        }
        if kt == 0 || kt > t_in + 2 * pad {
            return Err(Error::InvalidKernel(alloc::format!(
                "kernel length {kt} exceeds padded length {} (T = {t_in}, padding = {pad})",
                t_in + 2 * pad
            )));
        }
        let t_out = (t_in + 2 * pad - kt) / stride + 1;
        Ok(Self {
            n,
            c_in,
            c_out,
            t_in,
            t_out,
            v,
            kt,
            stride,
            pad,
        })
    }

    /// Output frames `t'` for which input frame `t'·s + tau − pad` is in range.
    fn valid(&self, tau: usize) -> (usize, usize) {
        // t'·s + tau >= pad  and  t'·s + tau - pad < t_in
        let lo = if tau >= self.pad {
            0
        } else {
            (self.pad - tau).div_ceil(self.stride)
        };
        let hi_num = self.t_in + self.pad;
        let hi = if hi_num > tau {
            ((hi_num - tau - 1) / self.stride + 1).min(self.t_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

impl ConvGeom {
    /// Frames per phase once the input is split into `stride` interleaved phases.
    fn phase_len(&self) -> usize {
        self.t_in.div_ceil(self.stride)
    }

    /// Length of one `(n, c)` row in phase layout.
    fn row_len(&self) -> usize {
        self.stride * self.phase_len() * self.v
    }

    /// Output column range and phase-layout input offset for tap `tau`.
    fn tap(&self, tau: usize) -> Option<(usize, usize, usize)> {
        let (lo, hi) = self.valid(tau);
        if lo >= hi {
            return None;
        }
        let t0 = lo * self.stride + tau - self.pad;
        let (r, q0) = (t0 % self.stride, t0 / self.stride);
        Some((lo * self.v, (r * self.phase_len() + q0) * self.v, (hi - lo) * self.v))
    }
}

/// Reorders every `(n, c)` row from frame order to `[phase][frame / stride]`
/// order, zero-filling short phases.
fn to_phases(x: &[f64], rows: usize, g: &ConvGeom) -> Vec<f64> {
    if g.stride == 1 {
        return x.to_vec();
    }
    let (v, tq, len) = (g.v, g.phase_len(), g.row_len());
    let mut out = vec![0.0; rows * len];
    for (src, dst) in x.chunks(g.t_in * v).zip(out.chunks_mut(len)) {
        for t in 0..g.t_in {
            let at = ((t % g.stride) * tq + t / g.stride) * v;
            dst[at..at + v].copy_from_slice(&src[t * v..(t + 1) * v]);
        }
    }
    out
}

fn from_phases(xp: &[f64], rows: usize, g: &ConvGeom) -> Vec<f64> {
    if g.stride == 1 {
        return xp.to_vec();
    }
    let (v, tq, len) = (g.v, g.phase_len(), g.row_len());
    let mut out = vec![0.0; rows * g.t_in * v];
    for (src, dst) in xp.chunks(len).zip(out.chunks_mut(g.t_in * v)) {
        for t in 0..g.t_in {
            let at = ((t % g.stride) * tq + t / g.stride) * v;
            dst[t * v..(t + 1) * v].copy_from_slice(&src[at..at + v]);
        }
    }
    out
}

pub(crate) fn temporal_conv_forward(x: &NdArray, w: &NdArray, b: Option<&NdArray>, g: ConvGeom) -> NdArray {
    let (v, tout, xl) = (g.v, g.t_out, g.row_len());
    let (xn, yn) = (g.c_in * xl, g.c_out * tout * v);
    let mut y = vec![0.0; g.n * yn];
    if let Some(b) = b {
        for (row, &bv) in y.chunks_mut(tout * v).zip(b.data().iter().cycle()) {
            row.fill(bv);
        }
    }
    let xp = to_phases(x.data(), g.n * g.c_in, &g);
    let wd = w.data();
    for tau in 0..g.kt {
        let Some((y0, x0, cols)) = g.tap(tau) else { continue };
        let wt = Mat {
            data: &wd[tau..],
            rs: g.c_in * g.kt,
            cs: g.kt,
        };
        for n in 0..g.n {
            let xs = Mat {
                data: &xp[n * xn + x0..(n + 1) * xn],
                rs: xl,
                cs: 1,
            };
            gemm_strided(
                g.c_out,
                g.c_in,
                cols,
                wt,
                xs,
                &mut y[n * yn + y0..(n + 1) * yn],
                tout * v,
                1,
            );
        }
    }
    NdArray::new(vec![g.n, g.c_out, tout, v], y).expect("conv output shape")
}

/// Returns gradients for (x, w, b).
pub(crate) fn temporal_conv_backward(
    x: &NdArray,
    w: &NdArray,
    dy: &NdArray,
    g: ConvGeom,
) -> (NdArray, NdArray, NdArray) {
    let (v, tout, xl) = (g.v, g.t_out, g.row_len());
    let (xn, yn) = (g.c_in * xl, g.c_out * tout * v);
    let xp = to_phases(x.data(), g.n * g.c_in, &g);
    let mut dxp = vec![0.0; xp.len()];
    let mut dw = vec![0.0; w.len()];
    let (wd, dyd) = (w.data(), dy.data());
    let db: Vec<f64> = (0..g.c_out)
        .map(|co| {
            (0..g.n)
                .map(|n| {
                    dyd[n * yn + co * tout * v..n * yn + (co + 1) * tout * v]
                        .iter()
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    for tau in 0..g.kt {
        let Some((y0, x0, cols)) = g.tap(tau) else { continue };
        let wt = Mat {
            data: &wd[tau..],
            rs: g.c_in * g.kt,
            cs: g.kt,
        };
        for n in 0..g.n {
            let dys = Mat {
                data: &dyd[n * yn + y0..(n + 1) * yn],
                rs: tout * v,
                cs: 1,
            };
            let xs = Mat {
                data: &xp[n * xn + x0..(n + 1) * xn],
                rs: xl,
                cs: 1,
            };
            // dW_tau += dY · X_tauᵀ
            gemm_strided(g.c_out, cols, g.c_in, dys, xs.t(), &mut dw[tau..], g.c_in * g.kt, g.kt);
            // dX_tau += W_tauᵀ · dY
            gemm_strided(
                g.c_in,
                g.c_out,
                cols,
                wt.t(),
                dys,
                &mut dxp[n * xn + x0..(n + 1) * xn],
                xl,
                1,
            );
        }
    }
    let dx = from_phases(&dxp, g.n * g.c_in, &g);
    (
        NdArray::new(x.shape().to_vec(), dx).expect("dx shape"),
        NdArray::new(w.shape().to_vec(), dw).expect("dw shape"),
        NdArray::new(vec![g.c_out], db).expect("db shape"),
    )
}

/// Geometry of multi-head attention over `[B, T, heads·d]` operands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub t: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub scale: f64,
}

/// Row-wise softmax of `scale · s` in place.
fn softmax_rows(s: &mut [f64], len: usize, scale: f64) {
    for row in s.chunks_exact_mut(len) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = math::exp(scale * (*x - mx));
            sum += *x;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Returns the concatenated head outputs `[B, T, heads·d_v]` and the
/// attention weights `[B, heads, T, T]`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], g: AttnGeom) -> (Vec<f64>, Vec<f64>) {
    let (t, h) = (g.t, g.heads);
    let (qs, vs) = (h * g.d_k, h * g.d_v);
    let mut out = vec![0.0; g.batch * t * vs];
    let mut w = vec![0.0; g.batch * h * t * t];
    for b in 0..g.batch {
        for hd in 0..h {
            let qo = b * t * qs + hd * g.d_k;
            let vo = b * t * vs + hd * g.d_v;
            let wo = (b * h + hd) * t * t;
            let qm = Mat {
                data: &q[qo..],
                rs: qs,
                cs: 1,
            };
            let km = Mat {
                data: &k[qo..],
                rs: qs,
                cs: 1,
            };
            let wb = &mut w[wo..wo + t * t];
            gemm_strided(t, g.d_k, t, qm, km.t(), wb, t, 1);
            softmax_rows(wb, t, g.scale);
            let vm = Mat {
                data: &v[vo..],
                rs: vs,
                cs: 1,
            };
            gemm_strided(t, t, g.d_v, Mat::rows(&w[wo..wo + t * t], t), vm, &mut out[vo..], vs, 1);
        }
    }
    (out, w)
}

/// Returns gradients for (q, k, v).
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    w: &[f64],
    dout: &[f64],
    g: AttnGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, h) = (g.t, g.heads);
    let (qs, vs) = (h * g.d_k, h * g.d_v);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; t * t];
    for b in 0..g.batch {
        for hd in 0..h {
            let qo = b * t * qs + hd * g.d_k;
            let vo = b * t * vs + hd * g.d_v;
            let wo = (b * h + hd) * t * t;
            let wb = Mat::rows(&w[wo..wo + t * t], t);
            let dom = Mat {
                data: &dout[vo..],
                rs: vs,
                cs: 1,
            };
            let vm = Mat {
                data: &v[vo..],
                rs: vs,
                cs: 1,
            };
            // dW = dO · Vᵀ, dV = Wᵀ · dO
            ds.fill(0.0);
            gemm_strided(t, g.d_v, t, dom, vm.t(), &mut ds, t, 1);
            gemm_strided(t, t, g.d_v, wb.t(), dom, &mut dv[vo..], vs, 1);
            for (drow, wrow) in ds.chunks_exact_mut(t).zip(wb.data.chunks_exact(t)) {
                let dot: f64 = drow.iter().zip(wrow).map(|(d, w)| d * w).sum();
                for (d, w) in drow.iter_mut().zip(wrow) {
                    *d = g.scale * w * (*d - dot);
                }
            }
            let dsm = Mat::rows(&ds, t);
            let qm = Mat {
                data: &q[qo..],
                rs: qs,
                cs: 1,
            };
            let km = Mat {
                data: &k[qo..],
                rs: qs,
                cs: 1,
            };
            gemm_strided(t, t, g.d_k, dsm, km, &mut dq[qo..], qs, 1);
            gemm_strided(t, t, g.d_k, dsm.t(), qm, &mut dk[qo..], qs, 1);
        }
    }
    (dq, dk, dv)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &NdArray, axis: usize) -> NdArray {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(xd[base + l * inner]);
            }
            let mut s = 0.0;
            for l in 0..len {
                let e = math::exp(xd[base + l * inner] - mx);
                y[base + l * inner] = e;
                s += e;
            }
            for l in 0..len {
                y[base + l * inner] /= s;
            }
        }
    }
    NdArray::new(x.shape().to_vec(), y).expect("softmax shape")
}

pub(crate) fn softmax_backward(y: &NdArray, dy: &NdArray, axis: usize) -> NdArray {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yd = y.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for l in 0..len {
                dot += yd[base + l * inner] * dyd[base + l * inner];
            }
            for l in 0..len {
                let k = base + l * inner;
                dx[k] = yd[k] * (dyd[k] - dot);
            }
        }
    }
    NdArray::new(y.shape().to_vec(), dx).expect("softmax grad shape")
}

/// `D^{-1/2} B D^{-1/2}` with `D = diag(row sums of B)`.
pub fn sym_normalize(b: &NdArray) -> Result<NdArray> {
    let (_, deg) = degree_inv_sqrt(b)?;
    let v = b.shape()[0];
    // one rounding per entry, symmetric in i and j
    Ok(NdArray::from_fn(&[v, v], |idx| {
        let (i, j) = (idx / v, idx % v);
        b.data()[idx] / math::sqrt(deg[i] * deg[j])
    }))
}

pub(crate) fn degree_inv_sqrt(b: &NdArray) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = b.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "adjacency must be square".into(),
        });
    }
    let v = s[0];
    let mut inv = Vec::with_capacity(v);
    let mut deg = Vec::with_capacity(v);
    for i in 0..v {
        // summing in sorted order makes the degree independent of joint labels
        let mut row = b.data()[i * v..(i + 1) * v].to_vec();
        row.sort_by(f64::total_cmp);
        let d: f64 = row.iter().sum();
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Numeric(alloc::format!(
                "degree of joint {i} is {d}; masked adjacency must keep positive degrees"
            )));
        }
        deg.push(d);
        inv.push(1.0 / math::sqrt(d));
    }
    Ok((inv, deg))
}

/// Gradient of `sym_normalize` with respect to `B`.
pub(crate) fn sym_normalize_backward(b: &NdArray, g: &NdArray) -> Result<NdArray> {
    let (s, deg) = degree_inv_sqrt(b)?;
    let v = deg.len();
    let bd = b.data();
    let gd = g.data();
    // dL/dd_m = -1/2 d_m^{-3/2} [ Σ_j G_mj B_mj s_j + Σ_i G_im B_im s_i ]
    let mut dd = vec![0.0; v];
    for m in 0..v {
        let mut acc = 0.0;
        for j in 0..v {
            acc += gd[m * v + j] * bd[m * v + j] * s[j];
            acc += gd[j * v + m] * bd[j * v + m] * s[j];
        }
        dd[m] = -0.5 * s[m] * s[m] * s[m] * acc;
    }
    Ok(NdArray::from_fn(&[v, v], |idx| {
        let (i, j) = (idx / v, idx % v);
        gd[idx] * s[i] * s[j] + dd[i]
    }))
}

pub(crate) fn huber_value(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * a - 0.5 * delta * delta
    }
}

/// dφ/dr, bounded by `delta` in magnitude.
pub(crate) fn huber_slope(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}
