//! Forward/backward kernels for the fused tape operations.
//!
//! Everything here works on plain slices and [`Tensor`]s so the kernels can
//! be tested directly, without a tape.

use super::Tensor;
use crate::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::shape(format!(
            "softmax_rows expects rank 2, got {:?}",
            m.shape()
        )));
    }
    m.check_finite()?;
    Ok(softmax_rows_unchecked(m))
}

pub(crate) fn softmax_rows_unchecked(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        // exp underflows to 0 for gaps beyond ~745; keep every entry positive.
        for v in row.iter_mut() {
            *v = (*v / total).max(f64::MIN_POSITIVE);
        }
    }
    out
}

/// Per-row standardization followed by `gain`/`bias` affine, both of length
/// `cols`.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::shape(format!(
            "layer_norm over {cols} columns with gain {} / bias {}",
            gain.len(),
            bias.len()
        )));
    }
    Ok(layer_norm_forward(x, gain, bias, eps).0)
}

/// Returns `(output, normalized, inverse std per row)`.
pub(crate) fn layer_norm_forward(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> (Tensor, Tensor, Vec<f64>) {
    let cols = x.cols();
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let o = out.row_mut(r);
        for j in 0..cols {
            o[j] = xh[j] * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}

/// Depthwise causal 1-D convolution over the rows of `x` (`L × D`) with
/// per-channel kernels `w` (`D × K`) and bias `b` (`D`). Output row `t`
/// sees input rows `t-K+1 ..= t`, zero-padded on the left.
pub fn depthwise_conv(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let (len, ch) = (x.rows(), x.cols());
    let k = w.cols();
    let mut out = Tensor::zeros(&[len, ch]);
    for t in 0..len {
        let o = out.row_mut(t);
        o.copy_from_slice(b);
        for tap in 0..k {
            let Some(src) = (t + tap).checked_sub(k - 1) else {
                continue;
            };
            let xr = x.row(src);
            for c in 0..ch {
                o[c] += w.at(c, tap) * xr[c];
            }
        }
    }
    out
}

pub(crate) fn depthwise_conv_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (len, ch) = (x.rows(), x.cols());
    let k = w.cols();
    let mut dx = Tensor::zeros(&[len, ch]);
    let mut dw = Tensor::zeros(&[ch, k]);
    let mut db = Tensor::zeros(&[1, ch]);
    for t in 0..len {
        let g = dy.row(t);
        for c in 0..ch {
            db.data_mut()[c] += g[c];
        }
        for tap in 0..k {
            let Some(src) = (t + tap).checked_sub(k - 1) else {
                continue;
            };
            for c in 0..ch {
                dw.data_mut()[c * k + tap] += g[c] * x.at(src, c);
                dx.data_mut()[src * ch + c] += g[c] * w.at(c, tap);
            }
        }
    }
    (dx, dw, db)
}

/// Operands of a selective scan over a length-`L` sequence of `D` channels
/// with an `N`-wide diagonal state per channel.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    /// `L × D`
    pub u: &'a Tensor,
    /// `L × D`, positive step sizes
    pub delta: &'a Tensor,
    /// `D × N`, continuous-time diagonal state matrix (negative entries)
    pub a: &'a Tensor,
    /// `L × N`
    pub b: &'a Tensor,
    /// `L × N`
    pub c: &'a Tensor,
    /// `D`
    pub d: &'a [f64],
}

impl ScanInputs<'_> {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let (len, ch) = (self.u.rows(), self.u.cols());
        let n = self.a.cols();
        if len == 0 {
            return Err(Error::shape("selective scan over an empty sequence"));
        }
        let ok = self.delta.shape() == [len, ch]
            && self.a.shape() == [ch, n]
            && self.b.shape() == [len, n]
            && self.c.shape() == [len, n]
            && self.d.len() == ch;
        if !ok {
            return Err(Error::shape(format!(
                "selective scan operands u{:?} delta{:?} a{:?} b{:?} c{:?} d[{}]",
                self.u.shape(),
                self.delta.shape(),
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.d.len()
            )));
        }
        Ok((len, ch, n))
    }
}

/// Saved forward state of a scan: discretized transitions and the hidden
/// state after every step, each laid out `L × D × N`.
pub(crate) struct ScanTrace {
    pub decay: Vec<f64>,
    pub states: Vec<f64>,
}

/// Selective scan with zero-order-hold discretization:
/// `h_t = exp(Δ_t A) h_{t-1} + Δ_t B_t u_t`, `y_t = C_t h_t + D u_t`, `h_0 = 0`.
pub fn selective_scan(inputs: ScanInputs<'_>) -> Result<Tensor> {
    inputs.dims()?;
    Ok(selective_scan_traced(inputs).0)
}

pub(crate) fn selective_scan_traced(inp: ScanInputs<'_>) -> (Tensor, ScanTrace) {
    let (len, ch) = (inp.u.rows(), inp.u.cols());
    let n = inp.a.cols();
    let (u, delta, a) = (inp.u.data(), inp.delta.data(), inp.a.data());
    let (b, c) = (inp.b.data(), inp.c.data());
    let plane = ch * n;

    // Discretize every step up front, then run the linear recurrence as a
    // single elementwise sweep over the (D × N) state plane.
    let mut decay = vec![0.0; len * plane];
    let mut states = vec![0.0; len * plane];
    for t in 0..len {
        let bt = &b[t * n..(t + 1) * n];
        let base = t * plane;
        for ci in 0..ch {
            let dt = delta[t * ch + ci];
            let du = dt * u[t * ch + ci];
            let ar = &a[ci * n..(ci + 1) * n];
            let off = base + ci * n;
            for k in 0..n {
                decay[off + k] = (dt * ar[k]).exp();
                states[off + k] = du * bt[k];
            }
        }
    }
    for t in 1..len {
        let (prev, cur) = states.split_at_mut(t * plane);
        let prev = &prev[(t - 1) * plane..];
        let cur = &mut cur[..plane];
        let dec = &decay[t * plane..(t + 1) * plane];
        for ((h, &p), &g) in cur.iter_mut().zip(prev).zip(dec) {
            *h += g * p;
        }
    }

    let mut y = vec![0.0; len * ch];
    for t in 0..len {
        let ct = &c[t * n..(t + 1) * n];
        for ci in 0..ch {
            let h = &states[t * plane + ci * n..t * plane + (ci + 1) * n];
            let proj: f64 = h.iter().zip(ct).map(|(hv, cv)| hv * cv).sum();
            y[t * ch + ci] = proj + inp.d[ci] * u[t * ch + ci];
        }
    }
    let y = Tensor::new(vec![len, ch], y).expect("scan output shape");
    (y, ScanTrace { decay, states })
}

/// Gradients of a selective scan, in operand order `(u, delta, a, b, c, d)`.
pub(crate) struct ScanGrads {
    pub u: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

pub(crate) fn selective_scan_backward(inp: ScanInputs<'_>, trace: &ScanTrace, dy: &Tensor) -> ScanGrads {
    let (len, ch) = (inp.u.rows(), inp.u.cols());
    let n = inp.a.cols();
    let plane = ch * n;
    let (u, delta, a) = (inp.u.data(), inp.delta.data(), inp.a.data());
    let (b, c) = (inp.b.data(), inp.c.data());
    let dy = dy.data();

    let mut du = vec![0.0; len * ch];
    let mut ddelta = vec![0.0; len * ch];
    let mut da = vec![0.0; ch * n];
    let mut db = vec![0.0; len * n];
    let mut dc = vec![0.0; len * n];
    let mut dd = vec![0.0; ch];
    // Gradient flowing into h_t from later steps.
    let mut carry = vec![0.0; plane];

    for t in (0..len).rev() {
        let h_t = &trace.states[t * plane..(t + 1) * plane];
        let h_prev = (t > 0).then(|| &trace.states[(t - 1) * plane..t * plane]);
        let dec = &trace.decay[t * plane..(t + 1) * plane];
        for ci in 0..ch {
            let gy = dy[t * ch + ci];
            let ut = u[t * ch + ci];
            let dt = delta[t * ch + ci];
            dd[ci] += gy * ut;
            du[t * ch + ci] += gy * inp.d[ci];
            let mut g_dt = 0.0;
            let mut g_u = 0.0;
            for k in 0..n {
                let idx = ci * n + k;
                let ct = c[t * n + k];
                let bt = b[t * n + k];
                dc[t * n + k] += gy * h_t[idx];
                let g = carry[idx] + gy * ct;
                if let Some(hp) = h_prev {
                    let g_exp = g * hp[idx] * dec[idx];
                    g_dt += g_exp * a[idx];
                    da[idx] += g_exp * dt;
                }
                g_dt += g * bt * ut;
                db[t * n + k] += g * dt * ut;
                g_u += g * dt * bt;
                carry[idx] = g * dec[idx];
            }
            ddelta[t * ch + ci] += g_dt;
            du[t * ch + ci] += g_u;
        }
    }

    let mk = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data).expect("grad shape");
    ScanGrads {
        u: mk(vec![len, ch], du),
        delta: mk(vec![len, ch], ddelta),
        a: mk(vec![ch, n], da),
        b: mk(vec![len, n], db),
        c: mk(vec![len, n], dc),
        d: mk(vec![1, ch], dd),
    }
}

/// Symmetric Chamfer distance between two 3-D point sets given as `a × 3`
/// and `b × 3` tensors: mean nearest squared distance from each side.
pub fn chamfer(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.cols() != 3 || q.cols() != 3 {
        return Err(Error::shape("chamfer expects k × 3 point sets"));
    }
    if p.is_empty() || q.is_empty() {
        return Err(Error::shape("chamfer of an empty set"));
    }
    Ok(chamfer_matches(p, q).0)
}

/// Returns `(distance, nearest q for each p, nearest p for each q)`.
pub(crate) fn chamfer_matches(p: &Tensor, q: &Tensor) -> (f64, Vec<usize>, Vec<usize>) {
    let (na, nb) = (p.rows(), q.rows());
    let mut best_p = vec![(f64::INFINITY, 0usize); na];
    let mut best_q = vec![(f64::INFINITY, 0usize); nb];
    for i in 0..na {
        let pi = p.row(i);
        for j in 0..nb {
            let qj = q.row(j);
            let d = sq_dist(pi, qj);
            if d < best_p[i].0 {
                best_p[i] = (d, j);
            }
            if d < best_q[j].0 {
                best_q[j] = (d, i);
            }
        }
    }
    let fwd = best_p.iter().map(|b| b.0).sum::<f64>() / na as f64;
    let bwd = best_q.iter().map(|b| b.0).sum::<f64>() / nb as f64;
    (
        fwd + bwd,
        best_p.into_iter().map(|b| b.1).collect(),
        best_q.into_iter().map(|b| b.1).collect(),
    )
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&Tensor::from_rows(&[[2f64.ln(), 0.0]])).unwrap();
        assert!((s.at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.at(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        let s = softmax_rows(&Tensor::from_rows(&[[1000.0, 0.0]])).unwrap();
        assert!((s.at(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.at(0, 1).abs() < 1e-12);
        assert!(s.at(0, 1) > 0.0);
    }

    #[test]
    fn softmax_names_non_finite_index() {
        let m = Tensor::from_rows(&[[0.0, 1.0], [f64::INFINITY, 2.0]]);
        match softmax_rows(&m) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = [1.0; 4];
        let b = [0.0; 4];
        let y = layer_norm(&Tensor::row_vector(&[3.0; 4]), &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let y = layer_norm(&Tensor::row_vector(&[1.0, -1.0]), &g[..2], &b[..2], 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_standardizes_random_rows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[5, 37], |_| rng.random_range(-20.0..20.0));
        let y = layer_norm(&x, &[1.0; 37], &[0.0; 37], 1e-12).unwrap();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 37.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 37.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rejects_wrong_gain() {
        assert!(layer_norm(&Tensor::row_vector(&[1.0, 2.0]), &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn conv_is_causal() {
        let x = Tensor::from_rows(&[[1.0], [2.0], [3.0]]);
        let w = Tensor::from_rows(&[[0.5, 1.0]]);
        let y = depthwise_conv(&x, &w, &[0.0]);
        // y_t = 0.5 x_{t-1} + x_t
        assert_eq!(y.data(), &[1.0, 2.5, 4.0]);
    }

    #[test]
    fn scan_single_step() {
        let u = Tensor::from_rows(&[[2.0]]);
        let delta = Tensor::from_rows(&[[0.5]]);
        let a = Tensor::from_rows(&[[-1.0, -2.0]]);
        let b = Tensor::from_rows(&[[1.0, 3.0]]);
        let c = Tensor::from_rows(&[[4.0, -1.0]]);
        let y = selective_scan(ScanInputs {
            u: &u,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &[0.25],
        })
        .unwrap();
        // C·(Δ B u) + D u = 0.5*2*(4*1 - 1*3) + 0.25*2
        assert!((y.at(0, 0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn scan_with_zero_a_is_weighted_prefix_sum() {
        let u = Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0]]);
        let delta = Tensor::from_rows(&[[0.5], [1.0], [2.0], [0.25]]);
        let a = Tensor::from_rows(&[[0.0]]);
        let b = Tensor::from_rows(&[[1.0], [2.0], [1.0], [4.0]]);
        let c = Tensor::from_rows(&[[1.0], [1.0], [1.0], [1.0]]);
        let y = selective_scan(ScanInputs {
            u: &u,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &[0.0],
        })
        .unwrap();
        let mut acc = 0.0;
        for t in 0..4 {
            acc += delta.at(t, 0) * b.at(t, 0) * u.at(t, 0);
            assert!((y.at(t, 0) - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn scan_rejects_empty_and_mismatched() {
        let u = Tensor::zeros(&[3, 2]);
        let delta = Tensor::zeros(&[3, 2]);
        let a = Tensor::zeros(&[2, 4]);
        let b = Tensor::zeros(&[3, 4]);
        let c = Tensor::zeros(&[2, 4]);
        let inp = ScanInputs {
            u: &u,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &[0.0, 0.0],
        };
        assert!(selective_scan(inp).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let p = Tensor::from_rows(&[[0.0, 0.0, 0.0]]);
        let q = Tensor::from_rows(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&p, &q).unwrap(), 2.0);
        assert_eq!(chamfer(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
