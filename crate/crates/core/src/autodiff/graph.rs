use std::sync::Arc;

use super::tensor::Tensor;
use crate::dsp::StftPlan;
use crate::scalar::{gemm, Scalar};

/// Magnitude bound applied to SI-SDR values, in dB.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Cached forward state of a recurrent layer, laid out `[step, seq, hidden]`.
struct GruCache<T> {
    h_prev: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Param(usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Prelu { x: Var, alpha: Var },
    Glu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Film { x: Var, gamma: Var, beta: Var },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Unfold { x: Var, axis: usize, k: usize },
    Concat(Var, Var),
    MeanRows(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Gru { x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool, cache: GruCache<T> },
    Synthesize { x: Var, plan: Arc<StftPlan<T>>, frames: usize },
    NegSiSdr { est: Var, target: Vec<T>, range: (usize, usize), active: bool },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// Reverse-mode tape over dense tensors.
///
/// Every node stores its forward value; `backward` walks the tape once in
/// reverse creation order. Parameter leaves remember their slot in the
/// owning parameter store so gradients can be routed back to it.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Constant input whose gradient is tracked (used to inspect gradients
    /// with respect to data).
    pub fn watched_input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf bound to parameter slot `slot`.
    pub fn param(&mut self, slot: usize, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Param(slot), &[])
    }

    /// Recorded attention probabilities `[heads, T, T]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    // ----- forward ops -------------------------------------------------

    /// `x [.., in] @ w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(wv.rank(), 2, "linear weight must be 2-D");
        let (inp, out) = (wv.shape[0], wv.shape[1]);
        assert_eq!(xv.cols(), inp, "linear: input width {} vs weight {:?}", xv.cols(), wv.shape);
        let rows = xv.rows();
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value.data;
            assert_eq!(bv.len(), out);
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(false, false, rows, inp, out, &xv.data, &wv.data, b.is_some(), &mut y);
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(shape, y), Op::Linear { x, w, b }, &inputs)
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape, bv.shape, "elementwise shape mismatch");
        Tensor::new(av.shape.clone(), av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = &self.nodes[x.0].value;
        Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| v.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| v * sigmoid(v));
        self.push(v, Op::Silu(x), &[x])
    }

    /// Parametric ReLU with a single learned slope.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let a = self.nodes[alpha.0].value.data[0];
        let v = self.map(x, |v| if v > T::zero() { v } else { a * v });
        self.push(v, Op::Prelu { x, alpha }, &[x, alpha])
    }

    /// Gated linear unit over the last axis: `a * sigmoid(b)` for `[a | b]`.
    pub fn glu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        assert!(c % 2 == 0, "glu needs an even last axis");
        let h = c / 2;
        let mut out = Vec::with_capacity(xv.len() / 2);
        for row in xv.data.chunks_exact(c) {
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = h;
        self.push(Tensor::new(shape, out), Op::Glu(x), &[x])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::of(1e-5);
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let c = xv.cols();
        assert_eq!(g.len(), c);
        let inv_c = T::one() / T::of(c as f64);
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, o) in xv.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                o[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = xv.shape.clone();
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, &[x, gamma, beta])
    }

    /// Feature-wise affine modulation `x * (1 + gamma) + beta`, with
    /// `gamma, beta` of the size of the last axis of `x`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let c = xv.cols();
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let mut out = xv.data.clone();
        for row in out.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = row[j] * (T::one() + g[j]) + b[j];
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::new(shape, out), Op::Film { x, gamma, beta }, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(shape.iter().product::<usize>(), xv.len(), "reshape size mismatch");
        let v = Tensor::new(shape, xv.data.clone());
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = permute_data(&xv.data, &xv.shape, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| xv.shape[p]).collect();
        self.push(Tensor::new(shape, out), Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Swap the first two axes of a rank-3 tensor.
    pub fn swap01(&mut self, x: Var) -> Var {
        self.permute(x, &[1, 0, 2])
    }

    /// Zero-padded sliding window along `axis` (0 or 1) of `[S, L, C]`,
    /// producing `[S, L, k * C]` with the `k` neighbours of each position
    /// stacked (odd `k`, centred).
    pub fn unfold(&mut self, x: Var, axis: usize, k: usize) -> Var {
        assert!(k % 2 == 1, "unfold kernel must be odd");
        assert!(axis < 2, "unfold axis must be 0 or 1");
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rank(), 3);
        let (s, l, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let mut out = vec![T::zero(); s * l * k * c];
        for_each_window(s, l, axis, k, |dst_pos, j, src_pos| {
            let dst = dst_pos * k * c + j * c;
            out[dst..dst + c].copy_from_slice(&xv.data[src_pos * c..(src_pos + 1) * c]);
        });
        self.push(Tensor::new(vec![s, l, k * c], out), Op::Unfold { x, axis, k }, &[x])
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.rows(), bv.rows());
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data.chunks_exact(ca).zip(bv.data.chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = ca + cb;
        self.push(Tensor::new(shape, out), Op::Concat(a, b), &[a, b])
    }

    /// Mean over every axis but the last: `[.., C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let rows = xv.rows().max(1);
        let mut out = vec![T::zero(); c];
        for row in xv.data.chunks_exact(c) {
            for j in 0..c {
                out[j] = out[j] + row[j];
            }
        }
        let inv = T::one() / T::of(rows as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        self.push(Tensor::new(vec![c], out), Op::MeanRows(x), &[x])
    }

    /// Multi-head scaled dot-product self-attention over axis 0.
    ///
    /// `q, k` are `[T, G, heads * dq]` and `v` is `[T, G, heads * dv]`. The
    /// query of frame `t` for head `h` is the concatenation over the `G`
    /// groups of that head's `dq` channels, so one attention weight covers a
    /// whole frame. The output has the layout of `v`; the row-stochastic
    /// maps `[heads, T, T]` are kept for inspection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        assert_eq!(qv.rank(), 3);
        assert_eq!(qv.shape, kv.shape, "attention q/k shapes differ");
        assert_eq!(vv.shape[..2], qv.shape[..2], "attention v shape differs");
        assert!(qv.shape[2] % heads == 0 && vv.shape[2] % heads == 0, "channels not divisible by heads");
        let (t, grp) = (qv.shape[0], qv.shape[1]);
        let (dq, dv) = (qv.shape[2] / heads, vv.shape[2] / heads);
        let (wq, wv) = (grp * dq, grp * dv);
        let scale = T::one() / T::of(wq as f64).sqrt();
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); vv.len()];
        let mut oh = vec![T::zero(); t * wv];
        for h in 0..heads {
            let qh = gather_head(&qv.data, t * grp, heads, dq, h);
            let kh = gather_head(&kv.data, t * grp, heads, dq, h);
            let vh = gather_head(&vv.data, t * grp, heads, dv, h);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            T::gemm_strided(t, wq, t, scale, &qh, (wq, 1), &kh, (1, wq), T::zero(), p, (t, 1));
            for row in p.chunks_exact_mut(t) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    sum = sum + *x;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|x| *x = *x * inv);
            }
            gemm(false, false, t, t, wv, p, &vh, false, &mut oh);
            scatter_head(&oh, &mut out, t * grp, heads, dv, h);
        }
        let shape = vv.shape.clone();
        self.push(Tensor::new(shape, out), Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Gated recurrent unit run independently over each row of `x [S, L, C]`
    /// along axis 1. Weights are `w_ih [C, 3H]`, `w_hh [H, 3H]` with gate
    /// order (reset, update, candidate). Output `[S, L, H]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rank(), 3);
        let (s, l, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let wih = &self.nodes[w_ih.0].value;
        let whh = &self.nodes[w_hh.0].value;
        assert_eq!(wih.shape[0], c);
        let h3 = wih.shape[1];
        let h = h3 / 3;
        assert_eq!(whh.shape, vec![h, h3]);
        let bih = &self.nodes[b_ih.0].value.data;
        let bhh = &self.nodes[b_hh.0].value.data;

        // input projections for all positions at once
        let mut xi = vec![T::zero(); s * l * h3];
        for row in xi.chunks_exact_mut(h3) {
            row.copy_from_slice(bih);
        }
        gemm(false, false, s * l, c, h3, &xv.data, &wih.data, true, &mut xi);

        let one = T::one();
        let two = one + one;
        let mut out = vec![T::zero(); s * l * h];
        let mut cache = GruCache {
            h_prev: vec![T::zero(); l * s * h],
            r: vec![T::zero(); l * s * h],
            z: vec![T::zero(); l * s * h],
            n: vec![T::zero(); l * s * h],
            hn: vec![T::zero(); l * s * h],
        };
        let mut hid = vec![T::zero(); s * h];
        let mut hh = vec![T::zero(); s * h3];
        for step in 0..l {
            let pos = if reverse { l - 1 - step } else { step };
            for row in hh.chunks_exact_mut(h3) {
                row.copy_from_slice(bhh);
            }
            gemm(false, false, s, h, h3, &hid, &whh.data, true, &mut hh);
            let span = step * s * h..(step + 1) * s * h;
            cache.h_prev[span.clone()].copy_from_slice(&hid);
            let (r, z, n, hn) =
                (&mut cache.r[span.clone()], &mut cache.z[span.clone()], &mut cache.n[span.clone()], &mut cache.hn[span]);
            // gate pre-activations are negated so one exp pass yields both sigmoids
            for si in 0..s {
                let xrow = &xi[(si * l + pos) * h3..(si * l + pos + 1) * h3];
                let hrow = &hh[si * h3..(si + 1) * h3];
                let o = si * h;
                for j in 0..h {
                    r[o + j] = -(xrow[j] + hrow[j]);
                    z[o + j] = -(xrow[h + j] + hrow[h + j]);
                    hn[o + j] = hrow[2 * h + j];
                }
            }
            T::exp_in_place(r);
            T::exp_in_place(z);
            for i in 0..s * h {
                r[i] = one / (one + r[i]);
                z[i] = one / (one + z[i]);
            }
            for si in 0..s {
                let xrow = &xi[(si * l + pos) * h3..(si * l + pos + 1) * h3];
                for j in 0..h {
                    let i = si * h + j;
                    n[i] = -two * (xrow[2 * h + j] + r[i] * hn[i]);
                }
            }
            T::exp_in_place(n);
            for si in 0..s {
                for j in 0..h {
                    let i = si * h + j;
                    // tanh(a) = 2 sigmoid(2a) - 1
                    let nv = two / (one + n[i]) - one;
                    n[i] = nv;
                    let new = (one - z[i]) * nv + z[i] * hid[i];
                    hid[i] = new;
                    out[(si * l + pos) * h + j] = new;
                }
            }
        }
        self.push(
            Tensor::new(vec![s, l, h], out),
            Op::Gru { x, w_ih, w_hh, b_ih, b_hh, reverse, cache },
            &[x, w_ih, w_hh, b_ih, b_hh],
        )
    }

    /// Inverse STFT of an interleaved `[frames, bins, 2]` spectrogram into
    /// `out_len` samples.
    pub fn synthesize(&mut self, x: Var, plan: Arc<StftPlan<T>>, out_len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rank(), 3);
        let frames = xv.shape[0];
        let y = plan.synthesize(&xv.data, frames, out_len).expect("spectrogram shape checked by caller");
        self.push(Tensor::new(vec![out_len], y), Op::Synthesize { x, plan, frames }, &[x])
    }

    /// Negative SI-SDR (dB) of `est[range]` against `target[range]`,
    /// clamped to `[-60, 60]` dB; the gradient is zero when clamped and
    /// outside `range`.
    pub fn neg_si_sdr(&mut self, est: Var, target: &[T], range: (usize, usize)) -> Var {
        let ev = &self.nodes[est.0].value.data;
        assert_eq!(ev.len(), target.len());
        let (a, b) = range;
        let raw = si_sdr_raw(&ev[a..b], &target[a..b]);
        let limit = SI_SDR_CLAMP_DB;
        let active = raw.is_finite() && raw > -limit && raw < limit;
        let clamped = if raw.is_nan() { -limit } else { raw.clamp(-limit, limit) };
        self.push(
            Tensor::scalar(T::of(-clamped)),
            Op::NegSiSdr { est, target: target.to_vec(), range, active },
            &[est],
        )
    }

    // ----- backward ----------------------------------------------------

    /// Reverse sweep from scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Grads { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let xv = val(*x);
                let wv = val(*w);
                let (inp, out) = (wv.shape[0], wv.shape[1]);
                let rows = xv.rows();
                if self.needs(*x) {
                    let g = slot(grads, *x, xv.len());
                    gemm(false, true, rows, out, inp, gy, &wv.data, true, g);
                }
                if self.needs(*w) {
                    let g = slot(grads, *w, wv.len());
                    gemm(true, false, inp, rows, out, &xv.data, gy, true, g);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let g = slot(grads, *b, out);
                        for row in gy.chunks_exact(out) {
                            for j in 0..out {
                                g[j] = g[j] + row[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let g = slot(grads, v, gy.len());
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = &val(*b).data;
                    let g = slot(grads, *a, gy.len());
                    for i in 0..gy.len() {
                        g[i] = g[i] + gy[i] * other[i];
                    }
                }
                if self.needs(*b) {
                    let other = &val(*a).data;
                    let g = slot(grads, *b, gy.len());
                    for i in 0..gy.len() {
                        g[i] = g[i] + gy[i] * other[i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                let g = slot(grads, *x, gy.len());
                for i in 0..gy.len() {
                    g[i] = g[i] + gy[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                let g = slot(grads, *x, gy.len());
                for i in 0..gy.len() {
                    g[i] = g[i] + gy[i] * (T::one() - y[i] * y[i]);
                }
            }
            Op::Silu(x) => {
                let xv = &val(*x).data;
                let g = slot(grads, *x, gy.len());
                for i in 0..gy.len() {
                    g[i] = g[i] + gy[i] * silu_grad(xv[i]);
                }
            }
            Op::Prelu { x, alpha } => {
                let xv = &val(*x).data;
                let a = val(*alpha).data[0];
                if self.needs(*x) {
                    let g = slot(grads, *x, gy.len());
                    for i in 0..gy.len() {
                        g[i] = g[i] + if xv[i] > T::zero() { gy[i] } else { a * gy[i] };
                    }
                }
                if self.needs(*alpha) {
                    let mut acc = T::zero();
                    for i in 0..gy.len() {
                        if xv[i] <= T::zero() {
                            acc = acc + gy[i] * xv[i];
                        }
                    }
                    let g = slot(grads, *alpha, 1);
                    g[0] = g[0] + acc;
                }
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let c = xv.cols();
                let h = c / 2;
                let g = slot(grads, *x, xv.len());
                for ((row, grow), dy) in xv.data.chunks_exact(c).zip(g.chunks_exact_mut(c)).zip(gy.chunks_exact(h)) {
                    for j in 0..h {
                        let s = sigmoid(row[h + j]);
                        grow[j] = grow[j] + dy[j] * s;
                        grow[h + j] = grow[h + j] + dy[j] * row[j] * s * (T::one() - s);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = val(*x);
                let gam = &val(*gamma).data;
                let c = xv.cols();
                let inv_c = T::one() / T::of(c as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let need_x = self.needs(*x);
                let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for (r, (row, dy)) in xv.data.chunks_exact(c).zip(gy.chunks_exact(c)).enumerate() {
                    let (m, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        xhat[j] = (row[j] - m) * rs;
                        dxhat[j] = dy[j] * gam[j];
                        dgamma[j] = dgamma[j] + dy[j] * xhat[j];
                        dbeta[j] = dbeta[j] + dy[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xhat[j];
                    }
                    if need_x {
                        let out = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] = rs * (dxhat[j] - s1 * inv_c - xhat[j] * s2 * inv_c);
                        }
                    }
                }
                if need_x {
                    add_into(slot(grads, *x, xv.len()), &dx);
                }
                if self.needs(*gamma) {
                    add_into(slot(grads, *gamma, c), &dgamma);
                }
                if self.needs(*beta) {
                    add_into(slot(grads, *beta, c), &dbeta);
                }
            }
            Op::Film { x, gamma, beta } => {
                let xv = val(*x);
                let gam = &val(*gamma).data;
                let c = xv.cols();
                if self.needs(*x) {
                    let g = slot(grads, *x, xv.len());
                    for (grow, dy) in g.chunks_exact_mut(c).zip(gy.chunks_exact(c)) {
                        for j in 0..c {
                            grow[j] = grow[j] + dy[j] * (T::one() + gam[j]);
                        }
                    }
                }
                if self.needs(*gamma) {
                    let mut acc = vec![T::zero(); c];
                    for (row, dy) in xv.data.chunks_exact(c).zip(gy.chunks_exact(c)) {
                        for j in 0..c {
                            acc[j] = acc[j] + dy[j] * row[j];
                        }
                    }
                    add_into(slot(grads, *gamma, c), &acc);
                }
                if self.needs(*beta) {
                    let mut acc = vec![T::zero(); c];
                    for dy in gy.chunks_exact(c) {
                        for j in 0..c {
                            acc[j] = acc[j] + dy[j];
                        }
                    }
                    add_into(slot(grads, *beta, c), &acc);
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, gy.len()), gy),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(gy, &node.value.shape, &inv);
                add_into(slot(grads, *x, gy.len()), &back);
            }
            Op::Unfold { x, axis, k } => {
                let xv = val(*x);
                let (s, l, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let g = slot(grads, *x, xv.len());
                for_each_window(s, l, *axis, *k, |dst_pos, j, src_pos| {
                    let src = dst_pos * k * c + j * c;
                    add_into(&mut g[src_pos * c..(src_pos + 1) * c], &gy[src..src + c]);
                });
            }
            Op::Concat(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                if self.needs(*a) {
                    let g = slot(grads, *a, val(*a).len());
                    for (grow, dy) in g.chunks_exact_mut(ca).zip(gy.chunks_exact(ca + cb)) {
                        add_into(grow, &dy[..ca]);
                    }
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, val(*b).len());
                    for (grow, dy) in g.chunks_exact_mut(cb).zip(gy.chunks_exact(ca + cb)) {
                        add_into(grow, &dy[ca..]);
                    }
                }
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let c = xv.cols();
                let inv = T::one() / T::of(xv.rows().max(1) as f64);
                let g = slot(grads, *x, xv.len());
                for grow in g.chunks_exact_mut(c) {
                    for j in 0..c {
                        grow[j] = grow[j] + gy[j] * inv;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gy, grads);
            }
            Op::Gru { x, w_ih, w_hh, b_ih, b_hh, reverse, cache } => {
                self.gru_backward(*x, *w_ih, *w_hh, *b_ih, *b_hh, *reverse, cache, gy, grads);
            }
            Op::Synthesize { x, plan, frames } => {
                let back = plan.synthesize_adjoint(gy, *frames);
                add_into(slot(grads, *x, back.len()), &back);
            }
            Op::NegSiSdr { est, target, range, active } => {
                let ev = &val(*est).data;
                let g = slot(grads, *est, ev.len());
                if *active {
                    let (a, b) = *range;
                    let d = si_sdr_grad(&ev[a..b], &target[a..b]);
                    for (i, di) in d.into_iter().enumerate() {
                        g[a + i] = g[a + i] - gy[0] * di;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let (t, grp) = (qv.shape[0], qv.shape[1]);
        let (dq, dv) = (qv.shape[2] / heads, vv.shape[2] / heads);
        let (wq, wv) = (grp * dq, grp * dv);
        let rows = t * grp;
        let scale = T::one() / T::of(wq as f64).sqrt();
        let mut dq_buf = vec![T::zero(); qv.len()];
        let mut dk_buf = vec![T::zero(); kv.len()];
        let mut dv_buf = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); t * t];
        let mut dqh = vec![T::zero(); t * wq];
        let mut dkh = vec![T::zero(); t * wq];
        let mut dvh = vec![T::zero(); t * wv];
        for h in 0..heads {
            let p = &probs[h * t * t..(h + 1) * t * t];
            let qh = gather_head(&qv.data, rows, heads, dq, h);
            let kh = gather_head(&kv.data, rows, heads, dq, h);
            let vh = gather_head(&vv.data, rows, heads, dv, h);
            let doh = gather_head(gy, rows, heads, dv, h);
            // dV = P^T dO
            gemm(true, false, t, t, wv, p, &doh, false, &mut dvh);
            // dP = dO V^T
            gemm(false, true, t, wv, t, &doh, &vh, false, &mut dp);
            for (prow, drow) in p.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..t {
                    drow[j] = prow[j] * (drow[j] - dot);
                }
            }
            // dQ = scale * dS K ; dK = scale * dS^T Q
            T::gemm_strided(t, t, wq, scale, &dp, (t, 1), &kh, (wq, 1), T::zero(), &mut dqh, (wq, 1));
            T::gemm_strided(t, t, wq, scale, &dp, (1, t), &qh, (wq, 1), T::zero(), &mut dkh, (wq, 1));
            scatter_head(&dqh, &mut dq_buf, rows, heads, dq, h);
            scatter_head(&dkh, &mut dk_buf, rows, heads, dq, h);
            scatter_head(&dvh, &mut dv_buf, rows, heads, dv, h);
        }
        if self.needs(q) {
            add_into(slot(grads, q, dq_buf.len()), &dq_buf);
        }
        if self.needs(k) {
            add_into(slot(grads, k, dk_buf.len()), &dk_buf);
        }
        if self.needs(v) {
            add_into(slot(grads, v, dv_buf.len()), &dv_buf);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        reverse: bool,
        cache: &GruCache<T>,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xv = &self.nodes[x.0].value;
        let (s, l, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let wih = &self.nodes[w_ih.0].value;
        let whh = &self.nodes[w_hh.0].value;
        let h3 = wih.shape[1];
        let h = h3 / 3;
        let one = T::one();

        let mut dxi = vec![T::zero(); s * l * h3];
        let mut dwhh = vec![T::zero(); h * h3];
        let mut dbhh = vec![T::zero(); h3];
        let mut dh_next = vec![T::zero(); s * h];
        let mut dhh = vec![T::zero(); s * h3];
        for step in (0..l).rev() {
            let pos = if reverse { l - 1 - step } else { step };
            let base = step * s * h;
            let mut dh = dh_next.clone();
            for si in 0..s {
                for j in 0..h {
                    dh[si * h + j] = dh[si * h + j] + gy[(si * l + pos) * h + j];
                }
            }
            for si in 0..s {
                let dxrow = &mut dxi[(si * l + pos) * h3..(si * l + pos + 1) * h3];
                let dhrow = &mut dhh[si * h3..(si + 1) * h3];
                for j in 0..h {
                    let idx = si * h + j;
                    let (r, z, n, hn) = (cache.r[base + idx], cache.z[base + idx], cache.n[base + idx], cache.hn[base + idx]);
                    let prev = cache.h_prev[base + idx];
                    let d = dh[idx];
                    let dn_pre = d * (one - z) * (one - n * n);
                    let dz_pre = d * (prev - n) * z * (one - z);
                    let dr_pre = dn_pre * hn * r * (one - r);
                    dxrow[j] = dr_pre;
                    dxrow[h + j] = dz_pre;
                    dxrow[2 * h + j] = dn_pre;
                    dhrow[j] = dr_pre;
                    dhrow[h + j] = dz_pre;
                    dhrow[2 * h + j] = dn_pre * r;
                    dh_next[idx] = d * z;
                }
            }
            let hp = &cache.h_prev[base..base + s * h];
            gemm(true, false, h, s, h3, hp, &dhh, true, &mut dwhh);
            for row in dhh.chunks_exact(h3) {
                add_into(&mut dbhh, row);
            }
            gemm(false, true, s, h3, h, &dhh, &whh.data, true, &mut dh_next);
        }
        if self.needs(x) {
            let g = slot(grads, x, xv.len());
            gemm(false, true, s * l, h3, c, &dxi, &wih.data, true, g);
        }
        if self.needs(w_ih) {
            let g = slot(grads, w_ih, wih.len());
            gemm(true, false, c, s * l, h3, &xv.data, &dxi, true, g);
        }
        if self.needs(b_ih) {
            let g = slot(grads, b_ih, h3);
            for row in dxi.chunks_exact(h3) {
                add_into(g, row);
            }
        }
        if self.needs(w_hh) {
            add_into(slot(grads, w_hh, whh.len()), &dwhh);
        }
        if self.needs(b_hh) {
            add_into(slot(grads, b_hh, h3), &dbhh);
        }
    }

    /// Gradients of every parameter leaf as `(slot, gradient)` pairs, summed
    /// over repeated uses of the same slot.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(usize, Vec<T>)> {
        let mut out: Vec<(usize, Vec<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(slot) = node.op {
                let g = grads.grads[i].clone().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                match out.iter_mut().find(|(s, _)| *s == slot) {
                    Some((_, acc)) => add_into(acc, &g),
                    None => out.push((slot, g)),
                }
            }
        }
        out
    }
}

/// Visit every in-bounds `(output position, window offset, source position)`
/// of a centred window along `axis` of an `s x l` grid (flat row-major
/// positions).
fn for_each_window(s: usize, l: usize, axis: usize, k: usize, mut f: impl FnMut(usize, usize, usize)) {
    let half = k / 2;
    let (len, stride) = if axis == 0 { (s, l) } else { (l, 1) };
    for si in 0..s {
        for li in 0..l {
            let at = if axis == 0 { si } else { li };
            let pos = si * l + li;
            for j in 0..k {
                let src = at + j;
                if src < half || src - half >= len {
                    continue;
                }
                f(pos, j, pos + (src - half) * stride - at * stride);
            }
        }
    }
}

/// Channels `[h * w, (h + 1) * w)` of every row of a `[rows, heads * w]`
/// buffer, packed contiguously.
fn gather_head<T: Scalar>(data: &[T], rows: usize, heads: usize, w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        let at = (r * heads + h) * w;
        out.extend_from_slice(&data[at..at + w]);
    }
    out
}

/// Inverse of [`gather_head`]: write `src` back into head `h` of `dst`.
fn scatter_head<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, heads: usize, w: usize, h: usize) {
    for r in 0..rows {
        let at = (r * heads + h) * w;
        dst[at..at + w].copy_from_slice(&src[r * w..(r + 1) * w]);
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    assert_eq!(perm.len(), rank);
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // innermost output axis is copied in a tight loop
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Unclamped SI-SDR in dB computed in the working precision.
pub(crate) fn si_sdr_raw<T: Scalar>(est: &[T], reference: &[T]) -> f64 {
    let (mut p, mut r, mut e) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in est.iter().zip(reference) {
        let (x, y) = (x.as_f64(), y.as_f64());
        p += x * y;
        r += y * y;
        e += x * x;
    }
    let target = p * p / r;
    let noise = (e - target).max(0.0);
    10.0 * (target / noise).log10()
}

/// Gradient of SI-SDR (dB) with respect to the estimate.
fn si_sdr_grad<T: Scalar>(est: &[T], reference: &[T]) -> Vec<T> {
    let (mut p, mut r, mut e) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in est.iter().zip(reference) {
        let (x, y) = (x.as_f64(), y.as_f64());
        p += x * y;
        r += y * y;
        e += x * x;
    }
    let noise = e - p * p / r;
    let k = 10.0 / std::f64::consts::LN_10;
    est.iter()
        .zip(reference)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            T::of(k * (2.0 * y / p - (2.0 * x - 2.0 * p * y / r) / noise))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let p = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 4.0);
        let back = permute_data(&p, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(back, data);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::new(vec![5, 3, 4], (0..60).map(|i| (i as f64 * 0.3).sin()).collect()));
        let k = g.input(Tensor::new(vec![5, 3, 4], (0..60).map(|i| (i as f64 * 0.7).cos()).collect()));
        let v = g.input(Tensor::new(vec![5, 3, 2], (0..30).map(|i| i as f64).collect()));
        let o = g.attention(q, k, v, 2);
        assert_eq!(g.shape(o), &[5, 3, 2]);
        let (p, heads) = g.attention_probs(o).unwrap();
        assert_eq!(heads, 2);
        for row in p.chunks_exact(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}
