//! Differentiable operations. Every op computes its forward value eagerly and
//! records a closure mapping the output gradient to its inputs' gradients.

use std::rc::Rc;

use rand::Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::gemm::{gemm, MatRef};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Padding rule for [`Graph::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output length `(L - K) / stride + 1`.
    Valid,
    /// Zero padding so the output has `ceil(L / stride)` positions. When the
    /// total padding is odd the extra zero goes on the right.
    Same,
}

impl Padding {
    /// `(left, right, output_length)` for a given input length, kernel and stride.
    pub fn resolve(self, len: usize, kernel: usize, stride: usize) -> Result<(usize, usize, usize)> {
        if stride == 0 || kernel == 0 {
            return arg_err("kernel size and stride must be positive");
        }
        match self {
            Padding::Valid => {
                if kernel > len {
                    return shape_err(format!("kernel {kernel} longer than input {len}"));
                }
                Ok((0, 0, (len - kernel) / stride + 1))
            }
            Padding::Same => {
                let out = len.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(len);
                Ok((total / 2, total - total / 2, out))
            }
        }
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the one folded into running estimates.
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    Train,
    Eval { running_mean: &'a [f64], running_var: &'a [f64] },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push("add", out, vec![a, b], Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, vec![a], Box::new(move |g, _| vec![Some(g.map(|v| v * factor))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value_rc(a);
        let out = x.map(|v| v.max(0.0));
        self.push(
            "relu",
            out,
            vec![a],
            Box::new(move |g, _| {
                let data = g.data().iter().zip(x.data()).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
            }),
        )
    }

    /// Cross-correlation of `(N, C_in, L)` input with `(C_out, C_in, K)` weights.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let [n, c_in, len] = self.value(x).dims3()?;
        let [c_out, wc, k] = self.value(w).dims3()?;
        if wc != c_in {
            return shape_err(format!("conv1d: input has {c_in} channels, weight expects {wc}"));
        }
        if self.value(b).shape() != [c_out] {
            return shape_err(format!("conv1d: bias shape {:?}, expected [{c_out}]", self.value(b).shape()));
        }
        let (left, _, out_len) = padding.resolve(len, k, stride)?;
        let ck = c_in * k;

        // im2col, laid out (N, C_in*K, L_out)
        let xv = self.value(x).data();
        let mut col = vec![0.0; n * ck * out_len];
        for s in 0..n {
            for c in 0..c_in {
                let src = &xv[(s * c_in + c) * len..(s * c_in + c + 1) * len];
                for kk in 0..k {
                    let row = &mut col[(s * ck + c * k + kk) * out_len..(s * ck + c * k + kk + 1) * out_len];
                    for (t, dst) in row.iter_mut().enumerate() {
                        let pos = (t * stride + kk) as isize - left as isize;
                        if pos >= 0 && (pos as usize) < len {
                            *dst = src[pos as usize];
                        }
                    }
                }
            }
        }

        let wt = self.value_rc(w);
        let bias = self.value(b).data();
        let mut out = vec![0.0; n * c_out * out_len];
        for s in 0..n {
            let o = &mut out[s * c_out * out_len..(s + 1) * c_out * out_len];
            for (oc, row) in o.chunks_mut(out_len).enumerate() {
                row.fill(bias[oc]);
            }
            gemm(
                c_out,
                ck,
                out_len,
                1.0,
                MatRef::new(wt.data(), ck),
                MatRef::new(&col[s * ck * out_len..(s + 1) * ck * out_len], out_len),
                1.0,
                o,
            );
        }
        let out = Tensor::new(&[n, c_out, out_len], out)?;
        let col = Rc::new(col);
        Ok(self.push(
            "conv1d",
            out,
            vec![x, w, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let per = c_out * out_len;
                let dx = needs[0].then(|| {
                    let mut dcol = vec![0.0; ck * out_len];
                    let mut dx = vec![0.0; n * c_in * len];
                    for s in 0..n {
                        gemm(
                            ck,
                            c_out,
                            out_len,
                            1.0,
                            MatRef::new(wt.data(), ck).t(),
                            MatRef::new(&gd[s * per..(s + 1) * per], out_len),
                            0.0,
                            &mut dcol,
                        );
                        for c in 0..c_in {
                            let dst = &mut dx[(s * c_in + c) * len..(s * c_in + c + 1) * len];
                            for kk in 0..k {
                                let row = &dcol[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
                                for (t, &v) in row.iter().enumerate() {
                                    let pos = (t * stride + kk) as isize - left as isize;
                                    if pos >= 0 && (pos as usize) < len {
                                        dst[pos as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                    Tensor::new(&[n, c_in, len], dx).expect("shape")
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; c_out * ck];
                    for s in 0..n {
                        gemm(
                            c_out,
                            out_len,
                            ck,
                            1.0,
                            MatRef::new(&gd[s * per..(s + 1) * per], out_len),
                            MatRef::new(&col[s * ck * out_len..(s + 1) * ck * out_len], out_len).t(),
                            1.0,
                            &mut dw,
                        );
                    }
                    Tensor::new(&[c_out, c_in, k], dw).expect("shape")
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; c_out];
                    for s in 0..n {
                        for (oc, row) in gd[s * per..(s + 1) * per].chunks(out_len).enumerate() {
                            db[oc] += row.iter().sum::<f64>();
                        }
                    }
                    Tensor::new(&[c_out], db).expect("shape")
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// Batch normalization over the `(N, L)` axes of an `(N, C, L)` input.
    /// Training mode also returns the batch statistics so the caller can
    /// update its running estimates.
    pub fn batch_norm1d(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode, eps: f64) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, len] = self.value(x).dims3()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("batch_norm1d: affine parameters must have shape [{c}]"));
        }
        let m = n * len;
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return arg_err("batch_norm1d in training mode needs a batch of at least 2");
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = || (0..n).flat_map(move |s| xv[(s * c + ch) * len..(s * c + ch + 1) * len].iter());
                    let mu = vals().sum::<f64>() / m as f64;
                    mean[ch] = mu;
                    var[ch] = vals().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                }
                let unbiased_var = var.iter().map(|v| v * m as f64 / (m as f64 - 1.0)).collect();
                let stats = BatchStats { mean: mean.clone(), unbiased_var };
                (mean, var, Some(stats))
            }
            NormMode::Eval { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return shape_err("batch_norm1d: running statistics do not match channel count");
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * len;
                for t in 0..len {
                    let h = (xv[off + t] - mean[ch]) * inv_std[ch];
                    xhat[off + t] = h;
                    out[off + t] = gv[ch] * h + bv[ch];
                }
            }
        }
        let train = matches!(mode, NormMode::Train);
        let gamma_v = self.value_rc(gamma);
        let out = Tensor::new(&[n, c, len], out)?;
        let var = self.push(
            "batch_norm1d",
            out,
            vec![x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gam = gamma_v.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * len;
                        for t in 0..len {
                            sum_g[ch] += gd[off + t];
                            sum_gx[ch] += gd[off + t] * xhat[off + t];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * len;
                            let scale = gam[ch] * inv_std[ch];
                            for t in 0..len {
                                dx[off + t] = if train {
                                    scale * (gd[off + t] - sum_g[ch] / m as f64 - xhat[off + t] * sum_gx[ch] / m as f64)
                                } else {
                                    scale * gd[off + t]
                                };
                            }
                        }
                    }
                    Tensor::new(&[n, c, len], dx).expect("shape")
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::new(&[c], sum_gx.clone()).expect("shape")),
                    needs[2].then(|| Tensor::new(&[c], sum_g.clone()).expect("shape")),
                ]
            }),
        );
        Ok((var, stats))
    }

    /// Max pooling over windows of an `(N, C, L)` input; padded positions never win.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, len] = self.value(x).dims3()?;
        if kernel == 0 || stride == 0 {
            return arg_err("max_pool1d: kernel and stride must be positive");
        }
        if padding * 2 > kernel {
            return arg_err("max_pool1d: padding may be at most half the kernel");
        }
        if len + 2 * padding < kernel {
            return shape_err(format!("max_pool1d: kernel {kernel} longer than padded input {}", len + 2 * padding));
        }
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * out_len];
        let mut arg = vec![0usize; n * c * out_len];
        for row in 0..n * c {
            let src = &xv[row * len..(row + 1) * len];
            for t in 0..out_len {
                let start = (t * stride) as isize - padding as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + kernel as isize) as usize).min(len);
                let mut best = lo;
                for i in lo + 1..hi {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out[row * out_len + t] = src[best];
                arg[row * out_len + t] = row * len + best;
            }
        }
        let out = Tensor::new(&[n, c, out_len], out)?;
        Ok(self.push(
            "max_pool1d",
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n * c * len];
                for (&idx, &gv) in arg.iter().zip(g.data()) {
                    dx[idx] += gv;
                }
                vec![Some(Tensor::new(&[n, c, len], dx).expect("shape"))]
            }),
        ))
    }

    /// Mean over the time axis: `(N, C, L) -> (N, C)`.
    pub fn global_avg_pool1d(&mut self, x: Var) -> Result<Var> {
        let [n, c, len] = self.value(x).dims3()?;
        let out: Vec<f64> = self.value(x).data().chunks(len).map(|r| r.iter().sum::<f64>() / len as f64).collect();
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            "global_avg_pool1d",
            out,
            vec![x],
            Box::new(move |g, _| {
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / len as f64, len)).collect();
                vec![Some(Tensor::new(&[n, c, len], data).expect("shape"))]
            }),
        ))
    }

    /// Affine map `x W^T + b` for `(N, I)` input and `(O, I)` weights.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, i] = self.value(x).dims2()?;
        let [o, wi] = self.value(w).dims2()?;
        if wi != i {
            return shape_err(format!("dense: input width {i}, weight expects {wi}"));
        }
        if self.value(b).shape() != [o] {
            return shape_err(format!("dense: bias shape {:?}, expected [{o}]", self.value(b).shape()));
        }
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        gemm(n, i, o, 1.0, MatRef::new(xv.data(), i), MatRef::new(wv.data(), i).t(), 1.0, &mut out);
        let out = Tensor::new(&[n, o], out)?;
        Ok(self.push(
            "dense",
            out,
            vec![x, w, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, 1.0, MatRef::new(gd, o), MatRef::new(wv.data(), i), 0.0, &mut dx);
                    Tensor::new(&[n, i], dx).expect("shape")
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, 1.0, MatRef::new(gd, o).t(), MatRef::new(xv.data(), i), 0.0, &mut dw);
                    Tensor::new(&[o, i], dw).expect("shape")
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; o];
                    for row in gd.chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::new(&[o], db).expect("shape")
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// Inverted dropout. In eval mode this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return arg_err(format!("dropout probability {p} outside [0, 1)"));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel()).map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 }).collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            "dropout",
            out,
            vec![x],
            Box::new(move |g, _| {
                let data = g.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                vec![Some(Tensor::new(g.shape(), data).expect("shape"))]
            }),
        ))
    }

    /// Row-wise softmax of an `(N, K)` input.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [n, k] = self.value(x).dims2()?;
        let out = Rc::new(Tensor::new(&[n, k], softmax_rows(self.value(x).data(), k))?);
        let saved = Rc::clone(&out);
        Ok(self.push(
            "softmax",
            (*out).clone(),
            vec![x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n * k];
                for ((dr, yr), gr) in dx.chunks_mut(k).zip(saved.data().chunks(k)).zip(g.data().chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                vec![Some(Tensor::new(&[n, k], dx).expect("shape"))]
            }),
        ))
    }

    /// Concatenate `(N, d_i)` inputs along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return arg_err("concat of zero tensors");
        }
        let mut widths = Vec::with_capacity(parts.len());
        let n = self.value(parts[0]).dims2()?[0];
        for &p in parts {
            let [pn, w] = self.value(p).dims2()?;
            if pn != n {
                return shape_err(format!("concat: batch sizes {n} and {pn} differ"));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::new(&[n, total], out)?;
        Ok(self.push(
            "concat",
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let data = g.data().chunks(total).flat_map(|r| r[start..start + w].iter().copied()).collect();
                            Tensor::new(&[n, w], data).expect("shape")
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Swap the last two axes: `(N, A, B) -> (N, B, A)`.
    pub fn dimension_shuffle(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last()?;
        Ok(self.push("dimension_shuffle", out, vec![x], Box::new(|g, _| vec![Some(g.transpose_last().expect("rank 3"))])))
    }

    /// Single-layer LSTM over `(N, T, D)` input returning the final hidden
    /// state `(N, H)`. Gate rows of the weights are ordered input, forget,
    /// cell candidate, output; `w_ih` is `(4H, D)`, `w_hh` is `(4H, H)`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let [n, steps, d] = self.value(x).dims3()?;
        if steps == 0 {
            return arg_err("lstm needs at least one time step");
        }
        let [g4, wd] = self.value(w_ih).dims2()?;
        if g4 % 4 != 0 || wd != d {
            return shape_err(format!("lstm: input weight shape {:?} incompatible with input width {d}", [g4, wd]));
        }
        let h = g4 / 4;
        if self.value(w_hh).shape() != [g4, h] || self.value(b).shape() != [g4] {
            return shape_err("lstm: recurrent weight must be (4H, H) and bias (4H)");
        }
        let xv = self.value_rc(x);
        let wih = self.value_rc(w_ih);
        let whh = self.value_rc(w_hh);
        let bias = self.value(b).data();

        // Input projections for every step at once: rows ordered (sample, step).
        let mut zx = vec![0.0; n * steps * g4];
        gemm(n * steps, d, g4, 1.0, MatRef::new(xv.data(), d), MatRef::new(wih.data(), d).t(), 0.0, &mut zx);

        // gates[t] holds activated (i, f, g, o) per sample; cells[t] the cell state after step t.
        let mut gates = vec![0.0; steps * n * g4];
        let mut cells = vec![0.0; (steps + 1) * n * h];
        let mut hiddens = vec![0.0; (steps + 1) * n * h];
        let mut z = vec![0.0; n * g4];
        for t in 0..steps {
            for s in 0..n {
                let src = &zx[(s * steps + t) * g4..(s * steps + t + 1) * g4];
                for ((dst, a), bb) in z[s * g4..(s + 1) * g4].iter_mut().zip(src).zip(bias) {
                    *dst = a + bb;
                }
            }
            let (h_prev, _) = hiddens[t * n * h..].split_at(n * h);
            gemm(n, h, g4, 1.0, MatRef::new(h_prev, h), MatRef::new(whh.data(), h).t(), 1.0, &mut z);
            for s in 0..n {
                let zr = &z[s * g4..(s + 1) * g4];
                let gr = &mut gates[(t * n + s) * g4..(t * n + s + 1) * g4];
                for j in 0..h {
                    let i_g = sigmoid(zr[j]);
                    let f_g = sigmoid(zr[h + j]);
                    let c_g = zr[2 * h + j].tanh();
                    let o_g = sigmoid(zr[3 * h + j]);
                    gr[j] = i_g;
                    gr[h + j] = f_g;
                    gr[2 * h + j] = c_g;
                    gr[3 * h + j] = o_g;
                    let c_prev = cells[(t * n + s) * h + j];
                    let c_new = f_g * c_prev + i_g * c_g;
                    cells[((t + 1) * n + s) * h + j] = c_new;
                    hiddens[((t + 1) * n + s) * h + j] = o_g * c_new.tanh();
                }
            }
        }
        let out = Tensor::new(&[n, h], hiddens[steps * n * h..].to_vec())?;
        Ok(self.push(
            "lstm",
            out,
            vec![x, w_ih, w_hh, b],
            Box::new(move |g, needs| {
                let mut dh = g.data().to_vec();
                let mut dc = vec![0.0; n * h];
                // dz for every (sample, step) row, matching the zx layout.
                let mut dz_all = vec![0.0; n * steps * g4];
                let mut dz = vec![0.0; n * g4];
                let mut dw_hh = vec![0.0; g4 * h];
                for t in (0..steps).rev() {
                    for s in 0..n {
                        let gr = &gates[(t * n + s) * g4..(t * n + s + 1) * g4];
                        for j in 0..h {
                            let (i_g, f_g, c_g, o_g) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                            let c_t = cells[((t + 1) * n + s) * h + j];
                            let c_prev = cells[(t * n + s) * h + j];
                            let tc = c_t.tanh();
                            let dh_v = dh[s * h + j];
                            let d_o = dh_v * tc;
                            let dc_v = dc[s * h + j] + dh_v * o_g * (1.0 - tc * tc);
                            let zr = &mut dz[s * g4..(s + 1) * g4];
                            zr[j] = dc_v * c_g * i_g * (1.0 - i_g);
                            zr[h + j] = dc_v * c_prev * f_g * (1.0 - f_g);
                            zr[2 * h + j] = dc_v * i_g * (1.0 - c_g * c_g);
                            zr[3 * h + j] = d_o * o_g * (1.0 - o_g);
                            dc[s * h + j] = dc_v * f_g;
                        }
                        dz_all[(s * steps + t) * g4..(s * steps + t + 1) * g4].copy_from_slice(&dz[s * g4..(s + 1) * g4]);
                    }
                    let h_prev = &hiddens[t * n * h..(t + 1) * n * h];
                    gemm(g4, n, h, 1.0, MatRef::new(&dz, g4).t(), MatRef::new(h_prev, h), 1.0, &mut dw_hh);
                    gemm(n, g4, h, 1.0, MatRef::new(&dz, g4), MatRef::new(whh.data(), h), 0.0, &mut dh);
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * steps * d];
                    gemm(n * steps, g4, d, 1.0, MatRef::new(&dz_all, g4), MatRef::new(wih.data(), d), 0.0, &mut dx);
                    Tensor::new(&[n, steps, d], dx).expect("shape")
                });
                let dw_ih = needs[1].then(|| {
                    let mut dw = vec![0.0; g4 * d];
                    gemm(g4, n * steps, d, 1.0, MatRef::new(&dz_all, g4).t(), MatRef::new(xv.data(), d), 0.0, &mut dw);
                    Tensor::new(&[g4, d], dw).expect("shape")
                });
                let db = needs[3].then(|| {
                    let mut db = vec![0.0; g4];
                    for row in dz_all.chunks(g4) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(&[g4], db).expect("shape")
                });
                vec![dx, dw_ih, needs[2].then(|| Tensor::new(&[g4, h], dw_hh).expect("shape")), db]
            }),
        ))
    }

    /// `sum(x * weights)` against a constant weight tensor; reduces any
    /// output to a scalar for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        same_shape(self.value(x), weights, "weighted_sum")?;
        let total = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let w = weights.clone();
        Ok(self.push("weighted_sum", Tensor::scalar(total), vec![x], Box::new(move |g, _| vec![Some(w.map(|v| v * g.item()))])))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `(N, K)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if labels.len() != n {
            return shape_err(format!("cross_entropy: {} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return arg_err(format!("cross_entropy: label {bad} out of range for {k} classes"));
        }
        let lv = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &y) in lv.chunks(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let probs = softmax_rows(lv, k);
        let labels = labels.to_vec();
        Ok(self.push(
            "cross_entropy",
            Tensor::scalar(loss / n as f64),
            vec![logits],
            Box::new(move |g, _| {
                let scale = g.item() / n as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(k).zip(&labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(Tensor::new(&[n, k], d).expect("shape"))]
            }),
        ))
    }

    /// Batch-hard triplet margin loss on `(N, E)` embeddings with Euclidean
    /// distance. Anchors without a positive in the batch are skipped.
    pub fn triplet_margin_loss(&mut self, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let [n, e] = self.value(emb).dims2()?;
        if labels.len() != n {
            return shape_err(format!("triplet_margin_loss: {} labels for {n} rows", labels.len()));
        }
        let ev = self.value_rc(emb);
        let x = ev.data();
        let dist = |a: usize, b: usize| -> f64 {
            x[a * e..(a + 1) * e].iter().zip(&x[b * e..(b + 1) * e]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        };
        // (anchor, hardest positive, hardest negative, hinge value)
        let mut triplets = Vec::new();
        for a in 0..n {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let dj = dist(a, j);
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, d)| dj > d) {
                        pos = Some((j, dj));
                    }
                } else if neg.is_none_or(|(_, d)| dj < d) {
                    neg = Some((j, dj));
                }
            }
            match (pos, neg) {
                (Some((p, dp)), Some((q, dn))) => triplets.push((a, p, q, dp - dn + margin)),
                (_, None) => return arg_err("triplet_margin_loss needs at least two classes in the batch"),
                _ => {}
            }
        }
        if triplets.is_empty() {
            return arg_err("triplet_margin_loss needs a class with at least two samples in the batch");
        }
        let count = triplets.len() as f64;
        let loss = triplets.iter().map(|t| t.3.max(0.0)).sum::<f64>() / count;
        Ok(self.push(
            "triplet_margin_loss",
            Tensor::scalar(loss),
            vec![emb],
            Box::new(move |g, _| {
                let x = ev.data();
                let scale = g.item() / count;
                let mut d = vec![0.0; n * e];
                let pull = |from: usize, to: usize, sign: f64, d: &mut [f64]| {
                    let diff: Vec<f64> = (0..e).map(|k| x[from * e + k] - x[to * e + k]).collect();
                    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return;
                    }
                    for k in 0..e {
                        let v = sign * scale * diff[k] / norm;
                        d[from * e + k] += v;
                        d[to * e + k] -= v;
                    }
                };
                for &(a, p, q, hinge) in &triplets {
                    if hinge > 0.0 {
                        pull(a, p, 1.0, &mut d);
                        pull(a, q, -1.0, &mut d);
                    }
                }
                vec![Some(Tensor::new(&[n, e], d).expect("shape"))]
            }),
        ))
    }
}

/// Numerically stable row-wise softmax of a row-major buffer with `k` columns.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}
