//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the tape
//! in reverse and accumulates gradients per node. Each op captures whatever
//! small metadata its adjoint needs (indices, dims, masks) in a closure.
//!
//! The op set is exactly what the models here need: dense linear algebra,
//! row softmax / layer norm / GELU for transformer blocks, im2col for
//! convolutions, bilinear resize for multi-scale feature fusion, gather for
//! embeddings and token dropping, and a fused mean cross-entropy head.

use crate::tensor::Tensor;

pub type VarId = usize;

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Graph::backward`.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, backward: Option<BackFn>) -> VarId {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        self.nodes.len() - 1
    }

    /// Leaf node. Gradients still accumulate on leaves so callers can read
    /// parameter and input gradients after `backward`.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(t, vec![], None)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).add(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).sub(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.zip(p[1], |gi, y| gi * y), g.zip(p[0], |gi, x| gi * x)]
            })),
        )
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                let da = g.zip(p[1], |gi, y| gi / y);
                let mut db = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.numel() {
                    let (gi, x, y) = (g.data()[i], p[0].data()[i], p[1].data()[i]);
                    db.data_mut()[i] = -gi * x / (y * y);
                }
                vec![da, db]
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).scale(c);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.scale(c)])),
        )
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.matmul(&p[1].transpose()), p[0].transpose().matmul(g)]
            })),
        )
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).transpose();
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, _| vec![g.transpose()])),
        )
    }

    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> VarId {
        let (pr, pc) = self.value(a).shape();
        let v = self.value(a).reshaped(rows, cols);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.reshaped(pr, pc)])),
        )
    }

    pub fn concat_rows(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty());
        let cols = self.value(ids[0]).cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(ids.len());
        for &id in ids {
            let t = self.value(id);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            row_counts.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let total: usize = row_counts.iter().sum();
        let v = Tensor::from_vec(total, cols, data);
        self.push(
            v,
            ids.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(row_counts.len());
                let mut r0 = 0;
                for &n in &row_counts {
                    let mut t = Tensor::zeros(n, cols);
                    t.data_mut()
                        .copy_from_slice(&g.data()[r0 * cols..(r0 + n) * cols]);
                    out.push(t);
                    r0 += n;
                }
                out
            })),
        )
    }

    pub fn concat_cols(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty());
        let rows = self.value(ids[0]).rows();
        let col_counts: Vec<usize> = ids
            .iter()
            .map(|&id| {
                assert_eq!(self.value(id).rows(), rows, "concat_cols row mismatch");
                self.value(id).cols()
            })
            .collect();
        let total: usize = col_counts.iter().sum();
        let mut v = Tensor::zeros(rows, total);
        let mut c0 = 0;
        for (&id, &nc) in ids.iter().zip(col_counts.iter()) {
            let t = self.value(id);
            for r in 0..rows {
                for c in 0..nc {
                    v.set(r, c0 + c, t.get(r, c));
                }
            }
            c0 += nc;
        }
        self.push(
            v,
            ids.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(col_counts.len());
                let mut c0 = 0;
                for &nc in &col_counts {
                    let mut t = Tensor::zeros(rows, nc);
                    for r in 0..rows {
                        for c in 0..nc {
                            t.set(r, c, g.get(r, c0 + c));
                        }
                    }
                    out.push(t);
                    c0 += nc;
                }
                out
            })),
        )
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let src = self.value(a);
        let (pr, cols) = src.shape();
        assert!(start + len <= pr, "slice_rows out of range");
        let mut v = Tensor::zeros(len, cols);
        v.data_mut()
            .copy_from_slice(&src.data()[start * cols..(start + len) * cols]);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut t = Tensor::zeros(pr, cols);
                t.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                vec![t]
            })),
        )
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let src = self.value(a);
        let (rows, pc) = src.shape();
        assert!(start + len <= pc, "slice_cols out of range");
        let mut v = Tensor::zeros(rows, len);
        for r in 0..rows {
            for c in 0..len {
                v.set(r, c, src.get(r, start + c));
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut t = Tensor::zeros(rows, pc);
                for r in 0..rows {
                    for c in 0..len {
                        t.set(r, start + c, g.get(r, c));
                    }
                }
                vec![t]
            })),
        )
    }

    /// Gather rows by index; doubles as an embedding lookup when `a` is a
    /// parameter table. Duplicate indices accumulate in the adjoint.
    pub fn gather_rows(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let src = self.value(a);
        let (pr, cols) = src.shape();
        let mut v = Tensor::zeros(idx.len(), cols);
        for (i, &ri) in idx.iter().enumerate() {
            assert!(ri < pr, "gather_rows index {ri} out of range {pr}");
            v.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(src.row_slice(ri));
        }
        let idx = idx.to_vec();
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut t = Tensor::zeros(pr, cols);
                for (i, &ri) in idx.iter().enumerate() {
                    for c in 0..cols {
                        let cur = t.get(ri, c);
                        t.set(ri, c, cur + g.get(i, c));
                    }
                }
                vec![t]
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = src.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for c in 0..cols {
                v.set(r, c, exps[c] / s);
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, y| {
                let (rows, cols) = y.shape();
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dx.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let gm = self.value(gamma);
        let bt = self.value(beta);
        assert_eq!(gm.shape(), (1, cols), "layer_norm gamma shape");
        assert_eq!(bt.shape(), (1, cols), "layer_norm beta shape");
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = src.row_slice(r);
            let mu: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                let xh = (row[c] - mu) * inv;
                v.set(r, c, xh * gm.data()[c] + bt.data()[c]);
            }
        }
        self.push(
            v,
            vec![x, gamma, beta],
            Some(Box::new(move |g, p, _| {
                let x = p[0];
                let gm = p[1];
                let (rows, cols) = x.shape();
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let row = x.row_slice(r);
                    let gr = g.row_slice(r);
                    let mu: f64 = row.iter().sum::<f64>() / cols as f64;
                    let var: f64 =
                        row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xh: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let dxh: Vec<f64> = (0..cols).map(|c| gr[c] * gm.data()[c]).collect();
                    let mean_dxh: f64 = dxh.iter().sum::<f64>() / cols as f64;
                    let mean_dxh_xh: f64 =
                        dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx.set(r, c, inv * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh));
                        dgamma.data_mut()[c] += gr[c] * xh[c];
                        dbeta.data_mut()[c] += gr[c];
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
        )
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let v = self.value(a).map(|x| {
            let u = C * (x + A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                let dx = g.zip(p[0], |gi, x| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    gi * (0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x))
                });
                vec![dx]
            })),
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let (rows, cols) = self.value(a).shape();
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![Tensor::filled(rows, cols, g.item())]
            })),
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let (rows, cols) = self.value(a).shape();
        let n = (rows * cols) as f64;
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![Tensor::filled(rows, cols, g.item() / n)]
            })),
        )
    }

    pub fn sum_axis0(&mut self, a: VarId) -> VarId {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut v = Tensor::zeros(1, cols);
        for r in 0..rows {
            for c in 0..cols {
                v.data_mut()[c] += src.get(r, c);
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut t = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        t.set(r, c, g.data()[c]);
                    }
                }
                vec![t]
            })),
        )
    }

    pub fn mean_axis0(&mut self, a: VarId) -> VarId {
        let rows = self.value(a).rows();
        let s = self.sum_axis0(a);
        self.scale(s, 1.0 / rows as f64)
    }

    pub fn mean_axis1(&mut self, a: VarId) -> VarId {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut v = Tensor::zeros(rows, 1);
        for r in 0..rows {
            v.data_mut()[r] = src.row_slice(r).iter().sum::<f64>() / cols as f64;
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut t = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.data()[r] / cols as f64;
                    for c in 0..cols {
                        t.set(r, c, gr);
                    }
                }
                vec![t]
            })),
        )
    }

    /// x[n,d] + b[1,d], broadcast down rows.
    pub fn add_row_bias(&mut self, x: VarId, b: VarId) -> VarId {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let bias = self.value(b);
        assert_eq!(bias.shape(), (1, cols), "row bias shape");
        let mut v = src.clone();
        for r in 0..rows {
            for c in 0..cols {
                let cur = v.get(r, c);
                v.set(r, c, cur + bias.data()[c]);
            }
        }
        self.push(
            v,
            vec![x, b],
            Some(Box::new(move |g, _, _| {
                let mut db = Tensor::zeros(1, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        db.data_mut()[c] += g.get(r, c);
                    }
                }
                vec![g.clone(), db]
            })),
        )
    }

    /// x[n,d] + b[n,1], broadcast across columns (per-channel conv bias).
    pub fn add_col_bias(&mut self, x: VarId, b: VarId) -> VarId {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let bias = self.value(b);
        assert_eq!(bias.shape(), (rows, 1), "col bias shape");
        let mut v = src.clone();
        for r in 0..rows {
            for c in 0..cols {
                let cur = v.get(r, c);
                v.set(r, c, cur + bias.data()[r]);
            }
        }
        self.push(
            v,
            vec![x, b],
            Some(Box::new(move |g, _, _| {
                let mut db = Tensor::zeros(rows, 1);
                for r in 0..rows {
                    db.data_mut()[r] = g.row_slice(r).iter().sum();
                }
                vec![g.clone(), db]
            })),
        )
    }

    /// Elementwise multiply by a constant mask (dropout, loss masks).
    pub fn mul_mask(&mut self, x: VarId, mask: Tensor) -> VarId {
        let v = self.value(x).zip(&mask, |a, m| a * m);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![g.zip(&mask, |gi, m| gi * m)]
            })),
        )
    }

    pub fn square(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(|a| a * a);
        self.push(
            v,
            vec![x],
            Some(Box::new(|g, p, _| {
                vec![g.zip(p[0], |gi, a| 2.0 * a * gi)]
            })),
        )
    }

    pub fn l2norm_rows(&mut self, x: VarId, eps: f64) -> VarId {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = src.row_slice(r);
            let n = (row.iter().map(|&a| a * a).sum::<f64>() + eps).sqrt();
            for c in 0..cols {
                v.set(r, c, row[c] / n);
            }
        }
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, p, _| {
                let x = p[0];
                let (rows, cols) = x.shape();
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let row = x.row_slice(r);
                    let gr = g.row_slice(r);
                    let n = (row.iter().map(|&a| a * a).sum::<f64>() + eps).sqrt();
                    let s: f64 = row.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dx.set(r, c, gr[c] / n - row[c] * s / (n * n * n));
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Unfold x[cin, h*w] into [cin*k*k, oh*ow] patches so convolution
    /// becomes a matmul with a [cout, cin*k*k] weight.
    pub fn im2col(
        &mut self,
        x: VarId,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let src = self.value(x);
        let cin = src.rows();
        assert_eq!(src.cols(), h * w, "im2col spatial dims mismatch");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel exceeds input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let out_rows = cin * k * k;
        let out_cols = oh * ow;
        let mut v = Tensor::zeros(out_rows, out_cols);
        // (flat output index, flat source index) for every in-bounds tap
        let mut taps: Vec<(usize, usize)> = Vec::new();
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let orow = ci * k * k + ky * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src_idx = ci * h * w + iy as usize * w + ix as usize;
                            let dst_idx = orow * out_cols + oy * ow + ox;
                            v.data_mut()[dst_idx] = src.data()[src_idx];
                            taps.push((dst_idx, src_idx));
                        }
                    }
                }
            }
        }
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut t = Tensor::zeros(cin, h * w);
                for &(dst, srci) in &taps {
                    t.data_mut()[srci] += g.data()[dst];
                }
                vec![t]
            })),
        )
    }

    /// Bilinear resize of x[c, h*w] to [c, oh*ow]; half-pixel centers with
    /// edge clamping.
    pub fn bilinear_resize(
        &mut self,
        x: VarId,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) -> VarId {
        let src = self.value(x);
        let c = src.rows();
        assert_eq!(src.cols(), h * w, "bilinear spatial dims mismatch");
        let taps = bilinear_taps(h, w, oh, ow);
        let mut v = Tensor::zeros(c, oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for (o, tap) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(idx, wt) in tap {
                    acc += src.data()[base + idx] * wt;
                }
                v.data_mut()[ch * oh * ow + o] = acc;
            }
        }
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut t = Tensor::zeros(c, h * w);
                for ch in 0..c {
                    let base = ch * h * w;
                    for (o, tap) in taps.iter().enumerate() {
                        let gi = g.data()[ch * oh * ow + o];
                        for &(idx, wt) in tap {
                            t.data_mut()[base + idx] += gi * wt;
                        }
                    }
                }
                vec![t]
            })),
        )
    }

    /// Mean cross-entropy over rows of logits against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: VarId, targets: &[usize]) -> VarId {
        let src = self.value(logits);
        let (rows, cols) = src.shape();
        assert_eq!(rows, targets.len(), "target count mismatch");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "target {t} out of range {cols}");
            let row = src.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / rows as f64);
        let targets = targets.to_vec();
        self.push(
            v,
            vec![logits],
            Some(Box::new(move |g, p, _| {
                let x = p[0];
                let (rows, cols) = x.shape();
                let gi = g.item() / rows as f64;
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let row = x.row_slice(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    for c in 0..cols {
                        let mut d = exps[c] / s;
                        if c == targets[r] {
                            d -= 1.0;
                        }
                        dx.set(r, c, d * gi);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Backpropagate from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: VarId) -> Grads {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let pvals: Vec<&Tensor> = node.parents.iter().map(|&p| self.value(p)).collect();
                let pgrads = back(&g, &pvals, &node.value);
                assert_eq!(pgrads.len(), node.parents.len(), "adjoint arity mismatch");
                for (&p, pg) in node.parents.iter().zip(pgrads.into_iter()) {
                    assert_eq!(
                        pg.shape(),
                        self.value(p).shape(),
                        "adjoint shape mismatch for node {p}"
                    );
                    match &mut grads[p] {
                        Some(acc) => acc.add_scaled(&pg, 1.0),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }
}

fn bilinear_taps(h: usize, w: usize, oh: usize, ow: usize) -> Vec<[(usize, f64); 4]> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
            .max(0.0)
            .min((n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, ow, w);
            taps.push([
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ]);
        }
    }
    taps
}
