//! Reverse-mode tape over row-major matrices.
//!
//! Nodes are appended in evaluation order, so a reverse walk over the node
//! list is a valid topological order for backpropagation. Every op is generic
//! over [`Real`] so the same tape yields gradients on `f64` and
//! Hessian-vector products on [`Dual`](super::Dual).

use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const PROB_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf {
        param: Option<String>,
    },
    MeanEmbed {
        table: usize,
        seqs: Vec<Vec<usize>>,
    },
    ConvMax {
        table: usize,
        kernel: usize,
        bias: usize,
        width: usize,
        /// Padded token windows per item.
        seqs: Vec<Vec<usize>>,
        /// Winning window per (item, map).
        argmax: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Tanh {
        x: usize,
    },
    BceLogits {
        z: usize,
        labels: Vec<f64>,
        coefs: Vec<f64>,
        probs: Vec<T>,
        clamped: Vec<bool>,
    },
    WindowSum {
        table: usize,
        tags: usize,
        contexts: Vec<Vec<usize>>,
    },
    SoftmaxCe {
        logits: usize,
        targets: Vec<usize>,
        coefs: Vec<f64>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    label: String,
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

/// Gradient of the root with respect to one named leaf.
#[derive(Debug, Clone)]
pub struct LeafGrad<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub grad: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mat_shape(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => (s[0], s[1..].iter().product()),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, label: impl Into<String>, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            label: label.into(),
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf whose gradient is reported by [`backward`](Self::backward).
    /// `tangent` seeds the dual part when `T` carries one.
    pub fn param(&mut self, name: &str, t: &Tensor, tangent: Option<&Tensor>) -> Var {
        let (rows, cols) = mat_shape(t);
        let value = match tangent {
            Some(tan) => t
                .data()
                .iter()
                .zip(tan.data())
                .map(|(&v, &d)| T::lift(v, d))
                .collect(),
            None => t.data().iter().map(|&v| T::cst(v)).collect(),
        };
        self.push(
            name,
            rows,
            cols,
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        )
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Label of the first node whose value is NaN or infinite.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| n.value.iter().any(|x| !x.is_finite()))
            .map(|n| n.label.as_str())
    }

    fn check_ids(&self, table: Var, seqs: &[&[usize]]) -> Result<()> {
        let rows = self.nodes[table.0].rows;
        for seq in seqs {
            if let Some(&id) = seq.iter().find(|&&id| id >= rows) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: rows,
                });
            }
        }
        Ok(())
    }

    /// Mean of embedding rows per sequence: `[B, d]`.
    pub fn mean_embed(&mut self, table: Var, seqs: &[&[usize]]) -> Result<Var> {
        self.check_ids(table, seqs)?;
        let tab = &self.nodes[table.0];
        let d = tab.cols;
        let mut out = vec![T::zero(); seqs.len() * d];
        for (b, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::InvalidInput("empty sequence in batch".into()));
            }
            let row = &mut out[b * d..(b + 1) * d];
            for &id in seq.iter() {
                for (o, &e) in row.iter_mut().zip(&tab.value[id * d..(id + 1) * d]) {
                    *o += e;
                }
            }
            let inv = T::cst(1.0 / seq.len() as f64);
            row.iter_mut().for_each(|o| *o = *o * inv);
        }
        let label = format!("mean_embed({})", tab.label);
        Ok(self.push(
            label,
            seqs.len(),
            d,
            out,
            Op::MeanEmbed {
                table: table.0,
                seqs: seqs.iter().map(|s| s.to_vec()).collect(),
            },
        ))
    }

    /// Convolution of `width` consecutive embeddings, tanh, then max over
    /// positions. `kernel` is `[width*d, maps]`; sequences shorter than
    /// `width` are right-padded with `pad`.
    pub fn conv_max(
        &mut self,
        table: Var,
        kernel: Var,
        bias: Var,
        width: usize,
        seqs: &[&[usize]],
        pad: usize,
    ) -> Result<Var> {
        self.check_ids(table, seqs)?;
        let d = self.nodes[table.0].cols;
        let (krows, maps) = self.dims(kernel);
        if krows != width * d || self.dims(bias) != (1, maps) {
            return Err(Error::ShapeMismatch {
                name: self.nodes[kernel.0].label.clone(),
                expected: vec![width * d, maps],
                actual: vec![krows, maps],
            });
        }
        let tab = &self.nodes[table.0].value;
        let ker = &self.nodes[kernel.0].value;
        let bia = &self.nodes[bias.0].value;
        let mut out = vec![T::zero(); seqs.len() * maps];
        let mut argmax = vec![0usize; seqs.len() * maps];
        let mut padded_all = Vec::with_capacity(seqs.len());
        for (b, seq) in seqs.iter().enumerate() {
            let mut padded = seq.to_vec();
            while padded.len() < width {
                padded.push(pad);
            }
            let positions = padded.len() - width + 1;
            let mut best: Vec<Option<T>> = vec![None; maps];
            let mut pre = vec![T::zero(); maps];
            for p in 0..positions {
                pre.copy_from_slice(bia);
                for k in 0..width {
                    let id = padded[p + k];
                    for j in 0..d {
                        let e = tab[id * d + j];
                        let krow = &ker[(k * d + j) * maps..(k * d + j + 1) * maps];
                        for (acc, &w) in pre.iter_mut().zip(krow) {
                            *acc += e * w;
                        }
                    }
                }
                for m in 0..maps {
                    let act = pre[m].tanh();
                    if best[m].map_or(true, |cur| act.value() > cur.value()) {
                        best[m] = Some(act);
                        argmax[b * maps + m] = p;
                    }
                }
            }
            for m in 0..maps {
                out[b * maps + m] = best[m].expect("at least one window");
            }
            padded_all.push(padded);
        }
        let label = format!("conv{width}({})", self.nodes[kernel.0].label);
        Ok(self.push(
            label,
            seqs.len(),
            maps,
            out,
            Op::ConvMax {
                table: table.0,
                kernel: kernel.0,
                bias: bias.0,
                width,
                seqs: padded_all,
                argmax,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        if parts.iter().any(|p| self.dims(*p).0 != rows) {
            return Err(Error::InvalidInput("concat of tensors with different row counts".into()));
        }
        let cols: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let n = &self.nodes[p.0];
                out.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        Ok(self.push(
            "concat",
            rows,
            cols,
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// `x·w + b` with `x: [B, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, inner) = self.dims(x);
        let (wi, outc) = self.dims(w);
        if wi != inner || self.dims(b) != (1, outc) {
            return Err(Error::ShapeMismatch {
                name: self.nodes[w.0].label.clone(),
                expected: vec![inner, outc],
                actual: vec![wi, outc],
            });
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(rows * outc);
        for r in 0..rows {
            let mut acc = bv.clone();
            for (j, &xj) in xv[r * inner..(r + 1) * inner].iter().enumerate() {
                for (a, &wjk) in acc.iter_mut().zip(&wv[j * outc..(j + 1) * outc]) {
                    *a += xj * wjk;
                }
            }
            out.extend(acc);
        }
        let label = format!("linear({})", self.nodes[w.0].label);
        Ok(self.push(
            label,
            rows,
            outc,
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let out = n.value.iter().map(|v| v.tanh()).collect();
        let (rows, cols, label) = (n.rows, n.cols, format!("tanh({})", n.label));
        self.push(label, rows, cols, out, Op::Tanh { x: x.0 })
    }

    /// `Σ_b coef_b · BCE(clamp(σ(z_b)), y_b)` for logits `z: [B, 1]`.
    /// Clamped probabilities carry zero gradient.
    pub fn bce_logits(&mut self, z: Var, labels: &[f64], coefs: &[f64]) -> Result<Var> {
        let (rows, cols) = self.dims(z);
        if cols != 1 {
            return Err(Error::InvalidInput("bce expects a single logit column".into()));
        }
        check_len("labels", rows, labels.len())?;
        check_len("loss coefficients", rows, coefs.len())?;
        let mut probs = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        let mut total = T::zero();
        for (i, &zi) in self.nodes[z.0].value.iter().enumerate() {
            let (p, c) = clamped_sigmoid(zi);
            let y = labels[i];
            let loss = -(T::cst(y) * p.ln()) - T::cst(1.0 - y) * (T::cst(1.0) - p).ln();
            total += T::cst(coefs[i]) * loss;
            probs.push(p);
            clamped.push(c);
        }
        Ok(self.push(
            "bce",
            1,
            1,
            vec![total],
            Op::BceLogits {
                z: z.0,
                labels: labels.to_vec(),
                coefs: coefs.to_vec(),
                probs,
                clamped,
            },
        ))
    }

    /// Sum of tag-weighted neighbour embeddings. `tags: [width, d]`;
    /// each context lists `width` token ids.
    pub fn window_sum(&mut self, table: Var, tags: Var, contexts: &[&[usize]]) -> Result<Var> {
        self.check_ids(table, contexts)?;
        let d = self.nodes[table.0].cols;
        let (width, td) = self.dims(tags);
        if td != d {
            return Err(Error::ShapeMismatch {
                name: self.nodes[tags.0].label.clone(),
                expected: vec![width, d],
                actual: vec![width, td],
            });
        }
        let tab = &self.nodes[table.0].value;
        let tg = &self.nodes[tags.0].value;
        let mut out = vec![T::zero(); contexts.len() * d];
        for (b, ctx) in contexts.iter().enumerate() {
            check_len("context window", width, ctx.len())?;
            let row = &mut out[b * d..(b + 1) * d];
            for (o, &id) in ctx.iter().enumerate() {
                for j in 0..d {
                    row[j] += tab[id * d + j] * tg[o * d + j];
                }
            }
        }
        Ok(self.push(
            "window_sum",
            contexts.len(),
            d,
            out,
            Op::WindowSum {
                table: table.0,
                tags: tags.0,
                contexts: contexts.iter().map(|c| c.to_vec()).collect(),
            },
        ))
    }

    /// `Σ_b coef_b · (−log softmax(logits_b)[target_b])`.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize], coefs: &[f64]) -> Result<Var> {
        let (rows, v) = self.dims(logits);
        check_len("targets", rows, targets.len())?;
        check_len("loss coefficients", rows, coefs.len())?;
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: t, vocab_size: v });
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = Vec::with_capacity(rows * v);
        let mut total = T::zero();
        for b in 0..rows {
            let row = &lv[b * v..(b + 1) * v];
            let (logz, p) = log_softmax_parts(row);
            total += T::cst(coefs[b]) * (logz - row[targets[b]]);
            probs.extend(p);
        }
        Ok(self.push(
            "softmax_ce",
            1,
            1,
            vec![total],
            Op::SoftmaxCe {
                logits: logits.0,
                targets: targets.to_vec(),
                coefs: coefs.to_vec(),
                probs,
            },
        ))
    }

    /// Backpropagates from the scalar `root` and returns the gradient of
    /// every named leaf, in tape order. Leaves the root does not depend on
    /// get exact zeros.
    pub fn backward(&self, root: Var) -> Result<Vec<LeafGrad<T>>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::cst(1.0); self.nodes[root.0].value.len()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                }
                Op::MeanEmbed { table, seqs } => {
                    let d = node.cols;
                    let gt = self.grad_slot(&mut grads, *table);
                    for (b, seq) in seqs.iter().enumerate() {
                        let inv = T::cst(1.0 / seq.len() as f64);
                        for &id in seq {
                            for j in 0..d {
                                gt[id * d + j] += g[b * d + j] * inv;
                            }
                        }
                    }
                }
                Op::ConvMax {
                    table,
                    kernel,
                    bias,
                    width,
                    seqs,
                    argmax,
                } => {
                    let maps = node.cols;
                    let d = self.nodes[*table].cols;
                    let tab = &self.nodes[*table].value;
                    let ker = &self.nodes[*kernel].value;
                    let mut dk = vec![T::zero(); ker.len()];
                    let mut db = vec![T::zero(); maps];
                    let mut dt: Vec<(usize, T)> = Vec::new();
                    for (b, seq) in seqs.iter().enumerate() {
                        for m in 0..maps {
                            let act = node.value[b * maps + m];
                            let dpre = g[b * maps + m] * (T::cst(1.0) - act * act);
                            db[m] += dpre;
                            let p = argmax[b * maps + m];
                            for k in 0..*width {
                                let id = seq[p + k];
                                for j in 0..d {
                                    let kidx = (k * d + j) * maps + m;
                                    dk[kidx] += tab[id * d + j] * dpre;
                                    dt.push((id * d + j, ker[kidx] * dpre));
                                }
                            }
                        }
                    }
                    accumulate(self.grad_slot(&mut grads, *kernel), &dk);
                    accumulate(self.grad_slot(&mut grads, *bias), &db);
                    let gt = self.grad_slot(&mut grads, *table);
                    for (i, v) in dt {
                        gt[i] += v;
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p].cols;
                        let rows = node.rows;
                        let cols = node.cols;
                        let gp = self.grad_slot(&mut grads, p);
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * cols + offset + c];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (rows, outc) = (node.rows, node.cols);
                    let inner = self.nodes[*x].cols;
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let mut dx = vec![T::zero(); rows * inner];
                    let mut dw = vec![T::zero(); inner * outc];
                    let mut dbias = vec![T::zero(); outc];
                    for r in 0..rows {
                        let gr = &g[r * outc..(r + 1) * outc];
                        for (a, &gk) in dbias.iter_mut().zip(gr) {
                            *a += gk;
                        }
                        for j in 0..inner {
                            let xj = xv[r * inner + j];
                            let wrow = &wv[j * outc..(j + 1) * outc];
                            let dwrow = &mut dw[j * outc..(j + 1) * outc];
                            let mut acc = T::zero();
                            for k in 0..outc {
                                acc += gr[k] * wrow[k];
                                dwrow[k] += xj * gr[k];
                            }
                            dx[r * inner + j] = acc;
                        }
                    }
                    accumulate(self.grad_slot(&mut grads, *x), &dx);
                    accumulate(self.grad_slot(&mut grads, *w), &dw);
                    accumulate(self.grad_slot(&mut grads, *b), &dbias);
                }
                Op::Tanh { x } => {
                    let dx: Vec<T> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gi, &y)| gi * (T::cst(1.0) - y * y))
                        .collect();
                    accumulate(self.grad_slot(&mut grads, *x), &dx);
                }
                Op::BceLogits {
                    z,
                    labels,
                    coefs,
                    probs,
                    clamped,
                } => {
                    let dz: Vec<T> = (0..labels.len())
                        .map(|i| {
                            if clamped[i] {
                                T::zero()
                            } else {
                                g[0] * T::cst(coefs[i]) * (probs[i] - T::cst(labels[i]))
                            }
                        })
                        .collect();
                    accumulate(self.grad_slot(&mut grads, *z), &dz);
                }
                Op::WindowSum {
                    table,
                    tags,
                    contexts,
                } => {
                    let d = node.cols;
                    let tab = &self.nodes[*table].value;
                    let tg = &self.nodes[*tags].value;
                    let mut dtags = vec![T::zero(); tg.len()];
                    let mut dt: Vec<(usize, T)> = Vec::with_capacity(contexts.len() * d);
                    for (b, ctx) in contexts.iter().enumerate() {
                        for (o, &id) in ctx.iter().enumerate() {
                            for j in 0..d {
                                let gj = g[b * d + j];
                                dt.push((id * d + j, gj * tg[o * d + j]));
                                dtags[o * d + j] += gj * tab[id * d + j];
                            }
                        }
                    }
                    accumulate(self.grad_slot(&mut grads, *tags), &dtags);
                    let gt = self.grad_slot(&mut grads, *table);
                    for (i, v) in dt {
                        gt[i] += v;
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    coefs,
                    probs,
                } => {
                    let v = self.nodes[*logits].cols;
                    let mut dl = Vec::with_capacity(probs.len());
                    for (b, &t) in targets.iter().enumerate() {
                        let c = g[0] * T::cst(coefs[b]);
                        for k in 0..v {
                            let p = probs[b * v + k];
                            let p = if k == t { p - T::cst(1.0) } else { p };
                            dl.push(c * p);
                        }
                    }
                    accumulate(self.grad_slot(&mut grads, *logits), &dl);
                }
            }
        }

        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let grad = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
                out.push(LeafGrad {
                    name: name.clone(),
                    shape: if node.rows == 1 {
                        vec![node.cols]
                    } else {
                        vec![node.rows, node.cols]
                    },
                    grad,
                });
            }
        }
        Ok(out)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], idx: usize) -> &'a mut Vec<T> {
        let len = self.nodes[idx].value.len();
        grads[idx].get_or_insert_with(|| vec![T::zero(); len])
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn check_len(what: &'static str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { what, left, right });
    }
    Ok(())
}

/// Logistic function clamped to `[1e-7, 1 - 1e-7]`; the flag is set when the
/// clamp is active.
pub(crate) fn clamped_sigmoid<T: Real>(z: T) -> (T, bool) {
    let one = T::cst(1.0);
    let p = if z.value() >= 0.0 {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    };
    if p.value() < PROB_CLAMP {
        (T::cst(PROB_CLAMP), true)
    } else if p.value() > 1.0 - PROB_CLAMP {
        (T::cst(1.0 - PROB_CLAMP), true)
    } else {
        (p, false)
    }
}

/// `(log Σ exp(row), softmax(row))`, shifted by the row max.
pub(crate) fn log_softmax_parts<T: Real>(row: &[T]) -> (T, Vec<T>) {
    let max = row
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = T::cst(max);
    let exps: Vec<T> = row.iter().map(|&v| (v - shift).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum += e;
    }
    let logz = shift + sum.ln();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (logz, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dual;
    use crate::util;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Builds a small graph touching every op and returns the loss.
    fn full_graph<T: Real>(leaves: &[(&str, Tensor)], dir: Option<&[Tensor]>) -> (Graph<T>, Var) {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = leaves
            .iter()
            .enumerate()
            .map(|(i, (n, v))| g.param(n, v, dir.map(|d| &d[i])))
            .collect();
        let (emb, ker, kb, w1, b1, w2, b2, tags, wout, bout) = (
            vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7], vars[8],
            vars[9],
        );
        let seqs: [&[usize]; 3] = [&[1, 2, 3], &[4, 0], &[2]];
        let m = g.mean_embed(emb, &seqs).unwrap();
        let c = g.conv_max(emb, ker, kb, 2, &seqs, 0).unwrap();
        let cat = g.concat_cols(&[m, c]).unwrap();
        let h = g.linear(cat, w1, b1).unwrap();
        let h = g.tanh(h);
        let z = g.linear(h, w2, b2).unwrap();
        let l1 = g.bce_logits(z, &[1.0, 0.0, 1.0], &[0.5, 0.25, 1.0]).unwrap();
        let ctx: [&[usize]; 2] = [&[0, 1, 2], &[3, 4, 1]];
        let ws = g.window_sum(emb, tags, &ctx).unwrap();
        let ws = g.tanh(ws);
        let logits = g.linear(ws, wout, bout).unwrap();
        let l2 = g.softmax_ce(logits, &[3, 1], &[0.5, 0.5]).unwrap();
        // combine the two losses through a 2x1 linear map of a concat
        let both = g.concat_cols(&[l1, l2]).unwrap();
        let one = g.param("sum_w", &t(&[2, 1], &[1.0, 1.0]), None);
        let zero = g.param("sum_b", &t(&[1], &[0.0]), None);
        let total = g.linear(both, one, zero).unwrap();
        (g, total)
    }

    fn leaves(seed: u64) -> Vec<(&'static str, Tensor)> {
        let mut r = util::rng(seed, 0);
        let d = 3;
        vec![
            ("emb", Tensor::uniform(&[5, d], 0.8, &mut r)),
            ("ker", Tensor::uniform(&[2 * d, 2], 0.8, &mut r)),
            ("kb", Tensor::uniform(&[2], 0.5, &mut r)),
            ("w1", Tensor::uniform(&[d + 2, 4], 0.8, &mut r)),
            ("b1", Tensor::uniform(&[4], 0.5, &mut r)),
            ("w2", Tensor::uniform(&[4, 1], 0.8, &mut r)),
            ("b2", Tensor::uniform(&[1], 0.5, &mut r)),
            ("tags", Tensor::uniform(&[3, d], 0.8, &mut r)),
            ("wout", Tensor::uniform(&[d, 5], 0.8, &mut r)),
            ("bout", Tensor::uniform(&[5], 0.5, &mut r)),
        ]
    }

    fn loss_at(ls: &[(&'static str, Tensor)]) -> f64 {
        let (g, root) = full_graph::<f64>(ls, None);
        g.scalar(root)
    }

    #[test]
    fn every_op_matches_central_differences() {
        for seed in 0..5 {
            let ls = leaves(seed);
            let (g, root) = full_graph::<f64>(&ls, None);
            let grads = g.backward(root).unwrap();
            let eps = 1e-5;
            for (li, (name, tensor)) in ls.iter().enumerate() {
                let analytic = &grads.iter().find(|lg| lg.name == *name).unwrap().grad;
                for k in 0..tensor.len() {
                    let mut plus = ls.clone();
                    plus[li].1.data_mut()[k] += eps;
                    let mut minus = ls.clone();
                    minus[li].1.data_mut()[k] -= eps;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                    let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
                    assert!(err < 1e-4, "{name}[{k}]: fd {fd} vs {}", analytic[k]);
                }
            }
        }
    }

    #[test]
    fn dual_tape_gives_hessian_vector_products() {
        let ls = leaves(3);
        let mut r = util::rng(99, 0);
        let dir: Vec<Tensor> = ls
            .iter()
            .map(|(_, t)| Tensor::uniform(t.shape(), 1.0, &mut r))
            .collect();
        let (g, root) = full_graph::<Dual>(&ls, Some(&dir));
        let hv = g.backward(root).unwrap();

        // central difference of the gradient along dir
        let eps = 1e-5;
        let shifted = |s: f64| {
            let moved: Vec<(&'static str, Tensor)> = ls
                .iter()
                .zip(&dir)
                .map(|((n, t), d)| {
                    let data = t.data().iter().zip(d.data()).map(|(a, b)| a + s * b).collect();
                    (*n, Tensor::new(t.shape().to_vec(), data).unwrap())
                })
                .collect();
            let (g, root) = full_graph::<f64>(&moved, None);
            g.backward(root).unwrap()
        };
        let (gp, gm) = (shifted(eps), shifted(-eps));
        for (i, lg) in hv.iter().enumerate() {
            for k in 0..lg.grad.len() {
                let fd = (gp[i].grad[k] - gm[i].grad[k]) / (2.0 * eps);
                let an = lg.grad[k].t;
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                    "{}[{k}] {fd} vs {an}",
                    lg.name
                );
            }
        }
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let emb = g.param("emb", &t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), None);
        let w = g.param("w", &t(&[2, 1], &[1.0, -1.0]), None);
        let b = g.param("b", &t(&[1], &[0.0]), None);
        let seqs: [&[usize]; 1] = [&[0, 1]];
        let x = g.mean_embed(emb, &seqs).unwrap();
        let z = g.linear(x, w, b).unwrap();
        let l = g.bce_logits(z, &[1.0], &[1.0]).unwrap();
        let grads = g.backward(l).unwrap();
        // row 2 of the embedding never appears in the batch
        assert_eq!(&grads[0].grad[4..], &[0.0, 0.0]);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let mut g = Graph::<f64>::new();
        let emb = g.param("emb", &t(&[3, 1], &[0.0; 3]), None);
        let seqs: [&[usize]; 1] = [&[0, 3]];
        assert!(matches!(
            g.mean_embed(emb, &seqs),
            Err(Error::TokenOutOfRange { id: 3, vocab_size: 3 })
        ));
    }

    #[test]
    fn clamp_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.param("z", &t(&[1, 1], &[40.0]), None);
        let l = g.bce_logits(z, &[0.0], &[1.0]).unwrap();
        assert!((g.scalar(l) + (PROB_CLAMP).ln()).abs() < 1e-9);
        assert_eq!(g.backward(l).unwrap()[0].grad[0], 0.0);
    }
}
