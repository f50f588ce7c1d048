//! Minimal reverse-mode tape over dense matrices.
//!
//! Only the operations the tiny decoder needs are provided. RoPE and causal
//! attention are fused ops; the RoPE op also differentiates with respect to
//! the frequency basis so gradients can reach the frequency dynamics.

use std::rc::Rc;

use crate::tensor::{gemm, Mat, View, ViewMut};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Contiguous rows `[start, start + len)` forming one causal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gelu(Var),
    Embed { table: Var, ids: Vec<usize> },
    Rope { x: Var, theta: Var, positions: Rc<[f64]>, head_dim: usize },
    Attention { q: Var, k: Var, v: Var, segments: Rc<[Segment]>, heads: usize, probs: Vec<f64> },
    TargetLogProb { logits: Var, targets: Rc<[Option<usize>]>, probs: Mat },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<(Mat, Op)>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn attention_probs_len(segments: &[Segment], heads: usize) -> usize {
    segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push((value, op));
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].0
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm(1.0, View::of(av), View::of(bv), 0.0, ViewMut::of(&mut out));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Row-wise RMS normalisation with a learned per-column gain (`1 x cols`).
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(gain));
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / xv.cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, x), g) in out.row_mut(r).iter_mut().zip(row).zip(&gv.data) {
                *o = x * inv * g;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| gelu(v)).collect());
        self.push(out, Op::Gelu(x))
    }

    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Embed { table, ids })
    }

    /// Rotates each `head_dim`-wide column block of every row by
    /// `positions[row] * theta`, adjacent pairs. `theta` is `1 x head_dim/2`.
    pub fn rope(&mut self, x: Var, theta: Var, positions: Rc<[f64]>, head_dim: usize) -> Var {
        let (xv, tv) = (self.value(x), self.value(theta));
        assert_eq!(tv.cols * 2, head_dim, "basis width");
        assert_eq!(xv.cols % head_dim, 0, "head layout");
        assert_eq!(positions.len(), xv.rows, "one position per row");
        let mut out = xv.clone();
        let pairs = tv.cols;
        let mut sc = vec![(0.0, 0.0); pairs];
        for (r, &m) in positions.iter().enumerate() {
            for (slot, th) in sc.iter_mut().zip(&tv.data) {
                *slot = (m * th).sin_cos();
            }
            for head in out.row_mut(r).chunks_exact_mut(head_dim) {
                for (pair, &(s, c)) in head.chunks_exact_mut(2).zip(&sc) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = a * c - b * s;
                    pair[1] = a * s + b * c;
                }
            }
        }
        self.push(out, Op::Rope { x, theta, positions, head_dim })
    }

    /// Causal softmax attention with `1/sqrt(head_dim)` scaling, computed
    /// independently inside each segment and head.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Rc<[Segment]>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols;
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Mat::zeros(qv.rows, width);
        let mut probs = vec![0.0; attention_probs_len(&segments, heads)];
        let mut off = 0;
        for seg in segments.iter() {
            let n = seg.len;
            for h in 0..heads {
                let mut p = Mat::zeros(n, n);
                let qb = View::block(qv, seg.start, n, h * hd, hd);
                let kb = View::block(kv, seg.start, n, h * hd, hd);
                gemm(scale, qb, kb.t(), 0.0, ViewMut::of(&mut p));
                for i in 0..n {
                    let row = &mut p.row_mut(i)[..];
                    let max = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in &mut row[..=i] {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    row[..=i].iter_mut().for_each(|x| *x /= sum);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                let vb = View::block(vv, seg.start, n, h * hd, hd);
                gemm(1.0, View::of(&p), vb, 0.0, ViewMut::block(&mut out, seg.start, n, h * hd, hd));
                probs[off..off + n * n].copy_from_slice(&p.data);
                off += n * n;
            }
        }
        self.push(out, Op::Attention { q, k, v, segments, heads, probs })
    }

    /// Log-probability of each row's target under a softmax over the row
    /// (`rows x 1`); rows without a target produce 0 and receive no gradient.
    pub fn target_log_prob(&mut self, logits: Var, targets: Rc<[Option<usize>]>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows);
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut out = Mat::zeros(lv.rows, 1);
        for r in 0..lv.rows {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            if let Some(t) = targets[r] {
                out.data[r] = row[t] - log_z;
            }
        }
        self.push(out, Op::TargetLogProb { logits, targets, probs })
    }

    /// Back-propagates the given output gradients through the whole tape.
    pub fn backward(&self, seeds: Vec<(Var, Mat)>) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let (value, op) = &self.nodes[idx];
            self.backward_op(op, value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_op(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Mat::zeros(av.rows, av.cols);
                gemm(1.0, View::of(g), View::of(bv).t(), 0.0, ViewMut::of(&mut da));
                let mut db = Mat::zeros(bv.rows, bv.cols);
                gemm(1.0, View::of(av).t(), View::of(g), 0.0, ViewMut::of(&mut db));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = xv.cols as f64;
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dgain = Mat::zeros(1, xv.cols);
                for r in 0..xv.rows {
                    let (row, grow, inv) = (xv.row(r), g.row(r), inv_rms[r]);
                    let mut dot = 0.0;
                    for j in 0..xv.cols {
                        dgain.data[j] += grow[j] * row[j] * inv;
                        dot += grow[j] * gv.data[j] * row[j];
                    }
                    let coef = inv * inv * inv * dot / n;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv * grow[j] * gv.data[j] - coef * row[j];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv.data.iter().zip(&g.data).map(|(x, g)| g * gelu_grad(*x)).collect();
                accumulate(grads, *x, Mat::from_vec(xv.rows, xv.cols, data));
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Mat::zeros(tv.rows, tv.cols);
                for (r, &id) in ids.iter().enumerate() {
                    dt.row_mut(id).iter_mut().zip(g.row(r)).for_each(|(d, g)| *d += g);
                }
                accumulate(grads, *table, dt);
            }
            Op::Rope { x, theta, positions, head_dim } => {
                let tv = self.value(*theta);
                let pairs = tv.cols;
                let mut dx = g.clone();
                let mut dtheta = Mat::zeros(1, pairs);
                let mut sc = vec![(0.0, 0.0); pairs];
                for (r, &m) in positions.iter().enumerate() {
                    for (slot, th) in sc.iter_mut().zip(&tv.data) {
                        *slot = (m * th).sin_cos();
                    }
                    let orow = out.row(r);
                    for (hh, head) in dx.row_mut(r).chunks_exact_mut(*head_dim).enumerate() {
                        let ohead = &orow[hh * head_dim..(hh + 1) * head_dim];
                        for (i, (pair, &(s, c))) in head.chunks_exact_mut(2).zip(&sc).enumerate() {
                            let (ga, gb) = (pair[0], pair[1]);
                            let (oa, ob) = (ohead[2 * i], ohead[2 * i + 1]);
                            dtheta.data[i] += m * (gb * oa - ga * ob);
                            pair[0] = ga * c + gb * s;
                            pair[1] = -ga * s + gb * c;
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *theta, dtheta);
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let width = qv.cols;
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Mat::zeros(qv.rows, width);
                let mut dk = Mat::zeros(qv.rows, width);
                let mut dv = Mat::zeros(qv.rows, width);
                let mut off = 0;
                for seg in segments.iter() {
                    let n = seg.len;
                    for h in 0..*heads {
                        let p = Mat::from_vec(n, n, probs[off..off + n * n].to_vec());
                        off += n * n;
                        let gb = View::block(g, seg.start, n, h * hd, hd);
                        let vb = View::block(vv, seg.start, n, h * hd, hd);
                        let mut dp = Mat::zeros(n, n);
                        gemm(1.0, gb, vb.t(), 0.0, ViewMut::of(&mut dp));
                        gemm(1.0, View::of(&p).t(), gb, 1.0, ViewMut::block(&mut dv, seg.start, n, h * hd, hd));
                        for i in 0..n {
                            let prow = p.row(i);
                            let drow = dp.row_mut(i);
                            let dot: f64 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                drow[j] = prow[j] * (drow[j] - dot);
                            }
                            drow[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                        }
                        let qb = View::block(qv, seg.start, n, h * hd, hd);
                        let kb = View::block(kv, seg.start, n, h * hd, hd);
                        gemm(scale, View::of(&dp), kb, 1.0, ViewMut::block(&mut dq, seg.start, n, h * hd, hd));
                        gemm(scale, View::of(&dp).t(), qb, 1.0, ViewMut::block(&mut dk, seg.start, n, h * hd, hd));
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::TargetLogProb { logits, targets, probs } => {
                let mut dl = Mat::zeros(probs.rows, probs.cols);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let u = g.data[r];
                    if u == 0.0 {
                        continue;
                    }
                    for (d, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *d = -u * p;
                    }
                    dl.row_mut(r)[t] += u;
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::substream;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = substream(seed, "tape");
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a small graph touching every op and returns the scalar
    /// `sum(w * logprob)`; used for finite-difference checks on each leaf.
    fn graph(leaves: &[Mat]) -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let (table, gain, wq, wk, wv, wo, theta) = (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6]);
        let x = tape.embed(table, vec![0, 2, 1, 2, 3]);
        let h = tape.rms_norm(x, gain);
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let positions: Rc<[f64]> = vec![1.0, 2.5, 4.0, 1.0, 3.0].into();
        let qr = tape.rope(q, theta, positions.clone(), 4);
        let kr = tape.rope(k, theta, positions, 4);
        let segs: Rc<[Segment]> = vec![Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }].into();
        let a = tape.attention(qr, kr, v, segs, 2);
        let a = tape.gelu(a);
        let y = tape.add(x, a);
        let logits = tape.matmul(y, wo);
        let lp = tape.target_log_prob(logits, vec![Some(1), Some(0), None, Some(3), Some(2)].into());
        (tape, vars, lp)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let leaves = vec![
            rand_mat(4, 8, 1),
            rand_mat(1, 8, 2),
            rand_mat(8, 8, 3),
            rand_mat(8, 8, 4),
            rand_mat(8, 8, 5),
            rand_mat(8, 4, 6),
            Mat::from_vec(1, 2, vec![0.9, 0.3]),
        ];
        let w = Mat::from_vec(5, 1, vec![0.5, -1.0, 2.0, 0.7, 1.3]);
        let objective = |ls: &[Mat]| {
            let (tape, _, lp) = graph(ls);
            tape.value(lp).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (tape, vars, lp) = graph(&leaves);
        let grads = tape.backward(vec![(lp, w.clone())]);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let an = grads.get(vars[li]).expect("leaf gradient");
            for e in 0..leaf.data.len() {
                let mut plus = leaves.clone();
                plus[li].data[e] += h;
                let mut minus = leaves.clone();
                minus[li].data[e] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let err = (fd - an.data[e]).abs();
                assert!(err < 1e-6 * (1.0 + fd.abs()), "leaf {li} elem {e}: fd {fd} vs {}", an.data[e]);
            }
        }
    }

    #[test]
    fn attention_is_causal() {
        let q = rand_mat(4, 4, 10);
        let k = rand_mat(4, 4, 11);
        let v = rand_mat(4, 4, 12);
        let segs: Rc<[Segment]> = vec![Segment { start: 0, len: 4 }].into();
        let run = |v: &Mat| {
            let mut tape = Tape::new();
            let (a, b, c) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
            let o = tape.attention(a, b, c, segs.clone(), 2);
            tape.value(o).clone()
        };
        let base = run(&v);
        let mut v2 = v.clone();
        v2.row_mut(3).iter_mut().for_each(|x| *x += 5.0);
        let changed = run(&v2);
        assert_eq!(base.data[..12], changed.data[..12]);
        assert_ne!(base.row(3), changed.row(3));
    }
}
