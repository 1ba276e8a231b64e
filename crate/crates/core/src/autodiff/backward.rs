use super::kernels::{dot, matmul_nt_into, matmul_tn_into};
use super::{Graph, Node, Op, Var};
use crate::error::{Error, Result};

type Slots = Vec<Option<Vec<f64>>>;

/// Gradient buffer for `v`, or `None` if `v` does not need one.
fn slot<'a>(slots: &'a mut Slots, nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(slots[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn add_into(slots: &mut Slots, nodes: &[Node], v: Var, g: impl Iterator<Item = f64>) {
    if let Some(s) = slot(slots, nodes, v) {
        for (acc, x) in s.iter_mut().zip(g) {
            *acc += x;
        }
    }
}

impl Graph<'_> {
    /// Back-propagates from a scalar `loss`. Gradients of leaves and
    /// parameters accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut slots: Slots = vec![None; loss.0 + 1];
        slots[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    let node = &mut self.nodes[idx];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
                _ => propagate(&self.nodes, idx, &g, &mut slots),
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf and parameter gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

fn propagate(nodes: &[Node], idx: usize, g: &[f64], slots: &mut Slots) {
    let node = &nodes[idx];
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf | Op::Param(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if let Some(s) = slot(slots, nodes, *a) {
                matmul_nt_into(g, val(*b), s, m, k, n);
            }
            if let Some(s) = slot(slots, nodes, *b) {
                matmul_tn_into(val(*a), g, s, m, k, n);
            }
        }
        Op::Add(a, b) => {
            add_into(slots, nodes, *a, g.iter().copied());
            add_into(slots, nodes, *b, g.iter().copied());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            add_into(slots, nodes, *a, g.iter().zip(vb).map(|(x, y)| x * y));
            add_into(slots, nodes, *b, g.iter().zip(va).map(|(x, y)| x * y));
        }
        Op::AddBias(x, b) => {
            add_into(slots, nodes, *x, g.iter().copied());
            if let Some(s) = slot(slots, nodes, *b) {
                let c = s.len();
                if c > 0 {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
        }
        Op::Scale(x, f) => add_into(slots, nodes, *x, g.iter().map(|v| v * f)),
        Op::MulConst(x, c) => {
            add_into(slots, nodes, *x, g.iter().zip(c.iter()).map(|(a, b)| a * b))
        }
        Op::Relu(x) => add_into(
            slots,
            nodes,
            *x,
            g.iter()
                .zip(val(*x))
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }),
        ),
        Op::Tanh(x) => add_into(
            slots,
            nodes,
            *x,
            g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)),
        ),
        Op::Sigmoid(x) => add_into(
            slots,
            nodes,
            *x,
            g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)),
        ),
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            if let Some(s) = slot(slots, nodes, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |t: usize| o * len * inner + t * inner + i;
                        let dotp: f64 = (0..*len).map(|t| g[at(t)] * out[at(t)]).sum();
                        for t in 0..*len {
                            s[at(t)] += out[at(t)] * (g[at(t)] - dotp);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(s) = slot(slots, nodes, *x) {
                let c = nodes[x.0].value.cols();
                for ((srow, grow), orow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let gsum: f64 = grow.iter().sum();
                    for ((sv, gv), ov) in srow.iter_mut().zip(grow).zip(orow) {
                        *sv += gv - ov.exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gd = val(*gain);
            let d = gd.len();
            if let Some(s) = slot(slots, nodes, *x) {
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gh = 0.0;
                    for c in 0..d {
                        let gh = gr[c] * gd[c];
                        mean_g += gh;
                        mean_gh += gh * hr[c];
                    }
                    mean_g /= d as f64;
                    mean_gh /= d as f64;
                    for c in 0..d {
                        let gh = gr[c] * gd[c];
                        s[r * d + c] += is * (gh - mean_g - hr[c] * mean_gh);
                    }
                }
            }
            if let Some(s) = slot(slots, nodes, *gain) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        s[c] += grow[c] * hrow[c];
                    }
                }
            }
            if let Some(s) = slot(slots, nodes, *bias) {
                for grow in g.chunks(d) {
                    s.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p.0].value.cols();
                if let Some(s) = slot(slots, nodes, p) {
                    for r in 0..rows {
                        for j in 0..c {
                            s[r * c + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.len();
                add_into(slots, nodes, p, g[offset..offset + n].iter().copied());
                offset += n;
            }
        }
        Op::SliceRows(x, start) => {
            let c = nodes[x.0].value.cols();
            if let Some(s) = slot(slots, nodes, *x) {
                s[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, v)| *a += v);
            }
        }
        Op::SliceCols(x, start) => {
            let c = nodes[x.0].value.cols();
            let w = node.value.cols();
            if let Some(s) = slot(slots, nodes, *x) {
                for (r, grow) in g.chunks(w.max(1)).enumerate() {
                    for (j, v) in grow.iter().enumerate() {
                        s[r * c + start + j] += v;
                    }
                }
            }
        }
        Op::SumAll(x) => add_into(slots, nodes, *x, std::iter::repeat(g[0])),
        Op::SumAxis {
            x,
            outer,
            len,
            inner,
            mean,
        } => {
            let f = if *mean { 1.0 / *len as f64 } else { 1.0 };
            if let Some(s) = slot(slots, nodes, *x) {
                for o in 0..*outer {
                    for t in 0..*len {
                        for i in 0..*inner {
                            s[o * len * inner + t * inner + i] += g[o * inner + i] * f;
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (shape(*x)[0], shape(*x)[1]);
            if let Some(s) = slot(slots, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::GatherRows(table, idx) => {
            let c = nodes[table.0].value.cols();
            if let Some(s) = slot(slots, nodes, *table) {
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        s[i * c + j] += g[k * c + j];
                    }
                }
            }
        }
        Op::RepeatRows(v) => {
            if let Some(s) = slot(slots, nodes, *v) {
                let c = s.len();
                for grow in g.chunks(c.max(1)) {
                    s.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::WindowAttention {
            q,
            k,
            v,
            heads,
            windows,
            probs,
        } => window_attention_backward(nodes, g, slots, (*q, *k, *v), *heads, windows, probs),
        Op::WindowMax { x, argmax } => {
            let d = node.value.cols();
            if let Some(s) = slot(slots, nodes, *x) {
                for (o, (&src_row, gv)) in argmax.iter().zip(g).enumerate() {
                    s[src_row * d + o % d] += gv;
                }
            }
        }
        Op::WindowMean { x, width } => {
            let d = node.value.cols();
            let rows = node.value.rows();
            if let Some(s) = slot(slots, nodes, *x) {
                let f = 1.0 / *width as f64;
                for i in 0..rows {
                    for r in i..i + width {
                        for c in 0..d {
                            s[r * d + c] += g[i * d + c] * f;
                        }
                    }
                }
            }
        }
        Op::WindowSoftmaxPool {
            scores,
            x,
            width,
            weights,
        } => {
            let d = node.value.cols();
            let rows = node.value.rows();
            let xd = val(*x);
            let mut gs = vec![0.0; nodes[scores.0].value.len()];
            let mut gx = vec![0.0; xd.len()];
            for i in 0..rows {
                let grow = &g[i * d..(i + 1) * d];
                let w = &weights[i * width..(i + 1) * width];
                let gw: Vec<f64> = (0..*width)
                    .map(|t| dot(grow, &xd[(i + t) * d..(i + t + 1) * d]))
                    .collect();
                let wg: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
                for t in 0..*width {
                    gs[i + t] += w[t] * (gw[t] - wg);
                    for c in 0..d {
                        gx[(i + t) * d + c] += w[t] * grow[c];
                    }
                }
            }
            add_into(slots, nodes, *scores, gs.into_iter());
            add_into(slots, nodes, *x, gx.into_iter());
        }
        Op::Bilinear { hs, u, he } => {
            let (n, p) = (shape(*hs)[0], shape(*hs)[1]);
            let classes = shape(*u)[1];
            let (hd, ud, ed) = (val(*hs), val(*u), val(*he));
            let mut ghs = vec![0.0; n * p];
            let mut ghe = vec![0.0; n * p];
            let mut gu = vec![0.0; ud.len()];
            for r in 0..n {
                let hr = &hd[r * p..(r + 1) * p];
                let er = &ed[r * p..(r + 1) * p];
                for c in 0..classes {
                    let gc = g[r * classes + c];
                    if gc == 0.0 {
                        continue;
                    }
                    for a in 0..p {
                        let base = (a * classes + c) * p;
                        let urow = &ud[base..base + p];
                        ghs[r * p + a] += gc * dot(urow, er);
                        for b in 0..p {
                            ghe[r * p + b] += gc * hr[a] * urow[b];
                            gu[base + b] += gc * hr[a] * er[b];
                        }
                    }
                }
            }
            add_into(slots, nodes, *hs, ghs.into_iter());
            add_into(slots, nodes, *he, ghe.into_iter());
            add_into(slots, nodes, *u, gu.into_iter());
        }
    }
}

fn window_attention_backward(
    nodes: &[Node],
    g: &[f64],
    slots: &mut Slots,
    (q, k, v): (Var, Var, Var),
    heads: usize,
    windows: &[(usize, usize)],
    probs: &[f64],
) {
    let d = nodes[q.0].value.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut at = 0;
    let mut dp = Vec::new();
    for (r, &(s, len)) in windows.iter().enumerate() {
        for h in 0..heads {
            let off = r * d + h * dh;
            let grow = &g[off..off + dh];
            let p = &probs[at..at + len];
            dp.clear();
            dp.extend((0..len).map(|t| {
                let vr = (s + t) * d + h * dh;
                dot(grow, &vd[vr..vr + dh])
            }));
            let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for t in 0..len {
                let kr = (s + t) * d + h * dh;
                let ds = p[t] * (dp[t] - pdp) * scale;
                for j in 0..dh {
                    gq[off + j] += ds * kd[kr + j];
                    gk[kr + j] += ds * qd[off + j];
                    gv[kr + j] += p[t] * grow[j];
                }
            }
            at += len;
        }
    }
    add_into(slots, nodes, q, gq.into_iter());
    add_into(slots, nodes, k, gk.into_iter());
    add_into(slots, nodes, v, gv.into_iter());
}
