//! Tape-based reverse-mode differentiation over per-sample `[C, H, W]` feature maps.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse iteration is a valid topological order for backprop.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Add(Var, Var),
    /// Multiply every channel by a fixed `[H, W]` map.
    Mask {
        x: Var,
        map: Arc<Vec<f32>>,
    },
    /// Multiply by a learnable scalar (`[1]`-shaped parameter).
    ScalarMul {
        x: Var,
        s: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    /// Per-sample normalization over all of `[C, H, W]`, per-channel affine.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: f32,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    NearestResize {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that keeps everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            record: true,
        }
    }

    /// Forward-only graph: parameters are treated as constants and no backward caches are kept.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input that participates in differentiation (used for gradient checks on inputs).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv weight {ws:?} for {c} input channels");
        let geom = ConvGeom {
            in_ch: c,
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
            in_h: h,
            in_w: wd,
        };
        let bias = b.map(|b| self.value(b).data());
        let keep = self.record && (self.needs(w) || b.is_some_and(|b| self.needs(b)) || self.needs(x));
        let (out, cols) = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom, keep);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&[geom.out_ch, geom.out_h(), geom.out_w()], out).expect("conv shape");
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn mask(&mut self, x: Var, map: Arc<Vec<f32>>) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(map.len(), h * w, "mask map does not match feature size");
        let mut out = self.value(x).clone();
        for ch in 0..c {
            for (v, m) in out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(map.iter()) {
                *v *= *m;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Mask { x, map }, needs)
    }

    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let k = self.value(s).data()[0];
        let mut out = self.value(x).clone();
        out.scale(k);
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::ScalarMul { x, s }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = Tensor::from_vec(
            self.value(x).shape(),
            self.value(x).data().iter().map(|&v| if v > 0.0 { v } else { v * slope }).collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let n = (c * hw) as f64;
        let data = self.value(x).data();
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let rstd = (1.0 / (var + eps as f64).sqrt()) as f32;
        let mean = mean as f32;
        let xhat: Vec<f32> = data.iter().map(|&v| (v - mean) * rstd).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        let mut out = vec![0.0; xhat.len()];
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                out[i] = xhat[i] * g[ch] + b[ch];
            }
        }
        let value = Tensor::from_vec(&[c, h, w], out).expect("same shape");
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let xhat = if self.record { xhat } else { Vec::new() };
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs)
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let out = kernels::adaptive_avg_pool(self.value(x).data(), c, h, w, oh, ow);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[c, oh, ow], out).expect("pool"), Op::AdaptiveAvgPool { x }, needs)
    }

    pub fn nearest_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let out = kernels::nearest_resize(self.value(x).data(), c, h, w, oh, ow);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[c, oh, ow], out).expect("resize"), Op::NearestResize { x }, needs)
    }

    /// Resize to `(oh, ow)`: area average when shrinking, nearest neighbour when growing.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (_, h, w) = self.value(x).chw();
        if (h, w) == (oh, ow) {
            x
        } else if oh <= h && ow <= w {
            self.adaptive_avg_pool(x, oh, ow)
        } else {
            self.nearest_resize(x, oh, ow)
        }
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let d = self.value(x).data();
        let out: Vec<f32> = (0..c)
            .map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().sum::<f32>() / (h * w) as f32)
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[c], out).expect("gap"), Op::GlobalAvgPool { x }, needs)
    }

    /// `y = W x + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.value(w).shape().to_vec();
        let input = self.value(x).data();
        assert_eq!(ws[1], input.len(), "linear input size");
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let out: Vec<f32> = (0..ws[0])
            .map(|o| bd[o] + wd[o * ws[1]..(o + 1) * ws[1]].iter().zip(input).map(|(a, b)| a * b).sum::<f32>())
            .collect();
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::from_vec(&[ws[0]], out).expect("linear"), Op::Linear { x, w, b }, needs)
    }

    /// Backpropagate the given output cotangents through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Grads {
        assert!(self.record, "backward on an inference graph");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape");
            accumulate(&mut grads, &self.nodes, *v, |d| {
                for (a, b) in d.iter_mut().zip(g.data()) {
                    *a += *b;
                }
            });
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                let mut gw = nodes[w.0].needs_grad.then(|| vec![0.0; wv.len()]);
                let mut gb = b.filter(|b| nodes[b.0].needs_grad).map(|_| vec![0.0; geom.out_ch]);
                let mut gx = nodes[x.0].needs_grad.then(|| vec![0.0; xv.len()]);
                kernels::conv2d_backward(
                    xv,
                    cols,
                    wv,
                    gd,
                    geom,
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                    gx.as_deref_mut(),
                );
                if let Some(gw) = gw {
                    add_into(grads, nodes, *w, &gw);
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    add_into(grads, nodes, *b, &gb);
                }
                if let Some(gx) = gx {
                    add_into(grads, nodes, *x, &gx);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if nodes[v.0].needs_grad {
                        add_into(grads, nodes, *v, gd);
                    }
                }
            }
            Op::Mask { x, map } => {
                if nodes[x.0].needs_grad {
                    let hw = map.len();
                    accumulate(grads, nodes, *x, |d| {
                        for (i, v) in d.iter_mut().enumerate() {
                            *v += gd[i] * map[i % hw];
                        }
                    });
                }
            }
            Op::ScalarMul { x, s } => {
                let k = nodes[s.0].value.data()[0];
                if nodes[x.0].needs_grad {
                    accumulate(grads, nodes, *x, |d| {
                        for (v, gv) in d.iter_mut().zip(gd) {
                            *v += k * gv;
                        }
                    });
                }
                if nodes[s.0].needs_grad {
                    let xv = nodes[x.0].value.data();
                    let ds: f64 = xv.iter().zip(gd).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    accumulate(grads, nodes, *s, |d| d[0] += ds as f32);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if nodes[x.0].needs_grad {
                    let xv = nodes[x.0].value.data();
                    accumulate(grads, nodes, *x, |d| {
                        for ((v, gv), xi) in d.iter_mut().zip(gd).zip(xv) {
                            *v += if *xi > 0.0 { *gv } else { *gv * slope };
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (c, h, w) = node.value.chw();
                let hw = h * w;
                let gam = nodes[gamma.0].value.data();
                if nodes[beta.0].needs_grad {
                    let db: Vec<f32> = (0..c).map(|ch| gd[ch * hw..(ch + 1) * hw].iter().sum()).collect();
                    add_into(grads, nodes, *beta, &db);
                }
                if nodes[gamma.0].needs_grad {
                    let dg: Vec<f32> = (0..c)
                        .map(|ch| (ch * hw..(ch + 1) * hw).map(|i| gd[i] * xhat[i]).sum())
                        .collect();
                    add_into(grads, nodes, *gamma, &dg);
                }
                if nodes[x.0].needs_grad {
                    let n = (c * hw) as f64;
                    let dxhat: Vec<f32> = (0..c * hw).map(|i| gd[i] * gam[i / hw]).collect();
                    let sum_d: f64 = dxhat.iter().map(|&v| v as f64).sum();
                    let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    let (mean_d, mean_dx) = ((sum_d / n) as f32, (sum_dx / n) as f32);
                    accumulate(grads, nodes, *x, |d| {
                        for i in 0..d.len() {
                            d[i] += rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                        }
                    });
                }
            }
            Op::AdaptiveAvgPool { x } => {
                if nodes[x.0].needs_grad {
                    let (c, h, w) = nodes[x.0].value.chw();
                    let (_, oh, ow) = node.value.chw();
                    accumulate(grads, nodes, *x, |d| {
                        kernels::adaptive_avg_pool_backward(gd, c, h, w, oh, ow, d)
                    });
                }
            }
            Op::NearestResize { x } => {
                if nodes[x.0].needs_grad {
                    let (c, h, w) = nodes[x.0].value.chw();
                    let (_, oh, ow) = node.value.chw();
                    accumulate(grads, nodes, *x, |d| {
                        kernels::nearest_resize_backward(gd, c, h, w, oh, ow, d)
                    });
                }
            }
            Op::GlobalAvgPool { x } => {
                if nodes[x.0].needs_grad {
                    let (_, h, w) = nodes[x.0].value.chw();
                    let hw = h * w;
                    accumulate(grads, nodes, *x, |d| {
                        for (i, v) in d.iter_mut().enumerate() {
                            *v += gd[i / hw] / hw as f32;
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                let (o, n) = (gd.len(), xv.len());
                if nodes[b.0].needs_grad {
                    add_into(grads, nodes, *b, gd);
                }
                if nodes[w.0].needs_grad {
                    accumulate(grads, nodes, *w, |d| {
                        for r in 0..o {
                            for c in 0..n {
                                d[r * n + c] += gd[r] * xv[c];
                            }
                        }
                    });
                }
                if nodes[x.0].needs_grad {
                    accumulate(grads, nodes, *x, |d| {
                        for r in 0..o {
                            for c in 0..n {
                                d[c] += gd[r] * wv[r * n + c];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f32])) {
    let slot = &mut grads[v.0];
    let t = slot.get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(t.data_mut());
}

fn add_into(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: &[f32]) {
    accumulate(grads, nodes, v, |d| {
        for (a, b) in d.iter_mut().zip(g) {
            *a += *b;
        }
    });
}

/// Result of [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter touched by the graph, in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;

    fn pseudo(n: usize, salt: u64) -> Vec<f32> {
        let mut s = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
            })
            .collect()
    }

    /// Scalar objective: <probe, f(x)> through a small network touching every op.
    fn build(store: &ParamStore, ids: &[ParamId], x: &Tensor, probe: &[f32]) -> (Graph, Var, Var, f64) {
        let mut g = Graph::new();
        let xv = g.input_with_grad(x.clone());
        let p: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let h = g.conv2d(xv, p[0], Some(p[1]), 1, 1);
        let map = Arc::new((0..36).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect());
        let h = g.mask(h, map);
        let h = g.leaky_relu(h, 0.2);
        let h2 = g.conv2d(h, p[2], None, 2, 1);
        let h2 = g.layer_norm(h2, p[3], p[4], 1e-5);
        let h2 = g.scalar_mul(h2, p[5]);
        let up = g.resize(h2, 6, 6);
        let down = g.resize(up, 4, 4);
        let skip = g.resize(h, 4, 4);
        let skip = g.conv2d(skip, p[6], None, 1, 0);
        let s = g.add(down, skip);
        let pooled = g.global_avg_pool(s);
        let out = g.linear(pooled, p[7], p[8]);
        let f: f64 = g
            .value(out)
            .data()
            .iter()
            .zip(probe)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        (g, xv, out, f)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = ParamStore::new();
        let shapes: [&[usize]; 9] = [&[4, 2, 3, 3], &[4], &[5, 4, 3, 3], &[5], &[5], &[1], &[5, 4, 1, 1], &[3, 5], &[3]];
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let mut v = pseudo(n, i as u64 + 10);
                if i == 5 {
                    v[0] = 1.3;
                }
                store.add(format!("p{i}"), Tensor::from_vec(s, v).unwrap(), ParamGroup::Encoder)
            })
            .collect();
        let x = Tensor::from_vec(&[2, 6, 6], pseudo(72, 99)).unwrap();
        let probe = [0.7f32, -1.1, 0.4];
        let (g, xv, out, _) = build(&store, &ids, &x, &probe);
        let grads = g.backward(&[(out, Tensor::from_vec(&[3], probe.to_vec()).unwrap())]);
        let eps = 1e-2f32;
        let check = |analytic: f32, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * eps as f64);
            let err = (fd - analytic as f64).abs();
            assert!(err < 2e-2 * fd.abs().max(analytic.abs() as f64).max(0.05), "fd {fd} vs {analytic}");
        };
        let gx = grads.get(xv).unwrap();
        for i in [0, 9, 35, 50, 71] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            check(gx.data()[i], build(&store, &ids, &xp, &probe).3, build(&store, &ids, &xm, &probe).3);
        }
        let pg: BTreeMap<ParamId, Tensor> = grads.params().map(|(id, t)| (id, t.clone())).collect();
        assert_eq!(pg.len(), ids.len());
        for &id in &ids {
            for i in [0usize, 3] {
                if i >= store.value(id).len() {
                    continue;
                }
                let mut sp = store.clone();
                sp.value_mut(id).data_mut()[i] += eps;
                let mut sm = store.clone();
                sm.value_mut(id).data_mut()[i] -= eps;
                check(pg[&id].data()[i], build(&sp, &ids, &x, &probe).3, build(&sm, &ids, &x, &probe).3);
            }
        }
    }

    #[test]
    fn inference_graph_records_nothing_for_backward() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[1, 1, 3, 3], 1.0), ParamGroup::Encoder);
        let mut g = Graph::inference();
        let x = g.input(Tensor::full(&[1, 4, 4], 1.0));
        let wv = g.param(&store, w);
        let y = g.conv2d(x, wv, None, 1, 1);
        assert_eq!(g.value(y).data()[5], 9.0);
        assert_eq!(g.value(y).data()[0], 4.0);
    }
}
