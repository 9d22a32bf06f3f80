//! Define-by-run tape for the handful of ops the denoiser network uses.
//!
//! Every op records its output value; [`Graph::backward`] replays the tape in
//! reverse and returns gradients for parameters and for every node that
//! requires them (in particular the network input, when asked for).

use super::kernels::{col2im3_acc, gemm, gemm_nt_acc, gemm_tn, im2col3, sigmoid};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3x3 {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// `x * (1 + scale) + shift`, with per-(batch, channel) scale and shift.
    Film {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    AvgPool2 {
        x: NodeId,
    },
    Upsample2 {
        x: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

pub struct Gradients {
    pub params: Vec<Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub fn take_node(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].take()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv3x3(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let xv = self.value(x);
        let [n, cin, h, wd] = xv.shape;
        let wt = self.params.get(w);
        let cout = wt.shape[0];
        assert_eq!(wt.shape[1], cin, "conv input channels");
        let bias = &self.params.get(b).data;
        let hw = h * wd;
        let mut out = Tensor::zeros([n, cout, h, wd]);
        let mut cols = vec![0.0; cin * 9 * hw];
        for i in 0..n {
            im2col3(&xv.data[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut cols);
            let o = &mut out.data[i * cout * hw..(i + 1) * cout * hw];
            for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias[co]);
            }
            gemm(cout, cin * 9, hw, &wt.data, &cols, 1.0, o);
        }
        self.push(out, Op::Conv3x3 { x, w, b }, true)
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let xv = self.value(x);
        let (n, k) = (xv.shape[0], xv.shape[1] * xv.plane());
        let wt = self.params.get(w);
        let m = wt.shape[0];
        assert_eq!(wt.shape[1], k, "linear input width");
        let bias = &self.params.get(b).data;
        let mut out = Tensor::zeros([n, m, 1, 1]);
        for row in out.data.chunks_exact_mut(m) {
            row.copy_from_slice(bias);
        }
        gemm_nt_acc(n, k, m, &xv.data, &wt.data, &mut out.data);
        self.push(out, Op::Linear { x, w, b }, true)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_vec(xv.shape, data);
        let rg = self.rg(x);
        self.push(out, Op::Silu { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.shape, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn film(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let xv = self.value(x);
        let (sc, sh) = (self.value(scale), self.value(shift));
        let [n, c, _, _] = xv.shape;
        assert_eq!(sc.shape, [n, c, 1, 1], "film scale shape");
        assert_eq!(sh.shape, [n, c, 1, 1], "film shift shape");
        let hw = xv.plane();
        let mut out = Tensor::zeros(xv.shape);
        for nc in 0..n * c {
            let (g, s) = (1.0 + sc.data[nc], sh.data[nc]);
            for (o, &v) in out.data[nc * hw..(nc + 1) * hw]
                .iter_mut()
                .zip(&xv.data[nc * hw..(nc + 1) * hw])
            {
                *o = v * g + s;
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(out, Op::Film { x, scale, shift }, rg)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial size");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for nc in 0..n * c {
            let src = &xv.data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out.data[nc * ho * wo..(nc + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2 { x }, rg)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for nc in 0..n * c {
            let src = &xv.data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out.data[nc * ho * wo..(nc + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// Reverse-mode sweep seeded with `seed` at `output`.
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape, self.value(output).shape, "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = self.params.zeros_like();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv3x3 { x, w, b } => {
                    let xv = self.value(x);
                    let [n, cin, h, wd] = xv.shape;
                    let hw = h * wd;
                    let wt = self.params.get(w);
                    let cout = wt.shape[0];
                    let need_dx = self.rg(x);
                    let mut cols = vec![0.0; cin * 9 * hw];
                    let mut dcols = vec![0.0; cin * 9 * hw];
                    let mut dx = need_dx.then(|| Tensor::zeros(xv.shape));
                    for i in 0..n {
                        let go = &g.data[i * cout * hw..(i + 1) * cout * hw];
                        for (co, plane) in go.chunks_exact(hw).enumerate() {
                            pgrads[b.0].data[co] += plane.iter().sum::<f64>();
                        }
                        im2col3(&xv.data[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut cols);
                        gemm_nt_acc(cout, hw, cin * 9, go, &cols, &mut pgrads[w.0].data);
                        if let Some(dx) = dx.as_mut() {
                            gemm_tn(cin * 9, cout, hw, &wt.data, go, 0.0, &mut dcols);
                            col2im3_acc(&dcols, cin, h, wd, &mut dx.data[i * cin * hw..(i + 1) * cin * hw]);
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(x);
                    let (n, k) = (xv.shape[0], xv.shape[1] * xv.plane());
                    let wt = self.params.get(w);
                    let m = wt.shape[0];
                    for row in g.data.chunks_exact(m) {
                        for (acc, v) in pgrads[b.0].data.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    gemm_tn(m, n, k, &g.data, &xv.data, 1.0, &mut pgrads[w.0].data);
                    if self.rg(x) {
                        let mut dx = Tensor::zeros(xv.shape);
                        gemm(n, m, k, &g.data, &wt.data, 0.0, &mut dx.data);
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Silu { x } => {
                    if self.rg(x) {
                        let xv = self.value(x);
                        let data = xv
                            .data
                            .iter()
                            .zip(&g.data)
                            .map(|(&v, &gv)| {
                                let s = sigmoid(v);
                                gv * s * (1.0 + v * (1.0 - s))
                            })
                            .collect();
                        accumulate(&mut grads, x, Tensor::from_vec(xv.shape, data));
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Film { x, scale, shift } => {
                    let xv = self.value(x);
                    let sc = self.value(scale);
                    let [n, c, _, _] = xv.shape;
                    let hw = xv.plane();
                    let mut dsc = Tensor::zeros([n, c, 1, 1]);
                    let mut dsh = Tensor::zeros([n, c, 1, 1]);
                    let mut dx = Tensor::zeros(xv.shape);
                    for nc in 0..n * c {
                        let gp = &g.data[nc * hw..(nc + 1) * hw];
                        let xp = &xv.data[nc * hw..(nc + 1) * hw];
                        let gain = 1.0 + sc.data[nc];
                        let mut s_gx = 0.0;
                        let mut s_g = 0.0;
                        for ((d, &gv), &v) in dx.data[nc * hw..(nc + 1) * hw].iter_mut().zip(gp).zip(xp) {
                            *d = gv * gain;
                            s_gx += gv * v;
                            s_g += gv;
                        }
                        dsc.data[nc] = s_gx;
                        dsh.data[nc] = s_g;
                    }
                    if self.rg(x) {
                        accumulate(&mut grads, x, dx);
                    }
                    if self.rg(scale) {
                        accumulate(&mut grads, scale, dsc);
                    }
                    if self.rg(shift) {
                        accumulate(&mut grads, shift, dsh);
                    }
                }
                Op::AvgPool2 { x } => {
                    if self.rg(x) {
                        let [n, c, h, w] = self.value(x).shape;
                        let (ho, wo) = (h / 2, w / 2);
                        let mut dx = Tensor::zeros([n, c, h, w]);
                        for nc in 0..n * c {
                            let gp = &g.data[nc * ho * wo..(nc + 1) * ho * wo];
                            let d = &mut dx.data[nc * h * w..(nc + 1) * h * w];
                            for y in 0..h {
                                for xx in 0..w {
                                    d[y * w + xx] = 0.25 * gp[(y / 2) * wo + xx / 2];
                                }
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Upsample2 { x } => {
                    if self.rg(x) {
                        let [n, c, h, w] = self.value(x).shape;
                        let wo = 2 * w;
                        let mut dx = Tensor::zeros([n, c, h, w]);
                        for nc in 0..n * c {
                            let gp = &g.data[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                            let d = &mut dx.data[nc * h * w..(nc + 1) * h * w];
                            for y in 0..h {
                                for xx in 0..w {
                                    let i = 2 * y * wo + 2 * xx;
                                    d[y * w + xx] = gp[i] + gp[i + 1] + gp[i + wo] + gp[i + wo + 1];
                                }
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
            }
        }
        Gradients {
            params: pgrads,
            nodes: grads,
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
