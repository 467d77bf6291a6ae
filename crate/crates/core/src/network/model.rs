use super::ops::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, col2im, gemm, im2col, relu_backward,
    relu_inplace, softmax_channels, BnCache, ConvGeom,
};
use super::{NetworkSpec, ParamSet, Shape5};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    transposed: bool,
}

#[derive(Debug, Clone, Copy)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    conv: ConvLayer,
    bn: BnLayer,
}

struct Plan {
    stem: Unit,
    down: Vec<Unit>,
    res: Vec<(Unit, Unit)>,
    up: Vec<Unit>,
    head: ConvLayer,
}

/// Walks the slot order produced by `params::layout`.
struct Cursor(usize);

impl Cursor {
    fn conv(
        &mut self,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        transposed: bool,
    ) -> ConvLayer {
        let w = self.0;
        self.0 += 2;
        ConvLayer {
            w,
            b: w + 1,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel.map(|k| k / 2),
            transposed,
        }
    }

    fn bn(&mut self) -> BnLayer {
        let g = self.0;
        self.0 += 4;
        BnLayer {
            gamma: g,
            beta: g + 1,
            mean: g + 2,
            var: g + 3,
        }
    }

    fn unit(&mut self, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], transposed: bool) -> Unit {
        let conv = self.conv(cin, cout, kernel, stride, transposed);
        Unit {
            conv,
            bn: self.bn(),
        }
    }
}

impl Plan {
    fn new(spec: &NetworkSpec) -> Self {
        let [w1, w2, w3, w4] = spec.widths();
        let mut c = Cursor(0);
        let stem = c.unit(spec.in_channels, w1, [5, 5, 5], [1, 1, 1], false);
        let down = [(w1, w2), (w2, w3), (w3, w4)]
            .into_iter()
            .map(|(i, o)| c.unit(i, o, [3, 3, 1], [2, 2, 1], false))
            .collect();
        let res = (0..spec.num_resblocks)
            .map(|_| {
                (
                    c.unit(w4, w4, [3, 3, 1], [1, 1, 1], false),
                    c.unit(w4, w4, [3, 3, 1], [1, 1, 1], false),
                )
            })
            .collect();
        let up = [(w4, w3), (w3, w2), (w2, w1)]
            .into_iter()
            .map(|(i, o)| c.unit(i, o, [3, 3, 1], [2, 2, 1], true))
            .collect();
        let head = c.conv(w1, spec.num_classes, [5, 5, 1], [1, 1, 1], false);
        Plan {
            stem,
            down,
            res,
            up,
            head,
        }
    }
}

impl ConvLayer {
    /// Geometry of the underlying regular convolution. For a transposed layer this
    /// is the strided convolution it is the adjoint of (large → small).
    fn geom(&self, in_dims: [usize; 3]) -> ConvGeom {
        if self.transposed {
            let large = [
                in_dims[0] * self.stride[0],
                in_dims[1] * self.stride[1],
                in_dims[2] * self.stride[2],
            ];
            ConvGeom::new(large, self.kernel, self.stride, self.pad)
        } else {
            ConvGeom::new(in_dims, self.kernel, self.stride, self.pad)
        }
    }

    fn out_dims(&self, in_dims: [usize; 3]) -> [usize; 3] {
        let g = self.geom(in_dims);
        if self.transposed {
            g.input
        } else {
            g.output
        }
    }

    fn forward(&self, p: &ParamSet, x: &[f32], batch: usize, in_dims: [usize; 3]) -> Vec<f32> {
        let g = self.geom(in_dims);
        let w = &p.tensors[self.w].data;
        let bias = &p.tensors[self.b].data;
        let kvol = g.kernel_volume();
        if !self.transposed {
            let (kdim, n, nin) = (self.cin * kvol, g.out_len(), g.in_len());
            let mut out = vec![0f32; batch * self.cout * n];
            let mut cols = vec![0f32; kdim * n];
            for b in 0..batch {
                im2col(&x[b * self.cin * nin..(b + 1) * self.cin * nin], self.cin, &g, &mut cols);
                let out_b = &mut out[b * self.cout * n..(b + 1) * self.cout * n];
                gemm(self.cout, kdim, n, w, (kdim as isize, 1), &cols, (n as isize, 1), 0.0, out_b);
                add_bias(out_b, bias, n);
            }
            out
        } else {
            // cin = small-side channels, cout = large-side channels.
            let (kl, ns, nl) = (self.cout * kvol, g.out_len(), g.in_len());
            let mut out = vec![0f32; batch * self.cout * nl];
            let mut cols = vec![0f32; kl * ns];
            for b in 0..batch {
                let x_b = &x[b * self.cin * ns..(b + 1) * self.cin * ns];
                gemm(kl, self.cin, ns, w, (1, kl as isize), x_b, (ns as isize, 1), 0.0, &mut cols);
                let out_b = &mut out[b * self.cout * nl..(b + 1) * self.cout * nl];
                col2im(&cols, self.cout, &g, out_b);
                add_bias(out_b, bias, nl);
            }
            out
        }
    }

    /// Accumulates weight/bias gradients; returns the input gradient when requested.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        p: &ParamSet,
        x: &[f32],
        dy: &[f32],
        batch: usize,
        in_dims: [usize; 3],
        grads: &mut [Vec<f32>],
        need_dx: bool,
    ) -> Vec<f32> {
        let g = self.geom(in_dims);
        let w = &p.tensors[self.w].data;
        let kvol = g.kernel_volume();
        let (out_len, in_len) = if self.transposed {
            (g.in_len(), g.out_len())
        } else {
            (g.out_len(), g.in_len())
        };
        {
            let db = &mut grads[self.b];
            for b in 0..batch {
                for co in 0..self.cout {
                    let s = &dy[(b * self.cout + co) * out_len..(b * self.cout + co + 1) * out_len];
                    db[co] += s.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
        }
        let mut dx = if need_dx {
            vec![0f32; batch * self.cin * in_len]
        } else {
            Vec::new()
        };
        if !self.transposed {
            let (kdim, n) = (self.cin * kvol, out_len);
            let mut cols = vec![0f32; kdim * n];
            let mut dcols = if need_dx { vec![0f32; kdim * n] } else { Vec::new() };
            for b in 0..batch {
                im2col(&x[b * self.cin * in_len..(b + 1) * self.cin * in_len], self.cin, &g, &mut cols);
                let dy_b = &dy[b * self.cout * n..(b + 1) * self.cout * n];
                gemm(self.cout, n, kdim, dy_b, (n as isize, 1), &cols, (1, n as isize), 1.0, &mut grads[self.w]);
                if need_dx {
                    gemm(kdim, self.cout, n, w, (1, kdim as isize), dy_b, (n as isize, 1), 0.0, &mut dcols);
                    col2im(&dcols, self.cin, &g, &mut dx[b * self.cin * in_len..(b + 1) * self.cin * in_len]);
                }
            }
        } else {
            let (kl, ns, nl) = (self.cout * kvol, in_len, out_len);
            let mut dcols = vec![0f32; kl * ns];
            for b in 0..batch {
                let dy_b = &dy[b * self.cout * nl..(b + 1) * self.cout * nl];
                im2col(dy_b, self.cout, &g, &mut dcols);
                let x_b = &x[b * self.cin * ns..(b + 1) * self.cin * ns];
                gemm(self.cin, ns, kl, x_b, (ns as isize, 1), &dcols, (1, ns as isize), 1.0, &mut grads[self.w]);
                if need_dx {
                    gemm(self.cin, kl, ns, w, (kl as isize, 1), &dcols, (ns as isize, 1), 0.0, &mut dx[b * self.cin * ns..(b + 1) * self.cin * ns]);
                }
            }
        }
        dx
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], n: usize) {
    for (chunk, &bv) in out.chunks_exact_mut(n).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn bn_train(p: &mut ParamSet, bn: &BnLayer, x: &mut [f32], batch: usize, ch: usize, spatial: usize) -> BnCache {
    let gamma = p.tensors[bn.gamma].data.clone();
    let beta = p.tensors[bn.beta].data.clone();
    let mut mean = std::mem::take(&mut p.tensors[bn.mean].data);
    let mut var = std::mem::take(&mut p.tensors[bn.var].data);
    let cache = batch_norm_train(x, batch, ch, spatial, &gamma, &beta, &mut mean, &mut var);
    p.tensors[bn.mean].data = mean;
    p.tensors[bn.var].data = var;
    cache
}

fn bn_eval(p: &ParamSet, bn: &BnLayer, x: &mut [f32], batch: usize, ch: usize, spatial: usize) {
    batch_norm_eval(
        x,
        batch,
        ch,
        spatial,
        &p.tensors[bn.gamma].data,
        &p.tensors[bn.beta].data,
        &p.tensors[bn.mean].data,
        &p.tensors[bn.var].data,
    );
}

/// Cached activations of one conv → BN (→ ReLU) unit.
#[derive(Debug, Default)]
struct UnitTape {
    bn: BnCache,
    out: Vec<f32>,
}

/// Everything the backward pass needs from a training forward pass.
#[derive(Debug)]
pub struct Tape {
    batch: usize,
    dims: [usize; 3],
    input: Vec<f32>,
    stem: UnitTape,
    down: Vec<UnitTape>,
    res: Vec<(UnitTape, UnitTape)>,
    up: Vec<UnitTape>,
    probs: Vec<f32>,
}

/// Result of a training-mode forward pass.
pub struct TrainStep {
    pub probs: Vec<f32>,
    pub tape: Tape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; parameters untouched.
    Eval,
}

fn check_input(spec: &NetworkSpec, shape: Shape5, len: usize) -> Result<()> {
    let [b, c, x, y, z] = shape;
    if c != spec.in_channels {
        return Err(Error::Shape(format!("{c} input channels, expected {}", spec.in_channels)));
    }
    if b == 0 || x == 0 || y == 0 || z == 0 || x % 8 != 0 || y % 8 != 0 {
        return Err(Error::Shape(format!("input {shape:?} not tileable by the 3 stride-2 stages")));
    }
    if len != b * c * x * y * z {
        return Err(Error::Shape(format!("{len} values for shape {shape:?}")));
    }
    Ok(())
}

/// Runs the network. Input layout is `(batch, 1, x, y, z)` with x fastest in memory;
/// the result is `(batch, 8, x, y, z)` softmax probabilities.
///
/// In [`Mode::Train`] batch statistics are used and the running statistics stored
/// in `params` are updated; in [`Mode::Eval`] `params` is not modified.
pub fn forward(params: &mut ParamSet, input: &[f32], shape: Shape5, mode: Mode) -> Result<Vec<f32>> {
    match mode {
        Mode::Train => Ok(forward_train(params, input, shape)?.probs),
        Mode::Eval => eval_forward(params, input, shape),
    }
}

/// Eval-mode forward pass on a shared parameter set.
pub fn eval_forward(params: &ParamSet, input: &[f32], shape: Shape5) -> Result<Vec<f32>> {
    check_input(&params.spec, shape, input.len())?;
    let plan = Plan::new(&params.spec);
    let batch = shape[0];
    let mut dims = [shape[2], shape[3], shape[4]];
    let unit = |u: &Unit, x: &[f32], dims: [usize; 3], relu: bool| {
        let mut y = u.conv.forward(params, x, batch, dims);
        let od = u.conv.out_dims(dims);
        bn_eval(params, &u.bn, &mut y, batch, u.conv.cout, od.iter().product());
        if relu {
            relu_inplace(&mut y);
        }
        (y, od)
    };
    let (mut h, d) = unit(&plan.stem, input, dims, true);
    dims = d;
    for u in &plan.down {
        (h, dims) = unit(u, &h, dims, true);
    }
    for (a, b) in &plan.res {
        let (t, _) = unit(a, &h, dims, true);
        let (mut o, _) = unit(b, &t, dims, false);
        o.iter_mut().zip(&h).for_each(|(o, s)| *o += s);
        relu_inplace(&mut o);
        h = o;
    }
    for u in &plan.up {
        (h, dims) = unit(u, &h, dims, true);
    }
    let logits = plan.head.forward(params, &h, batch, dims);
    Ok(softmax_channels(&logits, batch, params.spec.num_classes, dims.iter().product()))
}

/// Training-mode forward pass that records the tape for [`backward`].
pub fn forward_train(params: &mut ParamSet, input: &[f32], shape: Shape5) -> Result<TrainStep> {
    check_input(&params.spec, shape, input.len())?;
    let plan = Plan::new(&params.spec);
    let batch = shape[0];
    let dims0 = [shape[2], shape[3], shape[4]];
    let mut dims = dims0;

    let unit = |p: &mut ParamSet, u: &Unit, x: &[f32], dims: [usize; 3], relu: bool| {
        let mut y = u.conv.forward(p, x, batch, dims);
        let od = u.conv.out_dims(dims);
        let bn = bn_train(p, &u.bn, &mut y, batch, u.conv.cout, od.iter().product());
        if relu {
            relu_inplace(&mut y);
        }
        (UnitTape { bn, out: y }, od)
    };

    let (stem, d) = unit(params, &plan.stem, input, dims, true);
    dims = d;
    let mut down = Vec::new();
    let mut cur = stem.out.clone();
    for u in &plan.down {
        let (t, d) = unit(params, u, &cur, dims, true);
        dims = d;
        cur = t.out.clone();
        down.push(t);
    }
    let mut res: Vec<(UnitTape, UnitTape)> = Vec::new();
    for (a, b) in &plan.res {
        let (ta, _) = unit(params, a, &cur, dims, true);
        let (mut tb, _) = unit(params, b, &ta.out, dims, false);
        tb.out.iter_mut().zip(&cur).for_each(|(o, s)| *o += s);
        relu_inplace(&mut tb.out);
        cur = tb.out.clone();
        res.push((ta, tb));
    }
    let mut up = Vec::new();
    for u in &plan.up {
        let (t, d) = unit(params, u, &cur, dims, true);
        dims = d;
        cur = t.out.clone();
        up.push(t);
    }
    let logits = plan.head.forward(params, &cur, batch, dims);
    let probs = softmax_channels(&logits, batch, params.spec.num_classes, dims.iter().product());
    Ok(TrainStep {
        probs: probs.clone(),
        tape: Tape {
            batch,
            dims: dims0,
            input: input.to_vec(),
            stem,
            down,
            res,
            up,
            probs,
        },
    })
}

fn unit_backward(
    p: &ParamSet,
    u: &Unit,
    tape: &mut UnitTape,
    x: &[f32],
    mut dy: Vec<f32>,
    batch: usize,
    in_dims: [usize; 3],
    grads: &mut [Vec<f32>],
    relu: bool,
    need_dx: bool,
) -> Vec<f32> {
    if relu {
        relu_backward(&mut dy, &tape.out);
    }
    let od = u.conv.out_dims(in_dims);
    let (mut dgamma, mut dbeta) = (
        std::mem::take(&mut grads[u.bn.gamma]),
        std::mem::take(&mut grads[u.bn.beta]),
    );
    batch_norm_backward(
        &mut dy,
        &tape.bn,
        batch,
        u.conv.cout,
        od.iter().product(),
        &p.tensors[u.bn.gamma].data,
        &mut dgamma,
        &mut dbeta,
    );
    grads[u.bn.gamma] = dgamma;
    grads[u.bn.beta] = dbeta;
    u.conv.backward(p, x, &dy, batch, in_dims, grads, need_dx)
}

/// Gradient of a scalar loss w.r.t. every tensor, given the loss gradient w.r.t. the
/// output probabilities. Running-stat slots get empty vectors.
pub fn backward(params: &ParamSet, mut tape: Tape, dprobs: &[f32]) -> Vec<Vec<f32>> {
    let plan = Plan::new(&params.spec);
    let slots = super::layout(&params.spec);
    let mut grads: Vec<Vec<f32>> = slots
        .iter()
        .map(|s| if s.trainable { vec![0f32; s.len()] } else { Vec::new() })
        .collect();
    let batch = tape.batch;
    let nc = params.spec.num_classes;
    let spatial: usize = tape.dims.iter().product();

    // Softmax backward: dz_c = p_c (dp_c - Σ_j p_j dp_j)
    let mut dlogits = vec![0f32; dprobs.len()];
    for b in 0..batch {
        let base = b * nc * spatial;
        for s in 0..spatial {
            let dot: f64 = (0..nc)
                .map(|c| tape.probs[base + c * spatial + s] as f64 * dprobs[base + c * spatial + s] as f64)
                .sum();
            for c in 0..nc {
                let i = base + c * spatial + s;
                dlogits[i] = (tape.probs[i] as f64 * (dprobs[i] as f64 - dot)) as f32;
            }
        }
    }

    // Spatial extents at each stage.
    let mut stage_dims = vec![tape.dims];
    for u in &plan.down {
        let d = *stage_dims.last().unwrap();
        stage_dims.push(u.conv.out_dims(d));
    }
    let bottleneck = *stage_dims.last().unwrap();

    let up_in: Vec<Vec<f32>> = {
        let mut v = Vec::new();
        let last_res = tape
            .res
            .last()
            .map(|(_, b)| b.out.clone())
            .unwrap_or_else(|| tape.down.last().unwrap().out.clone());
        v.push(last_res);
        for t in &tape.up[..tape.up.len() - 1] {
            v.push(t.out.clone());
        }
        v
    };
    let head_in = &tape.up.last().unwrap().out;
    let mut dh = plan.head.backward(
        params,
        head_in,
        &dlogits,
        batch,
        tape.dims,
        &mut grads,
        true,
    );

    // Decoder, deepest layer last in the forward order.
    let mut up_dims = vec![bottleneck];
    for u in &plan.up {
        let d = *up_dims.last().unwrap();
        up_dims.push(u.conv.out_dims(d));
    }
    for i in (0..plan.up.len()).rev() {
        dh = unit_backward(
            params,
            &plan.up[i],
            &mut tape.up[i],
            &up_in[i],
            dh,
            batch,
            up_dims[i],
            &mut grads,
            true,
            true,
        );
    }

    // Residual blocks.
    for i in (0..plan.res.len()).rev() {
        let block_in = if i == 0 {
            tape.down.last().unwrap().out.clone()
        } else {
            tape.res[i - 1].1.out.clone()
        };
        let (ua, ub) = plan.res[i];
        let (ta, tb) = &mut tape.res[i];
        relu_backward(&mut dh, &tb.out);
        let skip = dh.clone();
        let dt = unit_backward(params, &ub, tb, &ta.out, dh, batch, bottleneck, &mut grads, false, true);
        let mut din = unit_backward(params, &ua, ta, &block_in, dt, batch, bottleneck, &mut grads, true, true);
        din.iter_mut().zip(&skip).for_each(|(d, s)| *d += s);
        dh = din;
    }

    // Encoder.
    for i in (0..plan.down.len()).rev() {
        let x = if i == 0 {
            tape.stem.out.clone()
        } else {
            tape.down[i - 1].out.clone()
        };
        dh = unit_backward(
            params,
            &plan.down[i],
            &mut tape.down[i],
            &x,
            dh,
            batch,
            stage_dims[i],
            &mut grads,
            true,
            true,
        );
    }
    let input = std::mem::take(&mut tape.input);
    unit_backward(
        params,
        &plan.stem,
        &mut tape.stem,
        &input,
        dh,
        batch,
        tape.dims,
        &mut grads,
        true,
        false,
    );
    grads
}

/// Eval-mode residual block on a bottleneck activation `(batch, 8w, x, y, z)`,
/// exposed for structural checks of the skip path.
pub fn residual_block_eval(params: &ParamSet, block: usize, x: &[f32], shape: Shape5) -> Result<Vec<f32>> {
    let plan = Plan::new(&params.spec);
    let (a, b) = plan
        .res
        .get(block)
        .ok_or_else(|| Error::Argument(format!("no residual block {block}")))?;
    let [batch, ch, nx, ny, nz] = shape;
    if ch != a.conv.cin || x.len() != batch * ch * nx * ny * nz {
        return Err(Error::Shape(format!("{shape:?} for a {}-channel block", a.conv.cin)));
    }
    let dims = [nx, ny, nz];
    let spatial = nx * ny * nz;
    let mut t = a.conv.forward(params, x, batch, dims);
    bn_eval(params, &a.bn, &mut t, batch, ch, spatial);
    relu_inplace(&mut t);
    let mut o = b.conv.forward(params, &t, batch, dims);
    bn_eval(params, &b.bn, &mut o, batch, ch, spatial);
    o.iter_mut().zip(x).for_each(|(o, s)| *o += s);
    relu_inplace(&mut o);
    Ok(o)
}

/// Spatial extent of the bottleneck activation for an input of `dims`.
pub fn bottleneck_dims(spec: &NetworkSpec, dims: [usize; 3]) -> [usize; 3] {
    let plan = Plan::new(spec);
    plan.down.iter().fold(dims, |d, u| u.conv.out_dims(d))
}
