//! Convolutional stacks: layer specs, parameter storage, forward and backward
//! passes for every layer kind the pipeline needs (conv, maxpool, relu,
//! sigmoid), plain SGD, and the text/binary on-disk formats.
//!
//! Backpropagation here is layer-wise over a fixed sequential topology, not a
//! general autograd graph. A backward pass requires the `ForwardCache`
//! produced by the matching forward pass, so "backward before forward" is
//! unrepresentable.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    MaxPool,
    Relu,
    Sigmoid,
}

/// Padding applied by conv layers. Mirror padding reflects the image at the
/// border (edge row repeated); the desk networks use zero padding inside the
/// stack and apply mirroring only at image preparation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Mirror,
}

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub in_planes: usize,
    pub out_planes: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, stride: usize, pad: usize, in_planes: usize, out_planes: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel,
            stride,
            pad,
            pad_mode: PadMode::Zero,
            in_planes,
            out_planes,
        }
    }

    pub fn conv_mirror(kernel: usize, stride: usize, pad: usize, in_planes: usize, out_planes: usize) -> LayerSpec {
        LayerSpec {
            pad_mode: PadMode::Mirror,
            ..LayerSpec::conv(kernel, stride, pad, in_planes, out_planes)
        }
    }

    /// Non-overlapping max pooling: stride is fixed equal to the kernel, so
    /// the pool kernel is exactly the stride multiplier in the overall
    /// sampling stride product.
    pub fn maxpool(kernel: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::MaxPool,
            kernel,
            stride: kernel,
            pad: 0,
            pad_mode: PadMode::Zero,
            in_planes: 0,
            out_planes: 0,
        }
    }

    pub fn relu() -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Relu,
            kernel: 0,
            stride: 0,
            pad: 0,
            pad_mode: PadMode::Zero,
            in_planes: 0,
            out_planes: 0,
        }
    }

    pub fn sigmoid() -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Sigmoid,
            kernel: 0,
            stride: 0,
            pad: 0,
            pad_mode: PadMode::Zero,
            in_planes: 0,
            out_planes: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Conv => {
                if self.kernel < 1 || self.stride < 1 {
                    return Err(Error::invalid(format!(
                        "conv kernel and stride must be >= 1, got kernel {} stride {}",
                        self.kernel, self.stride
                    )));
                }
                if self.in_planes < 1 || self.out_planes < 1 {
                    return Err(Error::invalid("conv plane counts must be >= 1".to_string()));
                }
            }
            LayerKind::MaxPool => {
                if self.kernel < 1 {
                    return Err(Error::invalid("maxpool kernel must be >= 1".to_string()));
                }
            }
            LayerKind::Relu | LayerKind::Sigmoid => {}
        }
        Ok(())
    }
}

/// Ordered layer stack plus the seed its parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub rng_seed: u64,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, rng_seed: u64) -> Result<NetworkSpec> {
        let spec = NetworkSpec { layers, rng_seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks per-layer parameters and that adjacent conv layers have
    /// compatible plane counts. The stack is fully convolutional by
    /// construction: no layer kind requires a fixed input extent.
    pub fn validate(&self) -> Result<()> {
        let mut planes: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.kind == LayerKind::Conv {
                if let Some(p) = planes {
                    if p != layer.in_planes {
                        return Err(Error::shape(format!(
                            "layer {i}: conv expects {} input planes but the previous layer emits {p}",
                            layer.in_planes
                        )));
                    }
                }
                planes = Some(layer.out_planes);
            }
        }
        Ok(())
    }

    /// Number of output planes of the final conv layer.
    pub fn out_planes(&self) -> Option<usize> {
        self.layers
            .iter()
            .rev()
            .find(|l| l.kind == LayerKind::Conv)
            .map(|l| l.out_planes)
    }

    /// Spatial output size for a given input size, or an error if some layer
    /// would produce an empty map.
    pub fn output_hw(&self, mut h: usize, mut w: usize) -> Result<(usize, usize)> {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Conv => {
                    let (k, s, p) = (layer.kernel, layer.stride, layer.pad);
                    if h + 2 * p < k || w + 2 * p < k {
                        return Err(Error::shape(format!(
                            "layer {i}: conv kernel {k} larger than padded input {h}x{w} (pad {p})"
                        )));
                    }
                    h = (h + 2 * p - k) / s + 1;
                    w = (w + 2 * p - k) / s + 1;
                }
                LayerKind::MaxPool => {
                    let k = layer.kernel;
                    if k > h || k > w {
                        return Err(Error::shape(format!(
                            "layer {i}: pool kernel {k} larger than input extent {h}x{w}"
                        )));
                    }
                    h /= k;
                    w /= k;
                }
                LayerKind::Relu | LayerKind::Sigmoid => {}
            }
        }
        Ok((h, w))
    }

    /// Line-oriented text form: a header carrying the seed, then one layer
    /// per line as `kind kernel stride pad in out`. Mirror-padded convs use
    /// the kind token `mconv`.
    pub fn to_text(&self) -> String {
        let mut out = format!("seed {}\n", self.rng_seed);
        for l in &self.layers {
            let kind = match (l.kind, l.pad_mode) {
                (LayerKind::Conv, PadMode::Zero) => "conv",
                (LayerKind::Conv, PadMode::Mirror) => "mconv",
                (LayerKind::MaxPool, _) => "maxpool",
                (LayerKind::Relu, _) => "relu",
                (LayerKind::Sigmoid, _) => "sigmoid",
            };
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                kind, l.kernel, l.stride, l.pad, l.in_planes, l.out_planes
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<NetworkSpec> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty network spec".to_string()))?;
        let seed = header
            .strip_prefix("seed ")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::Parse(format!("bad spec header: {header:?}")))?;
        let mut layers = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("bad layer line: {line:?}")));
            }
            let nums: Vec<usize> = f[1..]
                .iter()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse(format!("bad layer numbers: {line:?}")))?;
            let (kernel, stride, pad, inp, outp) = (nums[0], nums[1], nums[2], nums[3], nums[4]);
            let layer = match f[0] {
                "conv" => LayerSpec::conv(kernel, stride, pad, inp, outp),
                "mconv" => LayerSpec::conv_mirror(kernel, stride, pad, inp, outp),
                "maxpool" => LayerSpec::maxpool(kernel),
                "relu" => LayerSpec::relu(),
                "sigmoid" => LayerSpec::sigmoid(),
                other => return Err(Error::Parse(format!("unknown layer kind {other:?}"))),
            };
            layers.push(layer);
        }
        NetworkSpec::new(layers, seed)
    }
}

/// Weight and bias of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// Shape `[out_planes, in_planes, kernel, kernel]`.
    pub weight: Tensor,
    /// Shape `[out_planes]`.
    pub bias: Tensor,
}

/// Gradients aligned with `Network::params`.
pub type Gradients = Vec<Option<ConvParams>>;

/// An instantiated network: spec plus one parameter tensor set. Multi-stream
/// use applies the same `Network` to every stream, so parameter sharing holds
/// by construction.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Option<ConvParams>>,
}

fn sample_normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; u1 shifted into (0, 1] to keep the log finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Network {
    /// He-initialized parameters drawn deterministically from the spec seed.
    pub fn init(spec: NetworkSpec) -> Result<Network> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(spec.rng_seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            if layer.kind == LayerKind::Conv {
                let fan_in = (layer.in_planes * layer.kernel * layer.kernel) as f64;
                let std = (2.0 / fan_in).sqrt();
                let shape = [layer.out_planes, layer.in_planes, layer.kernel, layer.kernel];
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| sample_normal(&mut rng) * std).collect();
                params.push(Some(ConvParams {
                    weight: Tensor::from_vec(&shape, data)?,
                    bias: Tensor::zeros(&[layer.out_planes]),
                }));
            } else {
                params.push(None);
            }
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<ConvParams>] {
        &self.params
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.params
            .iter()
            .map(|p| {
                p.as_ref().map(|cp| ConvParams {
                    weight: Tensor::zeros(cp.weight.shape()),
                    bias: Tensor::zeros(cp.bias.shape()),
                })
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Flat view over all parameters (weights then bias, per conv layer in
    /// order); used by the finite-difference gradient checks.
    pub fn param_get(&self, mut idx: usize) -> f64 {
        for p in self.params.iter().flatten() {
            if idx < p.weight.len() {
                return p.weight.data()[idx];
            }
            idx -= p.weight.len();
            if idx < p.bias.len() {
                return p.bias.data()[idx];
            }
            idx -= p.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_add(&mut self, mut idx: usize, delta: f64) {
        for p in self.params.iter_mut().flatten() {
            if idx < p.weight.len() {
                p.weight.data_mut()[idx] += delta;
                return;
            }
            idx -= p.weight.len();
            if idx < p.bias.len() {
                p.bias.data_mut()[idx] += delta;
                return;
            }
            idx -= p.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat gradient lookup mirroring `param_get`.
    pub fn grad_get(grads: &Gradients, mut idx: usize) -> f64 {
        for g in grads.iter().flatten() {
            if idx < g.weight.len() {
                return g.weight.data()[idx];
            }
            idx -= g.weight.len();
            if idx < g.bias.len() {
                return g.bias.data()[idx];
            }
            idx -= g.bias.len();
        }
        panic!("gradient index out of range");
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let mut inputs = Vec::with_capacity(self.spec.layers.len());
        let mut pool_argmax: Vec<Option<Vec<usize>>> = Vec::with_capacity(self.spec.layers.len());
        let mut cur = input.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            inputs.push(cur);
            let x = inputs.last().unwrap();
            let (out, argmax) = match layer.kind {
                LayerKind::Conv => {
                    let p = self.params[i].as_ref().unwrap();
                    (conv2d(x, layer, p)?, None)
                }
                LayerKind::MaxPool => {
                    let (out, idx) = maxpool2d(x, layer.kernel)?;
                    (out, Some(idx))
                }
                LayerKind::Relu => (relu(x), None),
                LayerKind::Sigmoid => (sigmoid(x), None),
            };
            pool_argmax.push(argmax);
            cur = out;
        }
        cur.check_finite("network output")?;
        Ok((
            cur.clone(),
            ForwardCache {
                inputs,
                pool_argmax,
                output: cur,
            },
        ))
    }

    /// Propagates `grad_output` back through the cached pass, returning
    /// parameter gradients and the gradient w.r.t. the network input.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<(Gradients, Tensor)> {
        if grad_output.shape() != cache.output.shape() {
            return Err(Error::shape(format!(
                "grad shape {:?} does not match cached output {:?}",
                grad_output.shape(),
                cache.output.shape()
            )));
        }
        let mut grads = self.zero_gradients();
        let mut g = grad_output.clone();
        for i in (0..self.spec.layers.len()).rev() {
            let layer = &self.spec.layers[i];
            let x = &cache.inputs[i];
            let y = if i + 1 < cache.inputs.len() {
                &cache.inputs[i + 1]
            } else {
                &cache.output
            };
            g = match layer.kind {
                LayerKind::Conv => {
                    let p = self.params[i].as_ref().unwrap();
                    let gp = grads[i].as_mut().unwrap();
                    conv2d_backward(x, layer, p, &g, gp)?
                }
                LayerKind::MaxPool => {
                    maxpool2d_backward(x.shape(), cache.pool_argmax[i].as_ref().unwrap(), &g)
                }
                LayerKind::Relu => relu_backward(x, &g),
                LayerKind::Sigmoid => sigmoid_backward(y, &g),
            };
        }
        Ok((grads, g))
    }

    /// One plain SGD step: `p -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grads.iter()) {
            if let (Some(p), Some(g)) = (p, g) {
                for (pv, gv) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *pv -= lr * gv;
                }
                for (pv, gv) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *pv -= lr * gv;
                }
            }
        }
    }

    /// Accumulate `b` into `a` in place (same structure).
    pub fn accumulate(a: &mut Gradients, b: &Gradients) {
        for (ga, gb) in a.iter_mut().zip(b.iter()) {
            if let (Some(ga), Some(gb)) = (ga, gb) {
                for (x, y) in ga.weight.data_mut().iter_mut().zip(gb.weight.data()) {
                    *x += y;
                }
                for (x, y) in ga.bias.data_mut().iter_mut().zip(gb.bias.data()) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale_gradients(grads: &mut Gradients, factor: f64) {
        for g in grads.iter_mut().flatten() {
            for v in g.weight.data_mut() {
                *v *= factor;
            }
            for v in g.bias.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Checkpoint: every parameter tensor in layer order (weight then bias),
    /// each as a shape list followed by raw little-endian f64 values.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        for p in self.params.iter().flatten() {
            write_tensor(&mut buf, &p.weight)?;
            write_tensor(&mut buf, &p.bias)?;
        }
        crate::fsio::write_atomic(path, &buf)
    }

    pub fn load_checkpoint(spec: NetworkSpec, path: &Path) -> Result<Network> {
        let mut net = Network::init(spec)?;
        let bytes = std::fs::read(path)?;
        let mut cursor = std::io::Cursor::new(bytes);
        for (i, p) in net.params.iter_mut().enumerate() {
            if let Some(p) = p {
                let w = read_tensor(&mut cursor)?;
                let b = read_tensor(&mut cursor)?;
                if w.shape() != p.weight.shape() || b.shape() != p.bias.shape() {
                    return Err(Error::shape(format!(
                        "checkpoint layer {i}: shapes {:?}/{:?} do not match spec {:?}/{:?}",
                        w.shape(),
                        b.shape(),
                        p.weight.shape(),
                        p.bias.shape()
                    )));
                }
                p.weight = w;
                p.bias = b;
            }
        }
        let mut rest = Vec::new();
        cursor.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Parse(format!(
                "checkpoint has {} trailing bytes",
                rest.len()
            )));
        }
        Ok(net)
    }
}

/// Per-pass state captured by `Network::forward`, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    output: Tensor,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    buf.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        buf.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        buf.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(cursor: &mut std::io::Cursor<Vec<u8>>) -> Result<Tensor> {
    let mut u32buf = [0u8; 4];
    cursor.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Parse(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        cursor.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut f64buf = [0u8; 8];
    for _ in 0..n {
        cursor.read_exact(&mut f64buf)?;
        data.push(f64::from_le_bytes(f64buf));
    }
    Tensor::from_vec(&shape, data)
}

#[inline]
fn mirror_index(i: isize, n: usize) -> usize {
    // Fold into [0, n) by reflection with the edge repeated: ... 1 0 | 0 1 2
    let n = n as isize;
    let period = 2 * n;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Valid output-column range for zero padding: `0 <= ox*s + kx - p < w`.
#[inline]
fn valid_ox_range(kx: usize, s: usize, p: usize, w: usize, ow: usize) -> Option<(usize, usize)> {
    let dx = kx as isize - p as isize;
    let ox_start = if dx < 0 { ((-dx) as usize).div_ceil(s) } else { 0 };
    let max_ix = w as isize - 1 - dx;
    if max_ix < 0 || ox_start >= ow {
        return None;
    }
    let ox_end = ((max_ix as usize) / s + 1).min(ow);
    (ox_start < ox_end).then_some((ox_start, ox_end))
}

/// Valid output-row range for zero padding: `0 <= oy*s + ky - p < h`.
#[inline]
fn valid_oy_range(ky: usize, s: usize, p: usize, h: usize, oh: usize) -> Option<(usize, usize)> {
    valid_ox_range(ky, s, p, h, oh)
}

/// Cross-correlation plus bias. Output height is
/// `floor((H + 2*pad - kernel) / stride) + 1`, same for width.
pub fn conv2d(input: &Tensor, layer: &LayerSpec, params: &ConvParams) -> Result<Tensor> {
    let (planes, h, w) = input.dims3()?;
    if layer.kind != LayerKind::Conv {
        return Err(Error::invalid("conv2d called with a non-conv layer".to_string()));
    }
    if planes != layer.in_planes {
        return Err(Error::shape(format!(
            "conv2d: input has {planes} planes but the layer expects {} (input {planes}x{h}x{w})",
            layer.in_planes
        )));
    }
    let (k, s, p) = (layer.kernel, layer.stride, layer.pad);
    if h + 2 * p < k || w + 2 * p < k {
        return Err(Error::shape(format!(
            "conv2d: kernel {k} larger than padded input {h}x{w} with pad {p}"
        )));
    }
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;

    // small valid convs (the verifier's deep layers) are tap-overhead bound;
    // gathering each output's receptive vector makes them long dot products
    if layer.pad_mode == PadMode::Zero && p == 0 && s == 1 && oh * ow <= 64 {
        return conv2d_small_valid(input, layer, params, oh, ow);
    }
    let mut out = Tensor::zeros(&[layer.out_planes, oh, ow]);

    // stride-2 convs read every other column; decimating each plane into its
    // four (row, column) phases once turns those reads contiguous
    let phases: Option<Vec<Vec<f64>>> = if s == 2 && layer.pad_mode == PadMode::Zero {
        let mut all = Vec::with_capacity(layer.in_planes * 4);
        for pi in 0..layer.in_planes {
            let plane = &input.data()[pi * h * w..(pi + 1) * h * w];
            for a in 0..2usize {
                for b in 0..2usize {
                    let ha = (h - a).div_ceil(2);
                    let wb = (w - b).div_ceil(2);
                    let mut q = Vec::with_capacity(ha * wb);
                    for qy in 0..ha {
                        let row = &plane[(2 * qy + a) * w..(2 * qy + a) * w + w];
                        q.extend(row.iter().skip(b).step_by(2));
                    }
                    debug_assert_eq!(q.len(), ha * wb);
                    all.push(q);
                }
            }
        }
        Some(all)
    } else {
        None
    };

    let in_data = input.data();
    let weights = params.weight.data();
    let out_data = out.data_mut();
    for po in 0..layer.out_planes {
        let out_plane = &mut out_data[po * oh * ow..(po + 1) * oh * ow];
        let b = params.bias.data()[po];
        out_plane.fill(b);
        for pi in 0..layer.in_planes {
            let in_plane = &in_data[pi * h * w..(pi + 1) * h * w];
            let w_base = (po * layer.in_planes + pi) * k * k;
            for ky in 0..k {
                let (oy_start, oy_end) = match layer.pad_mode {
                    PadMode::Zero => match valid_oy_range(ky, s, p, h, oh) {
                        Some(r) => r,
                        None => continue,
                    },
                    PadMode::Mirror => (0, oh),
                };
                for kx in 0..k {
                    let wv = weights[w_base + ky * k + kx];
                    match layer.pad_mode {
                        PadMode::Zero => {
                            let (ox_start, ox_end) = match valid_ox_range(kx, s, p, w, ow) {
                                Some(r) => r,
                                None => continue,
                            };
                            let dx = kx as isize - p as isize;
                            let dy = ky as isize - p as isize;
                            if let Some(phases) = &phases {
                                // iy = 2*oy + dy = 2*(oy + qy_off) + a
                                let a = dy.rem_euclid(2) as usize;
                                let bph = dx.rem_euclid(2) as usize;
                                let qy_off = (dy - a as isize) / 2;
                                let qx_off = (dx - bph as isize) / 2;
                                let wb = (w - bph).div_ceil(2);
                                let q = &phases[pi * 4 + a * 2 + bph];
                                for oy in oy_start..oy_end {
                                    let qrow = ((oy as isize + qy_off) as usize) * wb;
                                    let i0 = (qrow as isize + ox_start as isize + qx_off) as usize;
                                    let irow = &q[i0..i0 + (ox_end - ox_start)];
                                    let obase = oy * ow;
                                    let orow = &mut out_plane[obase + ox_start..obase + ox_end];
                                    for (ov, iv) in orow.iter_mut().zip(irow) {
                                        *ov += wv * iv;
                                    }
                                }
                            } else {
                                for oy in oy_start..oy_end {
                                    let ibase = ((oy * s) as isize + dy) as usize * w;
                                    let obase = oy * ow;
                                    if s == 1 {
                                        let i0 = (ibase as isize + ox_start as isize + dx) as usize;
                                        let irow = &in_plane[i0..i0 + (ox_end - ox_start)];
                                        let orow = &mut out_plane[obase + ox_start..obase + ox_end];
                                        for (ov, iv) in orow.iter_mut().zip(irow) {
                                            *ov += wv * iv;
                                        }
                                    } else {
                                        let mut ix = (ibase as isize + (ox_start * s) as isize + dx)
                                            as usize;
                                        for ov in
                                            out_plane[obase + ox_start..obase + ox_end].iter_mut()
                                        {
                                            *ov += wv * in_plane[ix];
                                            ix += s;
                                        }
                                    }
                                }
                            }
                        }
                        PadMode::Mirror => {
                            for oy in 0..oh {
                                let iy = mirror_index((oy * s + ky) as isize - p as isize, h);
                                let obase = oy * ow;
                                for ox in 0..ow {
                                    let ix =
                                        mirror_index((ox * s + kx) as isize - p as isize, w);
                                    out_plane[obase + ox] += wv * in_plane[iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gathers the receptive vector of every output cell (the im2col layout);
/// each weight row is contiguous in exactly the same (pi, ky, kx) order, so
/// every output value is one long dot product.
fn gather_columns(input: &Tensor, k: usize, in_planes: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (_, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let _ = h;
    let veclen = in_planes * k * k;
    let mut col = vec![0.0; oh * ow * veclen];
    let data = input.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * veclen;
            let mut dst = base;
            for pi in 0..in_planes {
                for ky in 0..k {
                    let src = (pi * input.shape()[1] + oy + ky) * w + ox;
                    col[dst..dst + k].copy_from_slice(&data[src..src + k]);
                    dst += k;
                }
            }
        }
    }
    col
}

fn conv2d_small_valid(
    input: &Tensor,
    layer: &LayerSpec,
    params: &ConvParams,
    oh: usize,
    ow: usize,
) -> Result<Tensor> {
    let k = layer.kernel;
    let veclen = layer.in_planes * k * k;
    let col = gather_columns(input, k, layer.in_planes, oh, ow);
    let mut out = Tensor::zeros(&[layer.out_planes, oh, ow]);
    let weights = params.weight.data();
    let out_data = out.data_mut();
    for po in 0..layer.out_planes {
        let wrow = &weights[po * veclen..(po + 1) * veclen];
        let b = params.bias.data()[po];
        for c in 0..oh * ow {
            let vec = &col[c * veclen..(c + 1) * veclen];
            let mut acc = 0.0;
            for (wv, iv) in wrow.iter().zip(vec) {
                acc += wv * iv;
            }
            out_data[po * oh * ow + c] = b + acc;
        }
    }
    Ok(out)
}

fn conv2d_backward_small_valid(
    input: &Tensor,
    layer: &LayerSpec,
    params: &ConvParams,
    grad_out: &Tensor,
    grad_params: &mut ConvParams,
    oh: usize,
    ow: usize,
) -> Result<Tensor> {
    let k = layer.kernel;
    let (_, h, w) = input.dims3()?;
    let veclen = layer.in_planes * k * k;
    let col = gather_columns(input, k, layer.in_planes, oh, ow);
    let mut grad_col = vec![0.0; oh * ow * veclen];
    let weights = params.weight.data();
    let gw = grad_params.weight.data_mut();
    for po in 0..layer.out_planes {
        let wrow = &weights[po * veclen..(po + 1) * veclen];
        let gwrow = &mut gw[po * veclen..(po + 1) * veclen];
        let mut gb = 0.0;
        for c in 0..oh * ow {
            let g = grad_out.data()[po * oh * ow + c];
            gb += g;
            let vec = &col[c * veclen..(c + 1) * veclen];
            for (gwv, iv) in gwrow.iter_mut().zip(vec) {
                *gwv += g * iv;
            }
            let gvec = &mut grad_col[c * veclen..(c + 1) * veclen];
            for (gcv, wv) in gvec.iter_mut().zip(wrow) {
                *gcv += g * wv;
            }
        }
        grad_params.bias.data_mut()[po] += gb;
    }
    // scatter the column gradients back onto the input (windows overlap)
    let mut grad_in = Tensor::zeros(input.shape());
    let gin = grad_in.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * veclen;
            let mut src = base;
            for pi in 0..layer.in_planes {
                for ky in 0..k {
                    let dst = (pi * h + oy + ky) * w + ox;
                    for i in 0..k {
                        gin[dst + i] += grad_col[src + i];
                    }
                    src += k;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Backward pass of `conv2d`: accumulates weight/bias gradients into
/// `grad_params` and returns the gradient w.r.t. the input.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &LayerSpec,
    params: &ConvParams,
    grad_out: &Tensor,
    grad_params: &mut ConvParams,
) -> Result<Tensor> {
    let (_, h, w) = input.dims3()?;
    let (_, oh, ow) = grad_out.dims3()?;
    let (k, s, p) = (layer.kernel, layer.stride, layer.pad);
    if layer.pad_mode == PadMode::Zero && p == 0 && s == 1 && oh * ow <= 64 {
        return conv2d_backward_small_valid(input, layer, params, grad_out, grad_params, oh, ow);
    }
    let mut grad_in = Tensor::zeros(input.shape());

    let in_data = input.data();
    let weights = params.weight.data();
    let gout_data = grad_out.data();
    let gin_data = grad_in.data_mut();
    let gw_data = grad_params.weight.data_mut();
    for po in 0..layer.out_planes {
        let gout_plane = &gout_data[po * oh * ow..(po + 1) * oh * ow];
        grad_params.bias.data_mut()[po] += gout_plane.iter().sum::<f64>();

        for pi in 0..layer.in_planes {
            let in_plane = &in_data[pi * h * w..(pi + 1) * h * w];
            let gin_plane = &mut gin_data[pi * h * w..(pi + 1) * h * w];
            let w_base = (po * layer.in_planes + pi) * k * k;
            for ky in 0..k {
                let (oy_start, oy_end) = match layer.pad_mode {
                    PadMode::Zero => match valid_oy_range(ky, s, p, h, oh) {
                        Some(r) => r,
                        None => continue,
                    },
                    PadMode::Mirror => (0, oh),
                };
                for kx in 0..k {
                    let wv = weights[w_base + ky * k + kx];
                    let mut gw = 0.0;
                    match layer.pad_mode {
                        PadMode::Zero => {
                            let (ox_start, ox_end) = match valid_ox_range(kx, s, p, w, ow) {
                                Some(r) => r,
                                None => continue,
                            };
                            let dx = kx as isize - p as isize;
                            let dy = ky as isize - p as isize;
                            for oy in oy_start..oy_end {
                                let ibase = ((oy * s) as isize + dy) as usize * w;
                                let obase = oy * ow;
                                let grow = &gout_plane[obase + ox_start..obase + ox_end];
                                if s == 1 {
                                    let i0 = (ibase as isize + ox_start as isize + dx) as usize;
                                    let irow = &in_plane[i0..i0 + (ox_end - ox_start)];
                                    for (iv, gv) in irow.iter().zip(grow) {
                                        gw += iv * gv;
                                    }
                                    let girow = &mut gin_plane[i0..i0 + (ox_end - ox_start)];
                                    for (gi, gv) in girow.iter_mut().zip(grow) {
                                        *gi += wv * gv;
                                    }
                                } else {
                                    let mut ix =
                                        (ibase as isize + (ox_start * s) as isize + dx) as usize;
                                    for &gv in grow {
                                        gw += in_plane[ix] * gv;
                                        gin_plane[ix] += wv * gv;
                                        ix += s;
                                    }
                                }
                            }
                        }
                        PadMode::Mirror => {
                            for oy in 0..oh {
                                let iy = mirror_index((oy * s + ky) as isize - p as isize, h);
                                let obase = oy * ow;
                                for ox in 0..ow {
                                    let gv = gout_plane[obase + ox];
                                    let ix = mirror_index((ox * s + kx) as isize - p as isize, w);
                                    gw += in_plane[iy * w + ix] * gv;
                                    gin_plane[iy * w + ix] += wv * gv;
                                }
                            }
                        }
                    }
                    gw_data[w_base + ky * k + kx] += gw;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Non-overlapping max pooling with floor semantics; returns the pooled map
/// and the flat argmax index of every output cell for the backward pass.
pub fn maxpool2d(input: &Tensor, kernel: usize) -> Result<(Tensor, Vec<usize>)> {
    let (planes, h, w) = input.dims3()?;
    if kernel < 1 {
        return Err(Error::invalid("maxpool kernel must be >= 1".to_string()));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape(format!(
            "maxpool kernel {kernel} larger than input extent {h}x{w}"
        )));
    }
    let oh = h / kernel;
    let ow = w / kernel;
    let mut out = Tensor::zeros(&[planes, oh, ow]);
    let mut argmax = vec![0usize; planes * oh * ow];
    for pl in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..kernel {
                    let iy = oy * kernel + ky;
                    let row = input.row3(pl, iy);
                    for kx in 0..kernel {
                        let ix = ox * kernel + kx;
                        let v = row[ix];
                        if v > best {
                            best = v;
                            best_idx = (pl * h + iy) * w + ix;
                        }
                    }
                }
                out.set3(pl, oy, ox, best);
                argmax[(pl * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad_in = Tensor::zeros(input_shape);
    for (out_idx, &in_idx) in argmax.iter().enumerate() {
        grad_in.data_mut()[in_idx] += grad_out.data()[out_idx];
    }
    grad_in
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).unwrap()
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).unwrap()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::from_vec(input.shape(), data).unwrap()
}

/// Backward through sigmoid given the cached *output* values.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::from_vec(output.shape(), data).unwrap()
}

impl Tensor {
    /// Four-index lookup for `[a, b, c, d]` tensors (weights).
    #[inline]
    pub fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let s = self.shape();
        self.data()[((a * s[1] + b) * s[2] + c) * s[3] + d]
    }
}
