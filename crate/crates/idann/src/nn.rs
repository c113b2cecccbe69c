//! Layer zoo and manual backpropagation.
//!
//! The supported layers are the ones needed by the Table-style CNN stacks:
//! valid-padding convolution, non-overlapping max-pooling, dense, ReLU,
//! softmax / sigmoid output activations, and the gradient reversal layer
//! (identity forward, `-lambda` scaled backward).
//!
//! Everything is double precision and deterministic: identical inputs and
//! parameters produce bitwise-identical outputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// `filters` kernels of `kh x kw`, valid padding, stride 1.
    Conv { filters: usize, kh: usize, kw: usize },
    /// Non-overlapping pooling; stride equals the window size.
    MaxPool { ph: usize, pw: usize },
    /// Fully connected; flattens its input.
    Dense { units: usize },
    Relu,
    SoftmaxOutput,
    SigmoidOutput,
    /// Gradient reversal: identity in forward, `g -> -lambda * g` in backward.
    Grl,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::SoftmaxOutput => "softmax-output",
            LayerSpec::SigmoidOutput => "sigmoid-output",
            LayerSpec::Grl => "grl",
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("layer {index}: {msg}")));
        match self {
            LayerSpec::Conv { filters, kh, kw } => {
                if *filters == 0 || *kh == 0 || *kw == 0 {
                    return bad(format!("conv sizes must be positive, got ({filters},{kh},{kw})"));
                }
            }
            LayerSpec::MaxPool { ph, pw } => {
                let ok = (*ph == 2 && *pw == 2) || (*ph == 3 && *pw == 3);
                if !ok {
                    return bad(format!("pool size must be 2x2 or 3x3, got {ph}x{pw}"));
                }
            }
            LayerSpec::Dense { units } => {
                if *units == 0 {
                    return bad("dense layer needs at least one unit".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Weight, bias, and momentum-velocity tensors for one parameterized layer.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub weight: Tensor,
    pub bias: Tensor,
    pub vel_weight: Tensor,
    pub vel_bias: Tensor,
}

/// Per-layer parameters aligned with a layer stack; `None` for layers
/// without parameters.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub entries: Vec<Option<ParamEntry>>,
}

impl ParamSet {
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .map(|e| e.weight.len() + e.bias.len())
            .sum()
    }

    /// Flat view of all weights then biases, layer by layer. Used by
    /// checkpointing and the finite-difference harness.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for e in self.entries.iter().flatten() {
            out.extend_from_slice(e.weight.data());
            out.extend_from_slice(e.bias.data());
        }
        out
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let mut pos = 0;
        for e in self.entries.iter_mut().flatten() {
            for t in [&mut e.weight, &mut e.bias] {
                let n = t.len();
                if pos + n > values.len() {
                    return Err(Error::Config("flat parameter vector too short".into()));
                }
                t.data_mut().copy_from_slice(&values[pos..pos + n]);
                pos += n;
            }
        }
        if pos != values.len() {
            return Err(Error::Config("flat parameter vector too long".into()));
        }
        Ok(())
    }
}

/// Per-layer gradient tensors `(dW, db)` matching a `ParamSet`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub entries: Vec<Option<(Tensor, Tensor)>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            entries: params
                .entries
                .iter()
                .map(|e| {
                    e.as_ref()
                        .map(|p| (Tensor::zeros_like(&p.weight), Tensor::zeros_like(&p.bias)))
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                aw.add_scaled(bw, scale);
                ab.add_scaled(bb, scale);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for e in self.entries.iter_mut().flatten() {
            e.0.scale(s);
            e.1.scale(s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.entries.iter().flatten() {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }
}

/// Output shape of `layers` applied to `input_shape`.
pub fn output_shape(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        layer.validate(i)?;
        shape = layer_output_shape(layer, &shape, i)?;
    }
    Ok(shape)
}

fn layer_output_shape(layer: &LayerSpec, input: &[usize], index: usize) -> Result<Vec<usize>> {
    let bad = |msg: String| {
        Err(Error::Config(format!(
            "layer {index} ({}): {msg}",
            layer.kind_name()
        )))
    };
    match layer {
        LayerSpec::Conv { filters, kh, kw } => {
            let [h, w, _c] = require_hwc(input, index, layer)?;
            if h < *kh || w < *kw {
                return bad(format!("kernel {kh}x{kw} larger than input {h}x{w}"));
            }
            Ok(vec![h - kh + 1, w - kw + 1, *filters])
        }
        LayerSpec::MaxPool { ph, pw } => {
            let [h, w, c] = require_hwc(input, index, layer)?;
            if h < *ph || w < *pw {
                return bad(format!("pool {ph}x{pw} larger than input {h}x{w}"));
            }
            Ok(vec![h / ph, w / pw, c])
        }
        LayerSpec::Dense { units } => Ok(vec![*units]),
        LayerSpec::Relu | LayerSpec::SoftmaxOutput | LayerSpec::SigmoidOutput | LayerSpec::Grl => {
            Ok(input.to_vec())
        }
    }
}

fn require_hwc(shape: &[usize], index: usize, layer: &LayerSpec) -> Result<[usize; 3]> {
    if shape.len() != 3 {
        return Err(Error::Config(format!(
            "layer {index} ({}): expects HxWxC input, got shape {shape:?}",
            layer.kind_name()
        )));
    }
    Ok([shape[0], shape[1], shape[2]])
}

/// Glorot-style uniform initialization from the given seeded generator.
/// Velocity tensors start at zero.
pub fn init_params(
    layers: &[LayerSpec],
    input_shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<ParamSet> {
    let mut shape = input_shape.to_vec();
    let mut entries = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        layer.validate(i)?;
        let entry = match layer {
            LayerSpec::Conv { filters, kh, kw } => {
                let [_, _, c] = require_hwc(&shape, i, layer)?;
                let fan_in = kh * kw * c;
                let fan_out = kh * kw * filters;
                let weight = glorot(vec![*filters, *kh, *kw, c], fan_in, fan_out, rng);
                Some(make_entry(weight, *filters))
            }
            LayerSpec::Dense { units } => {
                let fan_in: usize = shape.iter().product();
                let weight = glorot(vec![*units, fan_in], fan_in, *units, rng);
                Some(make_entry(weight, *units))
            }
            _ => None,
        };
        entries.push(entry);
        shape = layer_output_shape(layer, &shape, i)?;
    }
    Ok(ParamSet { entries })
}

fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("glorot shape consistent")
}

fn make_entry(weight: Tensor, units: usize) -> ParamEntry {
    let bias = Tensor::zeros(vec![units]);
    ParamEntry {
        vel_weight: Tensor::zeros_like(&weight),
        vel_bias: Tensor::zeros_like(&bias),
        weight,
        bias,
    }
}

/// Intermediates cached by `forward`, consumed by `backward`.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    MaxPool { in_shape: Vec<usize>, argmax: Vec<usize> },
    Dense { input: Tensor },
    Relu { input: Tensor },
    Softmax { output: Tensor },
    Sigmoid { output: Tensor },
    Grl,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

/// Run `x` through the stack, returning the output and the cache needed
/// for `backward`. GRL layers are the identity here.
pub fn forward(layers: &[LayerSpec], params: &ParamSet, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
    if layers.len() != params.entries.len() {
        return Err(Error::Config(format!(
            "stack of {} layers given {} parameter entries",
            layers.len(),
            params.entries.len()
        )));
    }
    let mut cur = x.clone();
    let mut cache = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let (next, lc) = match layer {
            LayerSpec::Conv { filters, kh, kw } => {
                let p = param_of(params, i, layer)?;
                let out = conv_forward(&cur, &p.weight, &p.bias, *filters, *kh, *kw, i)?;
                (out, LayerCache::Conv { input: cur })
            }
            LayerSpec::MaxPool { ph, pw } => {
                let (out, argmax) = maxpool_forward(&cur, *ph, *pw, i)?;
                (
                    out,
                    LayerCache::MaxPool {
                        in_shape: cur.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerSpec::Dense { units } => {
                let p = param_of(params, i, layer)?;
                let flat = cur.clone().reshaped(vec![cur.len()])?;
                let out = dense_forward(&flat, &p.weight, &p.bias, *units, i)?;
                (out, LayerCache::Dense { input: flat })
            }
            LayerSpec::Relu => {
                let out = Tensor::new(
                    cur.shape().to_vec(),
                    cur.data().iter().map(|v| v.max(0.0)).collect(),
                )?;
                (out, LayerCache::Relu { input: cur })
            }
            LayerSpec::SoftmaxOutput => {
                let probs = crate::loss::softmax(cur.data())?;
                let out = Tensor::new(cur.shape().to_vec(), probs)?;
                (out.clone(), LayerCache::Softmax { output: out })
            }
            LayerSpec::SigmoidOutput => {
                let out = Tensor::new(
                    cur.shape().to_vec(),
                    cur.data().iter().map(|v| sigmoid(*v)).collect(),
                )?;
                (out.clone(), LayerCache::Sigmoid { output: out })
            }
            LayerSpec::Grl => (cur.clone(), LayerCache::Grl),
        };
        cache.push(lc);
        cur = next;
    }
    Ok((cur, ForwardCache { layers: cache }))
}

fn param_of<'a>(params: &'a ParamSet, index: usize, layer: &LayerSpec) -> Result<&'a ParamEntry> {
    params.entries[index].as_ref().ok_or_else(|| {
        Error::Internal(format!(
            "layer {index} ({}) has no parameters",
            layer.kind_name()
        ))
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Backpropagate `grad_out` through the stack. Returns parameter gradients
/// and the gradient with respect to the stack input. GRL layers multiply
/// the passing gradient by `-grl_lambda`.
pub fn backward(
    layers: &[LayerSpec],
    params: &ParamSet,
    cache: &ForwardCache,
    grad_out: &Tensor,
    grl_lambda: f64,
) -> Result<(Gradients, Tensor)> {
    if cache.layers.len() != layers.len() {
        return Err(Error::Internal(
            "backward cache does not match the layer stack".into(),
        ));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut g = grad_out.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        g = match (&cache.layers[i], layer) {
            (LayerCache::Conv { input }, LayerSpec::Conv { filters, kh, kw }) => {
                let p = param_of(params, i, layer)?;
                let (dw, db, dx) =
                    conv_backward(input, &p.weight, &g, *filters, *kh, *kw, i)?;
                grads.entries[i] = Some((dw, db));
                dx
            }
            (LayerCache::MaxPool { in_shape, argmax }, LayerSpec::MaxPool { .. }) => {
                let mut dx = Tensor::zeros(in_shape.clone());
                for (gv, &src) in g.data().iter().zip(argmax) {
                    dx.data_mut()[src] += gv;
                }
                dx
            }
            (LayerCache::Dense { input }, LayerSpec::Dense { units }) => {
                let p = param_of(params, i, layer)?;
                let (dw, db, dx) = dense_backward(input, &p.weight, &g, *units)?;
                grads.entries[i] = Some((dw, db));
                dx
            }
            (LayerCache::Relu { input }, LayerSpec::Relu) => Tensor::new(
                input.shape().to_vec(),
                input
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )?,
            // Full softmax Jacobian: dz_j = p_j * (g_j - <g, p>).
            (LayerCache::Softmax { output }, LayerSpec::SoftmaxOutput) => {
                let p = output.data();
                let dot: f64 = g.data().iter().zip(p).map(|(gv, pv)| gv * pv).sum();
                Tensor::new(
                    output.shape().to_vec(),
                    p.iter().zip(g.data()).map(|(pv, gv)| pv * (gv - dot)).collect(),
                )?
            }
            (LayerCache::Sigmoid { output }, LayerSpec::SigmoidOutput) => Tensor::new(
                output.shape().to_vec(),
                output
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(s, gv)| gv * s * (1.0 - s))
                    .collect(),
            )?,
            (LayerCache::Grl, LayerSpec::Grl) => grl_backward(&g, grl_lambda),
            _ => {
                return Err(Error::Internal(format!(
                    "stale cache at layer {i} ({})",
                    layer.kind_name()
                )))
            }
        };
    }
    Ok((grads, g))
}

/// `g -> -lambda * g`, elementwise, nothing else.
pub fn grl_backward(g: &Tensor, lambda: f64) -> Tensor {
    let mut out = g.clone();
    out.scale(-lambda);
    out
}

fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    filters: usize,
    kh: usize,
    kw: usize,
    index: usize,
) -> Result<Tensor> {
    let [h, w, c] = require_hwc(input.shape(), index, &LayerSpec::Conv { filters, kh, kw })?;
    let expected = vec![filters, kh, kw, c];
    if weight.shape() != expected.as_slice() {
        return Err(Error::Config(format!(
            "layer {index} (conv): weight shape {:?} does not match input channels {c}",
            weight.shape()
        )));
    }
    if h < kh || w < kw {
        return Err(Error::Config(format!(
            "layer {index} (conv): kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; oh * ow * filters];
    let row = kw * c; // contiguous span covered by one kernel row
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    // Transpose the kernel so the filter index is innermost: the per-tap
    // loop then updates `filters` independent accumulators, which the
    // compiler can vectorize (a single running dot product cannot be,
    // because strict FP addition is not reassociable).
    let mut wt_t = vec![0.0; wt.len()];
    for f in 0..filters {
        for t in 0..kh * row {
            wt_t[t * filters + f] = wt[f * kh * row + t];
        }
    }
    // Monomorphic kernels for the filter counts the stock architectures
    // use; the accumulator is then a fixed-size array the compiler fully
    // unrolls and vectorizes.
    match filters {
        8 => conv_positions::<8>(x, &wt_t, b, &mut out, h, w, c, kh, kw),
        12 => conv_positions::<12>(x, &wt_t, b, &mut out, h, w, c, kh, kw),
        32 => conv_positions::<32>(x, &wt_t, b, &mut out, h, w, c, kh, kw),
        48 => conv_positions::<48>(x, &wt_t, b, &mut out, h, w, c, kh, kw),
        64 => conv_positions::<64>(x, &wt_t, b, &mut out, h, w, c, kh, kw),
        _ => {
            let mut acc = vec![0.0; filters];
            for oy in 0..oh {
                for ox in 0..ow {
                    acc.copy_from_slice(b);
                    for dy in 0..kh {
                        let xs = &x[((oy + dy) * w + ox) * c..][..row];
                        let ws = &wt_t[dy * row * filters..][..row * filters];
                        for j in 0..row {
                            let xv = xs[j];
                            let wf = &ws[j * filters..][..filters];
                            for f in 0..filters {
                                acc[f] += xv * wf[f];
                            }
                        }
                    }
                    out[(oy * ow + ox) * filters..][..filters].copy_from_slice(&acc);
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, filters], out)
}

fn conv_positions<const F: usize>(
    x: &[f64],
    wt_t: &[f64],
    b: &[f64],
    out: &mut [f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let row = kw * c;
    let mut bias = [0.0; F];
    bias.copy_from_slice(b);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = bias;
            for dy in 0..kh {
                let xs = &x[((oy + dy) * w + ox) * c..][..row];
                let ws = &wt_t[dy * row * F..][..row * F];
                for j in 0..row {
                    let xv = xs[j];
                    let wf: &[f64; F] = ws[j * F..][..F].try_into().unwrap();
                    for f in 0..F {
                        acc[f] += xv * wf[f];
                    }
                }
            }
            out[(oy * ow + ox) * F..][..F].copy_from_slice(&acc);
        }
    }
}

fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    filters: usize,
    kh: usize,
    kw: usize,
    _index: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let row = kw * c;
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; filters];
    let mut dx = vec![0.0; input.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let gbase = (oy * ow + ox) * filters;
            for f in 0..filters {
                let gv = g[gbase + f];
                if gv == 0.0 {
                    continue;
                }
                db[f] += gv;
                let wbase = f * kh * row;
                for dy in 0..kh {
                    let xoff = ((oy + dy) * w + ox) * c;
                    let woff = wbase + dy * row;
                    let xs = &x[xoff..xoff + row];
                    let dws = &mut dw[woff..woff + row];
                    for j in 0..row {
                        dws[j] += gv * xs[j];
                    }
                    let ws = &wt[woff..woff + row];
                    let dxs = &mut dx[xoff..xoff + row];
                    for j in 0..row {
                        dxs[j] += gv * ws[j];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![filters], db)?,
        Tensor::new(vec![h, w, c], dx)?,
    ))
}

/// Non-overlapping max pool; remainder rows/columns are dropped. Ties go
/// to the lowest flat index.
fn maxpool_forward(input: &Tensor, ph: usize, pw: usize, index: usize) -> Result<(Tensor, Vec<usize>)> {
    let [h, w, c] = require_hwc(input.shape(), index, &LayerSpec::MaxPool { ph, pw })?;
    if h < ph || w < pw {
        return Err(Error::Config(format!(
            "layer {index} (maxpool): pool {ph}x{pw} larger than input {h}x{w}"
        )));
    }
    let (oh, ow) = (h / ph, w / pw);
    let x = input.data();
    let mut out = vec![0.0; oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let idx = ((oy * ph + dy) * w + ox * pw + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, argmax))
}

fn dense_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    units: usize,
    index: usize,
) -> Result<Tensor> {
    let d = input.len();
    if weight.shape() != [units, d] {
        return Err(Error::Config(format!(
            "layer {index} (dense): weight shape {:?} does not match input length {d}",
            weight.shape()
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = bias.data().to_vec();
    for (u, o) in out.iter_mut().enumerate() {
        let row = &wt[u * d..(u + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * x[j];
        }
        *o += acc;
    }
    Tensor::new(vec![units], out)
}

fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    units: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = input.len();
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut dw = vec![0.0; units * d];
    let mut dx = vec![0.0; d];
    for u in 0..units {
        let gv = g[u];
        let wrow = &wt[u * d..(u + 1) * d];
        let dwrow = &mut dw[u * d..(u + 1) * d];
        for j in 0..d {
            dwrow[j] = gv * x[j];
            dx[j] += gv * wrow[j];
        }
    }
    Ok((
        Tensor::new(vec![units, d], dw)?,
        Tensor::new(vec![units], g.to_vec())?,
        Tensor::new(vec![d], dx)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn relu_forward_clamps_negatives() {
        let layers = [LayerSpec::Relu];
        let params = ParamSet { entries: vec![None] };
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        let (y, _) = forward(&layers, &params, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn grl_forward_is_bit_identical() {
        let layers = [LayerSpec::Grl];
        let params = ParamSet { entries: vec![None] };
        let x = Tensor::from_vec(vec![0.1, -3.5, 7.25]);
        let (y, _) = forward(&layers, &params, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn grl_backward_scales_by_negative_lambda() {
        let g = Tensor::from_vec(vec![1.0, -2.0]);
        assert_eq!(grl_backward(&g, 0.1).data(), &[-0.1, 0.2]);
        assert_eq!(grl_backward(&g, 0.0).data(), &[0.0, -0.0]);
        assert_eq!(grl_backward(&g, 1.0).data(), &[-1.0, 2.0]);
    }

    #[test]
    fn model1_first_block_shape() {
        // 28x28x1 -> Conv(32,5,5) -> 24x24x32 -> MaxPool(2,2) -> 12x12x32
        let layers = [
            LayerSpec::Conv { filters: 32, kh: 5, kw: 5 },
            LayerSpec::MaxPool { ph: 2, pw: 2 },
        ];
        let shape = output_shape(&layers, &[28, 28, 1]).unwrap();
        assert_eq!(shape, vec![12, 12, 32]);
        let mut rng = substream(0, "init");
        let params = init_params(&layers, &[28, 28, 1], &mut rng).unwrap();
        let x = Tensor::zeros(vec![28, 28, 1]);
        let (y, _) = forward(&layers, &params, &x).unwrap();
        assert_eq!(y.shape(), &[12, 12, 32]);
    }

    #[test]
    fn shape_mismatch_names_offending_layer() {
        let layers = [LayerSpec::Conv { filters: 4, kh: 9, kw: 9 }];
        let err = output_shape(&layers, &[5, 5, 1]).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradients() {
        let layers = [LayerSpec::Dense { units: 3 }, LayerSpec::Relu];
        let mut rng = substream(1, "init");
        let params = init_params(&layers, &[4], &mut rng).unwrap();
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let (_, cache) = forward(&layers, &params, &x).unwrap();
        let g = Tensor::zeros(vec![3]);
        let (grads, dx) = backward(&layers, &params, &cache, &g, 0.0).unwrap();
        let (dw, db) = grads.entries[0].as_ref().unwrap();
        assert!(dw.data().iter().all(|v| *v == 0.0));
        assert!(db.data().iter().all(|v| *v == 0.0));
        assert!(dx.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        // y = Wx, dL/dW = g x^T
        let layers = [LayerSpec::Dense { units: 2 }];
        let mut rng = substream(2, "init");
        let params = init_params(&layers, &[3], &mut rng).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0, -1.0]);
        let (_, cache) = forward(&layers, &params, &x).unwrap();
        let g = Tensor::from_vec(vec![0.5, -1.5]);
        let (grads, _) = backward(&layers, &params, &cache, &g, 0.0).unwrap();
        let (dw, db) = grads.entries[0].as_ref().unwrap();
        let expected = [0.5, 1.0, -0.5, -1.5, -3.0, 1.5];
        for (a, b) in dw.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(db.data(), g.data());
    }

    #[test]
    fn maxpool_ties_route_gradient_to_first_index() {
        let layers = [LayerSpec::MaxPool { ph: 2, pw: 2 }];
        let params = ParamSet { entries: vec![None] };
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (_, cache) = forward(&layers, &params, &x).unwrap();
        let g = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let (_, dx) = backward(&layers, &params, &cache, &g, 0.0).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let layers = [
            LayerSpec::Conv { filters: 3, kh: 3, kw: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { ph: 2, pw: 2 },
            LayerSpec::Dense { units: 4 },
            LayerSpec::SoftmaxOutput,
        ];
        let mut rng = substream(3, "init");
        let params = init_params(&layers, &[8, 8, 1], &mut rng).unwrap();
        let x = {
            let mut r = substream(3, "data");
            Tensor::new(vec![8, 8, 1], (0..64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
        };
        let (y1, _) = forward(&layers, &params, &x).unwrap();
        let (y2, _) = forward(&layers, &params, &x).unwrap();
        assert_eq!(y1.data(), y2.data());
    }
}
