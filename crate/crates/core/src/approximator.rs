//! Multilayer perceptrons over a flat parameter vector.
//!
//! Parameters are laid out layer by layer; each layer stores its weight
//! matrix row-major as `[fan_out x fan_in]` followed by its `fan_out` biases.
//! Hidden layers use `tanh`; the output layer is affine followed by the
//! configured [`OutputTransform`].
//!
//! Reverse-mode gradients and forward-mode directional derivatives are both
//! implemented here so that natural-gradient machinery can be assembled from
//! Jacobian-vector and vector-Jacobian products without materializing any
//! Jacobian.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LogoError, Result};

/// Magic prefix of a serialized network checkpoint.
pub const NET_MAGIC: &[u8] = b"LOGO-NET-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputTransform {
    Identity,
    Sigmoid,
}

/// Architecture descriptor of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
    pub output_transform: OutputTransform,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        output_dim: usize,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_layers.contains(&0) {
            return Err(LogoError::config(format!(
                "all layer widths must be >= 1 (input {input_dim}, hidden {hidden_layers:?}, output {output_dim})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_layers,
            activation: Activation::Tanh,
            output_dim,
            output_transform,
        })
    }

    /// `(fan_in, fan_out)` for every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in self.hidden_layers.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    /// FNV-1a hash over the architecture; binds a parameter vector to its spec.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.input_dim as u64);
        feed(self.hidden_layers.len() as u64);
        for &w in &self.hidden_layers {
            feed(w as u64);
        }
        feed(self.output_dim as u64);
        feed(match self.output_transform {
            OutputTransform::Identity => 0,
            OutputTransform::Sigmoid => 1,
        });
        h
    }

    fn widest(&self) -> usize {
        self.hidden_layers
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(1)
    }
}

/// Flat real-valued parameter vector bound to one [`MlpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    spec_fingerprint: u64,
}

impl FlatParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            spec_fingerprint: spec.fingerprint(),
        }
    }

    pub fn from_vec(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(LogoError::config(format!(
                "parameter vector has length {} but the architecture needs {}",
                values.len(),
                spec.param_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LogoError::numeric_at("non-finite parameter", i));
        }
        Ok(Self {
            values,
            spec_fingerprint: spec.fingerprint(),
        })
    }

    /// Orthogonal initialization: gain sqrt(2) on hidden layers, 0.01 on the
    /// output layer, zero biases.
    pub fn init_orthogonal<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        Self::init_orthogonal_with_gain(spec, 0.01, rng)
    }

    pub fn init_orthogonal_with_gain<R: Rng + ?Sized>(
        spec: &MlpSpec,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut values = Vec::with_capacity(spec.param_count());
        let dims = spec.layer_dims();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let gain = if l + 1 == dims.len() {
                output_gain
            } else {
                std::f64::consts::SQRT_2
            };
            let w = orthogonal(fan_out, fan_in, rng);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    values.push(gain * w[(r, c)]);
                }
            }
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            values,
            spec_fingerprint: spec.fingerprint(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spec_fingerprint(&self) -> u64 {
        self.spec_fingerprint
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Replaces the values in place, keeping the spec binding.
    pub fn set(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(LogoError::config(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn is_bound_to(&self, spec: &MlpSpec) -> bool {
        self.spec_fingerprint == spec.fingerprint() && self.values.len() == spec.param_count()
    }
}

/// Returns `params + scale * direction` as a new vector.
pub fn axpy_params(params: &FlatParams, direction: &[f64], scale: f64) -> Result<FlatParams> {
    if direction.len() != params.len() {
        return Err(LogoError::config(format!(
            "direction has length {} but parameters have length {}",
            direction.len(),
            params.len()
        )));
    }
    let values = params
        .values
        .iter()
        .zip(direction)
        .map(|(p, d)| p + scale * d)
        .collect();
    Ok(FlatParams {
        values,
        spec_fingerprint: params.spec_fingerprint,
    })
}

fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let (m, n) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(m, n, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign correction makes the distribution uniform over orthogonal matrices.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col *= -1.0;
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

fn check_bound(spec: &MlpSpec, params: &FlatParams) -> Result<()> {
    if !params.is_bound_to(spec) {
        return Err(LogoError::config(
            "parameter vector is not bound to this architecture",
        ));
    }
    Ok(())
}

fn check_input(spec: &MlpSpec, input: &[f64]) -> Result<()> {
    if input.len() != spec.input_dim {
        return Err(LogoError::config(format!(
            "input has dimension {} but the network expects {}",
            input.len(),
            spec.input_dim
        )));
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Layer activations recorded during a forward pass.
///
/// `layers[0]` is the input, `layers[l]` for `0 < l < L` are post-`tanh`
/// hidden activations and `layers[L]` is the final output after the
/// output transform.
#[derive(Debug, Clone)]
struct Trace {
    layers: Vec<Vec<f64>>,
}

fn affine(w: &[f64], fan_in: usize, fan_out: usize, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let bias = &w[fan_in * fan_out..];
    for (j, row) in w[..fan_in * fan_out].chunks_exact(fan_in).enumerate() {
        let mut z = bias[j];
        for (wi, xi) in row.iter().zip(x) {
            z += wi * xi;
        }
        out.push(z);
    }
}

fn forward_trace(spec: &MlpSpec, w: &[f64], input: &[f64]) -> Trace {
    let dims = spec.layer_dims();
    let mut layers = Vec::with_capacity(dims.len() + 1);
    layers.push(input.to_vec());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let n = (fan_in + 1) * fan_out;
        let mut z = Vec::with_capacity(fan_out);
        affine(&w[offset..offset + n], fan_in, fan_out, &layers[l], &mut z);
        offset += n;
        if l + 1 < dims.len() {
            z.iter_mut().for_each(|v| *v = v.tanh());
        } else if spec.output_transform == OutputTransform::Sigmoid {
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        layers.push(z);
    }
    Trace { layers }
}

/// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
fn backward(spec: &MlpSpec, w: &[f64], trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
    let dims = spec.layer_dims();
    let n_layers = dims.len();
    let mut offsets = Vec::with_capacity(n_layers);
    let mut acc = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push(acc);
        acc += (fan_in + 1) * fan_out;
    }

    // delta holds d(loss)/d(pre-activation) of the current layer.
    let out = &trace.layers[n_layers];
    let mut delta: Vec<f64> = match spec.output_transform {
        OutputTransform::Identity => d_out.to_vec(),
        OutputTransform::Sigmoid => d_out
            .iter()
            .zip(out)
            .map(|(g, s)| g * s * (1.0 - s))
            .collect(),
    };
    let mut next = Vec::with_capacity(spec.widest());
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = dims[l];
        let off = offsets[l];
        let x = &trace.layers[l];
        let (gw, gb) = grad[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
        for (j, &dj) in delta.iter().enumerate() {
            gb[j] += dj;
            if dj != 0.0 {
                for (g, xi) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(x) {
                    *g += dj * xi;
                }
            }
        }
        if l == 0 {
            break;
        }
        next.clear();
        next.resize(fan_in, 0.0);
        let wl = &w[off..off + fan_in * fan_out];
        for (j, &dj) in delta.iter().enumerate() {
            if dj != 0.0 {
                for (n, wji) in next.iter_mut().zip(&wl[j * fan_in..(j + 1) * fan_in]) {
                    *n += wji * dj;
                }
            }
        }
        // tanh' = 1 - a^2 on the hidden activation feeding layer l.
        for (n, a) in next.iter_mut().zip(x) {
            *n *= 1.0 - a * a;
        }
        std::mem::swap(&mut delta, &mut next);
    }
}

/// Evaluates the network on one input.
pub fn forward(params: &FlatParams, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    check_bound(spec, params)?;
    check_input(spec, input)?;
    Ok(forward_trace(spec, params.as_slice(), input)
        .layers
        .pop()
        .unwrap_or_default())
}

/// Gradient of a per-sample decomposable batch loss.
///
/// `loss(i, output)` returns the loss contribution of sample `i` together
/// with its derivative with respect to the network output (after the output
/// transform). The total loss is the sum of the contributions; callers that
/// want a mean scale inside the closure.
pub fn gradient<I, F>(
    params: &FlatParams,
    spec: &MlpSpec,
    inputs: I,
    mut loss: F,
) -> Result<(f64, Vec<f64>)>
where
    I: IntoIterator,
    I::Item: AsRef<[f64]>,
    F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
{
    check_bound(spec, params)?;
    let w = params.as_slice();
    let mut grad = vec![0.0; w.len()];
    let mut total = 0.0;
    for (i, input) in inputs.into_iter().enumerate() {
        let input = input.as_ref();
        check_input(spec, input)?;
        let trace = forward_trace(spec, w, input);
        let (value, d_out) = loss(i, trace.layers.last().map(Vec::as_slice).unwrap_or(&[]));
        if !value.is_finite() || d_out.iter().any(|g| !g.is_finite()) {
            return Err(LogoError::numeric_at("non-finite loss", i));
        }
        if d_out.len() != spec.output_dim {
            return Err(LogoError::config(format!(
                "loss derivative has length {} but the network has {} outputs",
                d_out.len(),
                spec.output_dim
            )));
        }
        total += value;
        backward(spec, w, &trace, &d_out, &mut grad);
    }
    Ok((total, grad))
}

/// Forward-mode derivative: returns the output and its directional
/// derivative `J v` with respect to the parameters along `v`.
pub fn jvp(
    params: &FlatParams,
    spec: &MlpSpec,
    input: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_bound(spec, params)?;
    check_input(spec, input)?;
    if v.len() != params.len() {
        return Err(LogoError::config("tangent length differs from parameter count"));
    }
    Ok(jvp_raw(spec, params.as_slice(), input, v))
}

pub(crate) fn jvp_raw(spec: &MlpSpec, w: &[f64], input: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dims = spec.layer_dims();
    let mut x = input.to_vec();
    let mut dx = vec![0.0; input.len()];
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let n = (fan_in + 1) * fan_out;
        let wl = &w[offset..offset + n];
        let vl = &v[offset..offset + n];
        offset += n;
        let mut z = Vec::with_capacity(fan_out);
        let mut dz = Vec::with_capacity(fan_out);
        for j in 0..fan_out {
            let row = &wl[j * fan_in..(j + 1) * fan_in];
            let vrow = &vl[j * fan_in..(j + 1) * fan_in];
            let mut zj = wl[fan_in * fan_out + j];
            let mut dzj = vl[fan_in * fan_out + j];
            for i in 0..fan_in {
                zj += row[i] * x[i];
                dzj += vrow[i] * x[i] + row[i] * dx[i];
            }
            z.push(zj);
            dz.push(dzj);
        }
        if l + 1 < dims.len() {
            for (zj, dzj) in z.iter_mut().zip(dz.iter_mut()) {
                let a = zj.tanh();
                *dzj *= 1.0 - a * a;
                *zj = a;
            }
        } else if spec.output_transform == OutputTransform::Sigmoid {
            for (zj, dzj) in z.iter_mut().zip(dz.iter_mut()) {
                let s = sigmoid(*zj);
                *dzj *= s * (1.0 - s);
                *zj = s;
            }
        }
        x = z;
        dx = dz;
    }
    (x, dx)
}

/// Vector-Jacobian product `u^T J` for one input, accumulated into `grad`.
pub(crate) fn vjp_accumulate(
    spec: &MlpSpec,
    w: &[f64],
    input: &[f64],
    u: &[f64],
    grad: &mut [f64],
) {
    let trace = forward_trace(spec, w, input);
    backward(spec, w, &trace, u, grad);
}

pub(crate) fn forward_raw(spec: &MlpSpec, w: &[f64], input: &[f64]) -> Vec<f64> {
    forward_trace(spec, w, input).layers.pop().unwrap_or_default()
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Serializes a network checkpoint: magic, architecture, then little-endian
/// `f64` parameters in flat order.
pub fn encode_checkpoint(spec: &MlpSpec, params: &FlatParams) -> Result<Vec<u8>> {
    check_bound(spec, params)?;
    let mut out = Vec::with_capacity(NET_MAGIC.len() + 32 + 8 * params.len());
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&(spec.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(spec.hidden_layers.len() as u32).to_le_bytes());
    for &w in &spec.hidden_layers {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.output_dim as u32).to_le_bytes());
    out.push(match spec.activation {
        Activation::Tanh => 0,
    });
    out.push(match spec.output_transform {
        OutputTransform::Identity => 0,
        OutputTransform::Sigmoid => 1,
    });
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Little-endian byte reader over a checkpoint buffer.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LogoError::Format {
                line: 0,
                message: format!("checkpoint truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

fn format_err(message: impl Into<String>) -> LogoError {
    LogoError::Format {
        line: 0,
        message: message.into(),
    }
}

pub(crate) fn decode_checkpoint_from(reader: &mut ByteReader<'_>) -> Result<(MlpSpec, FlatParams)> {
    if reader.take(NET_MAGIC.len())? != NET_MAGIC {
        return Err(format_err("missing LOGO-NET-1 magic"));
    }
    let input_dim = reader.u32()? as usize;
    let n_hidden = reader.u32()? as usize;
    let mut hidden = Vec::with_capacity(n_hidden.min(64));
    for _ in 0..n_hidden {
        hidden.push(reader.u32()? as usize);
    }
    let output_dim = reader.u32()? as usize;
    if reader.u8()? != 0 {
        return Err(format_err("unknown activation code"));
    }
    let transform = match reader.u8()? {
        0 => OutputTransform::Identity,
        1 => OutputTransform::Sigmoid,
        c => return Err(format_err(format!("unknown output transform code {c}"))),
    };
    let spec = MlpSpec::new(input_dim, hidden, output_dim, transform)?;
    let n = reader.u64()? as usize;
    if n != spec.param_count() {
        return Err(format_err(format!(
            "checkpoint declares {n} parameters, architecture needs {}",
            spec.param_count()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(reader.f64()?);
    }
    let params = FlatParams::from_vec(&spec, values)?;
    Ok((spec, params))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MlpSpec, FlatParams)> {
    let mut reader = ByteReader::new(bytes);
    let out = decode_checkpoint_from(&mut reader)?;
    if !reader.remaining().is_empty() {
        return Err(format_err("trailing bytes after network checkpoint"));
    }
    Ok(out)
}
