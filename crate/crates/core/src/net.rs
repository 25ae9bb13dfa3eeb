//! Fully connected feed-forward maps `ℝ^d → ℝ^d` with hand-written backprop.
//!
//! A network with hidden widths `(D_1, …, D_L)` is
//! `x ↦ A_{L+1} ∘ σ ∘ A_L ∘ … ∘ σ ∘ A_1(x)` with affine layers
//! `A_ℓ(ξ) = W_ℓ ξ + b_ℓ`. Weights are stored `out × in`, row-major, and
//! applied to a batch as `X · Wᵀ + b`.

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// dσ/dz given the pre-activation `z` and `apply(z)`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            _ => Err(domain_err!("unknown activation code {c}")),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(domain_err!(
                "unknown activation '{other}' (expected relu or tanh)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    /// A map `ℝ^dim → ℝ^dim`.
    pub fn new(dim: usize, hidden: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            in_dim: dim,
            hidden,
            out_dim: dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.in_dim != self.out_dim {
            return Err(shape_err!(
                "maps must be R^d -> R^d with d >= 1, got {} -> {}",
                self.in_dim,
                self.out_dim
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(shape_err!(
                "hidden widths must be non-empty and positive, got {:?}",
                self.hidden
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.in_dim);
        widths.extend(&self.hidden);
        widths.push(self.out_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| o * i + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_out × fan_in`
    pub weight: Matrix2D,
    pub bias: Vec<f64>,
}

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed)
}

/// Weights and biases of one network.
///
/// Every mutable access assigns a new identity, which [`Tape`]s record so that
/// a backward pass against modified parameters is detected.
#[derive(Clone, Debug)]
pub struct MlpParams {
    layers: Vec<Layer>,
    id: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weight: Matrix2D::zeros(fan_out, fan_in),
                bias: vec![0.0; fan_out],
            })
            .collect();
        Self {
            layers,
            id: fresh_id(),
        }
    }

    pub fn from_layers(spec: &MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        let p = Self {
            layers,
            id: fresh_id(),
        };
        p.check(spec)?;
        Ok(p)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.id = fresh_id();
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Append parameters layer by layer: weights row-major, then biases.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrite from a flat slice in [`flatten_into`](Self::flatten_into)
    /// order; returns the number of values consumed.
    pub fn assign_flat(&mut self, src: &[f64]) -> Result<usize> {
        let n = self.num_params();
        if src.len() < n {
            return Err(shape_err!(
                "flat parameter slice has {} values, need {n}",
                src.len()
            ));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&src[off..off + w.len()]);
            off += w.len();
            let b = l.bias.len();
            l.bias.copy_from_slice(&src[off..off + b]);
            off += b;
        }
        Ok(off)
    }

    fn check(&self, spec: &MlpSpec) -> Result<()> {
        let dims = spec.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(shape_err!(
                "spec has {} layers, parameters have {}",
                dims.len(),
                self.layers.len()
            ));
        }
        for (k, ((fan_in, fan_out), l)) in dims.iter().zip(&self.layers).enumerate() {
            if l.weight.shape() != (*fan_out, *fan_in) || l.bias.len() != *fan_out {
                return Err(shape_err!(
                    "layer {k}: weight {:?} bias {} but spec wants {fan_out}x{fan_in}",
                    l.weight.shape(),
                    l.bias.len()
                ));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights in `±√(6/(fan_in + fan_out))`, zero biases.
pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Result<MlpParams> {
    spec.validate()?;
    let mut params = MlpParams::zeros(spec);
    for l in params.layers_mut() {
        let (fan_out, fan_in) = l.weight.shape();
        let bound = glorot_bound(fan_in, fan_out);
        for w in l.weight.as_mut_slice() {
            *w = rng.uniform_range(-bound, bound);
        }
    }
    Ok(params)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Intermediate activations kept by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    params_id: u64,
    input: Matrix2D,
    pre: Vec<Matrix2D>,
    post: Vec<Matrix2D>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Hidden pre-activations, input side first.
    pub fn pre_activations(&self) -> &[Matrix2D] {
        &self.pre
    }
}

fn affine(x: &Matrix2D, layer: &Layer) -> Result<Matrix2D> {
    let mut z = x.matmul_t(&layer.weight)?;
    z.add_row_vector(&layer.bias)?;
    Ok(z)
}

fn check_input(spec: &MlpSpec, params: &MlpParams, x: &Matrix2D) -> Result<()> {
    params.check(spec)?;
    if x.cols() != spec.in_dim {
        return Err(shape_err!(
            "network input has {} columns, expected {}",
            x.cols(),
            spec.in_dim
        ));
    }
    Ok(())
}

pub fn forward(spec: &MlpSpec, params: &MlpParams, x: &Matrix2D) -> Result<(Matrix2D, Tape)> {
    check_input(spec, params, x)?;
    let (hidden, last) = params.layers.split_at(params.layers.len() - 1);
    let mut pre = Vec::with_capacity(hidden.len());
    let mut post: Vec<Matrix2D> = Vec::with_capacity(hidden.len());
    for layer in hidden {
        let z = affine(post.last().unwrap_or(x), layer)?;
        let mut h = z.clone();
        h.map_inplace(|v| spec.activation.apply(v));
        pre.push(z);
        post.push(h);
    }
    let y = affine(post.last().unwrap_or(x), &last[0])?;
    let tape = Tape {
        params_id: params.id,
        input: x.clone(),
        pre,
        post,
    };
    Ok((y, tape))
}

/// Forward pass without keeping a tape.
pub fn predict(spec: &MlpSpec, params: &MlpParams, x: &Matrix2D) -> Result<Matrix2D> {
    check_input(spec, params, x)?;
    let mut h = x.clone();
    let n = params.layers.len();
    for (k, layer) in params.layers.iter().enumerate() {
        h = affine(&h, layer)?;
        if k + 1 < n {
            h.map_inplace(|v| spec.activation.apply(v));
        }
    }
    Ok(h)
}

/// Gradients of `Σ upstream ⊙ y` with respect to every parameter and to the input.
pub fn backward(
    spec: &MlpSpec,
    params: &MlpParams,
    tape: &Tape,
    upstream: &Matrix2D,
) -> Result<(MlpParams, Matrix2D)> {
    params.check(spec)?;
    if tape.params_id != params.id {
        return Err(Error::Contract(
            "tape was recorded with different parameters (stale tape)".into(),
        ));
    }
    if tape.pre.len() != spec.hidden.len() {
        return Err(Error::Contract(
            "tape does not match the network depth".into(),
        ));
    }
    if upstream.shape() != (tape.input.rows(), spec.out_dim) {
        return Err(shape_err!(
            "upstream {:?} does not match forward output {:?}",
            upstream.shape(),
            (tape.input.rows(), spec.out_dim)
        ));
    }

    let n = params.layers.len();
    let mut grads = Vec::with_capacity(n);
    let mut delta = upstream.clone();
    let mut grad_x = None;
    for k in (0..n).rev() {
        let layer = &params.layers[k];
        let input = if k == 0 {
            &tape.input
        } else {
            &tape.post[k - 1]
        };
        let weight = delta.t_matmul(input)?;
        let bias = delta.column_sums();
        grads.push(Layer { weight, bias });
        let mut d_in = delta.matmul(&layer.weight)?;
        if k == 0 {
            grad_x = Some(d_in);
            break;
        }
        let (z, h) = (&tape.pre[k - 1], &tape.post[k - 1]);
        for ((d, &zv), &hv) in d_in
            .as_mut_slice()
            .iter_mut()
            .zip(z.as_slice())
            .zip(h.as_slice())
        {
            *d *= spec.activation.derivative(zv, hv);
        }
        delta = d_in;
    }
    grads.reverse();
    let grad_x = grad_x.expect("network has at least one layer");
    Ok((
        MlpParams {
            layers: grads,
            id: fresh_id(),
        },
        grad_x,
    ))
}

/// One network together with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        let params = init(&spec, rng)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, x: &Matrix2D) -> Result<(Matrix2D, Tape)> {
        forward(&self.spec, &self.params, x)
    }

    pub fn backward(&self, tape: &Tape, upstream: &Matrix2D) -> Result<(MlpParams, Matrix2D)> {
        backward(&self.spec, &self.params, tape, upstream)
    }

    pub fn predict(&self, x: &Matrix2D) -> Result<Matrix2D> {
        predict(&self.spec, &self.params, x)
    }
}

/// The learned maps `T_2, …, T_N`; `T_1` is the identity and is not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct MapEnsemble {
    maps: Vec<Mlp>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MMGE";
const CHECKPOINT_VERSION: u32 = 1;

impl MapEnsemble {
    pub fn new(maps: Vec<Mlp>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| shape_err!("an ensemble needs at least one map"))?;
        let d = first.spec.in_dim;
        for (k, m) in maps.iter().enumerate() {
            m.spec.validate()?;
            m.params.check(&m.spec)?;
            if m.spec.in_dim != d {
                return Err(shape_err!(
                    "map {k} has dimension {}, expected {d}",
                    m.spec.in_dim
                ));
            }
        }
        Ok(Self { maps })
    }

    /// `count` independently initialized maps sharing one architecture.
    pub fn init(spec: &MlpSpec, count: usize, rng: &mut Rng) -> Result<Self> {
        let maps = (0..count)
            .map(|_| Mlp::init(spec.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps)
    }

    pub fn dim(&self) -> usize {
        self.maps[0].spec.in_dim
    }

    /// Number of learned maps (N − 1).
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[Mlp] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [Mlp] {
        &mut self.maps
    }

    pub fn num_params(&self) -> usize {
        self.maps.iter().map(|m| m.params.num_params()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in &self.maps {
            m.params.flatten_into(&mut out);
        }
        out
    }

    pub fn assign_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(shape_err!(
                "ensemble has {} parameters, got {}",
                self.num_params(),
                src.len()
            ));
        }
        let mut off = 0;
        for m in &mut self.maps {
            off += m.params.assign_flat(&src[off..])?;
        }
        Ok(())
    }

    /// `[T_2(x), …, T_N(x)]`
    pub fn push_forward(&self, x: &Matrix2D) -> Result<Vec<Matrix2D>> {
        self.maps.iter().map(|m| m.predict(x)).collect()
    }

    /// Binary checkpoint, all integers and floats little-endian:
    ///
    /// ```text
    /// "MMGE" | version u32 | map count u32
    /// per map:  in_dim u32 | out_dim u32 | activation u8 (0 relu, 1 tanh)
    ///           | hidden count u32 | hidden widths u32…
    ///           | per layer: weights f64 (out×in, row-major), biases f64 (out)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.maps.len() as u32).to_le_bytes());
        for m in &self.maps {
            let s = &m.spec;
            buf.extend_from_slice(&(s.in_dim as u32).to_le_bytes());
            buf.extend_from_slice(&(s.out_dim as u32).to_le_bytes());
            buf.push(s.activation.code());
            buf.extend_from_slice(&(s.hidden.len() as u32).to_le_bytes());
            for &w in &s.hidden {
                buf.extend_from_slice(&(w as u32).to_le_bytes());
            }
            for l in m.params.layers() {
                for v in l.weight.as_slice().iter().chain(&l.bias) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Contract("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut maps = Vec::with_capacity(count);
        for _ in 0..count {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let activation = Activation::from_code(r.take(1)?[0])?;
            let n_hidden = r.u32()? as usize;
            let hidden = (0..n_hidden)
                .map(|_| r.u32().map(|w| w as usize))
                .collect::<Result<Vec<_>>>()?;
            let spec = MlpSpec {
                in_dim,
                hidden,
                out_dim,
                activation,
            };
            spec.validate()?;
            let mut layers = Vec::new();
            for (fan_in, fan_out) in spec.layer_dims() {
                let w = (0..fan_in * fan_out)
                    .map(|_| r.f64())
                    .collect::<Result<Vec<_>>>()?;
                let bias = (0..fan_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                layers.push(Layer {
                    weight: Matrix2D::from_vec(fan_out, fan_in, w)?,
                    bias,
                });
            }
            let params = MlpParams::from_layers(&spec, layers)?;
            maps.push(Mlp { spec, params });
        }
        if r.pos != bytes.len() {
            return Err(Error::Contract("trailing bytes after checkpoint".into()));
        }
        Self::new(maps)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Contract("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
