//! Conditional MLP denoiser with a hand-written backward pass.
//!
//! The network input is the concatenation of the data point, a learned
//! projection of sinusoidal noise-level features and a learned condition
//! embedding. Hidden layers use SiLU; the output layer is linear. The output
//! is a clean-data (x0) prediction.
//!
//! Parameters live in a flat list of slots so that optimizers, EMA and the
//! checkpoint format can treat every network uniformly:
//!
//! | slot        | shape                               |
//! |-------------|-------------------------------------|
//! | 0 time W    | `time_dim x 2*n_freqs`              |
//! | 1 time b    | `time_dim`                          |
//! | 2 embedding | `(label_count + 1) x cond_dim`      |
//! | 3 + 2l      | layer `l` weight, `out x in`        |
//! | 4 + 2l      | layer `l` bias, `out`               |
//!
//! The last embedding row is reserved for the null condition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{gemm, Real, Tensor};

const TIME_W: usize = 0;
const TIME_B: usize = 1;
const EMBED: usize = 2;
const FIRST_LAYER: usize = 3;

/// Conditioning signal for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Label(usize),
    Null,
}

impl Cond {
    pub fn label(self) -> Option<usize> {
        match self {
            Cond::Label(l) => Some(l),
            Cond::Null => None,
        }
    }
}

impl From<usize> for Cond {
    fn from(l: usize) -> Self {
        Cond::Label(l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub data_dim: usize,
    pub out_dim: usize,
    pub label_count: usize,
    pub hidden: Vec<usize>,
    pub n_freqs: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl NetConfig {
    /// The default denoiser: 4 x 128 SiLU, 8 frequencies, 16-d embeddings.
    pub fn denoiser(data_dim: usize, label_count: usize) -> Self {
        NetConfig {
            data_dim,
            out_dim: data_dim,
            label_count,
            hidden: vec![128; 4],
            n_freqs: 8,
            time_dim: 16,
            cond_dim: 16,
        }
    }

    /// A 3-layer scalar-logit discriminator on (point, condition) pairs.
    pub fn discriminator(data_dim: usize, label_count: usize) -> Self {
        NetConfig {
            data_dim,
            out_dim: 1,
            label_count,
            hidden: vec![64, 64],
            n_freqs: 8,
            time_dim: 16,
            cond_dim: 16,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    pub fn null_row(&self) -> usize {
        self.label_count
    }

    /// `(out, in)` for every dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims.push((self.out_dim, fan_in));
        dims
    }

    /// Shapes of every parameter slot, in declaration order.
    pub fn slot_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![
            vec![self.time_dim, 2 * self.n_freqs],
            vec![self.time_dim],
            vec![self.label_count + 1, self.cond_dim],
        ];
        for (out, inp) in self.layer_dims() {
            shapes.push(vec![out, inp]);
            shapes.push(vec![out]);
        }
        shapes
    }

    /// Geometrically spaced frequencies from 1 to 100 rad per unit noise level.
    pub fn frequencies(&self) -> Vec<Real> {
        match self.n_freqs {
            0 => Vec::new(),
            1 => vec![1.0],
            n => (0..n)
                .map(|k| (100.0 as Real).powf(k as Real / (n - 1) as Real))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layers must have positive width"));
        }
        Ok(())
    }
}

/// Parameters of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    config: NetConfig,
    freqs: Vec<Real>,
    slots: Vec<Tensor>,
}

/// Per-slot gradients, congruent with a [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub slots: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &NetParams) -> Self {
        Gradients {
            slots: params
                .slots
                .iter()
                .map(|s| Tensor::zeros(s.shape().to_vec()))
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, s) in self.slots.iter().enumerate() {
            s.check_finite(&format!("gradient slot {i}"))?;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.slots.iter().all(|s| s.data().iter().all(|&v| v == 0.0))
    }

    /// Flattened view in slot order.
    pub fn flat(&self) -> Vec<Real> {
        self.slots.iter().flat_map(|s| s.data().iter().copied()).collect()
    }
}

impl NetParams {
    /// Xavier-uniform weights, zero biases, `N(0, 0.02^2)` embeddings.
    pub fn init(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut slots = Vec::new();
        for (i, shape) in config.slot_shapes().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match i {
                EMBED => (0..n).map(|_| 0.02 * rng::normal(rng)).collect(),
                _ if shape.len() == 2 => {
                    let a = (6.0 / (shape[0] + shape[1]) as Real).sqrt();
                    (0..n).map(|_| rng::uniform(rng, -a, a)).collect()
                }
                _ => vec![0.0; n],
            };
            slots.push(Tensor::from_parts(shape, data));
        }
        Ok(NetParams {
            freqs: config.frequencies(),
            config,
            slots,
        })
    }

    /// All parameters zero.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let slots = config.slot_shapes().into_iter().map(Tensor::zeros).collect();
        Ok(NetParams {
            freqs: config.frequencies(),
            config,
            slots,
        })
    }

    pub(crate) fn from_slots(config: NetConfig, freqs: Vec<Real>, slots: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.slot_shapes();
        if slots.len() != shapes.len() || freqs.len() != config.n_freqs {
            return Err(Error::invalid("slot table does not match network config"));
        }
        for (s, shape) in slots.iter().zip(&shapes) {
            if s.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "NetParams::from_slots",
                    expected: shape.clone(),
                    got: s.shape().to_vec(),
                });
            }
        }
        Ok(NetParams { config, freqs, slots })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn freqs(&self) -> &[Real] {
        &self.freqs
    }

    pub fn slots(&self) -> &[Tensor] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Tensor] {
        &mut self.slots
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(Tensor::len).sum()
    }

    /// Flattened view in slot order.
    pub fn flat(&self) -> Vec<Real> {
        self.slots.iter().flat_map(|s| s.data().iter().copied()).collect()
    }

    pub fn embedding_row(&self, row: usize) -> &[Real] {
        self.slots[EMBED].row(row)
    }

    pub fn embedding_row_mut(&mut self, row: usize) -> &mut [Real] {
        self.slots[EMBED].row_mut(row)
    }

    pub fn layer_weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.slots[FIRST_LAYER + 2 * layer]
    }

    pub fn layer_bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.slots[FIRST_LAYER + 2 * layer + 1]
    }

    pub fn time_weight_mut(&mut self) -> &mut Tensor {
        &mut self.slots[TIME_W]
    }

    pub fn time_bias_mut(&mut self) -> &mut Tensor {
        &mut self.slots[TIME_B]
    }

    pub fn congruent(&self, grads: &Gradients) -> bool {
        self.slots.len() == grads.slots.len()
            && self
                .slots
                .iter()
                .zip(&grads.slots)
                .all(|(p, g)| p.shape() == g.shape())
    }

    pub fn same_shape_family(&self, other: &NetParams) -> bool {
        self.config == other.config
    }

    fn cond_row(&self, cond: Cond) -> Result<usize> {
        match cond {
            Cond::Null => Ok(self.config.null_row()),
            Cond::Label(l) if l < self.config.label_count => Ok(l),
            Cond::Label(l) => Err(Error::UnknownLabel(l)),
        }
    }

    /// Output only; no activations are retained.
    pub fn forward(&self, x: &Tensor, noise: &[Real], cond: &[Cond]) -> Result<Tensor> {
        Ok(self.forward_cached(x, noise, cond)?.output)
    }

    /// Forward pass that keeps every activation needed by [`NetParams::backward`].
    pub fn forward_cached(&self, x: &Tensor, noise: &[Real], cond: &[Cond]) -> Result<ForwardCache> {
        let cfg = &self.config;
        if !x.is_matrix() || x.cols() != cfg.data_dim {
            return Err(Error::ShapeMismatch {
                context: "net_forward input",
                expected: vec![x.rows(), cfg.data_dim],
                got: x.shape().to_vec(),
            });
        }
        let batch = x.rows();
        if noise.len() != batch || cond.len() != batch {
            return Err(Error::ShapeMismatch {
                context: "net_forward per-sample arguments",
                expected: vec![batch, batch],
                got: vec![noise.len(), cond.len()],
            });
        }
        x.check_finite("net_forward input")?;
        if let Some(t) = noise.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("noise level {t} outside [0, 1]")));
        }
        let rows = cond
            .iter()
            .map(|&c| self.cond_row(c))
            .collect::<Result<Vec<_>>>()?;

        let nf = cfg.n_freqs;
        let mut features = vec![0.0; batch * 2 * nf];
        for (b, &t) in noise.iter().enumerate() {
            let f = &mut features[b * 2 * nf..(b + 1) * 2 * nf];
            for (k, &w) in self.freqs.iter().enumerate() {
                let (s, c) = (w * t).sin_cos();
                f[k] = s;
                f[nf + k] = c;
            }
        }
        let td = cfg.time_dim;
        let mut time = vec![0.0; batch * td];
        bias_rows(&mut time, self.slots[TIME_B].data());
        gemm(batch, 2 * nf, td, &features, false, self.slots[TIME_W].data(), true, &mut time, true);

        let in_dim = cfg.input_dim();
        let dd = cfg.data_dim;
        let mut input = vec![0.0; batch * in_dim];
        for b in 0..batch {
            let dst = &mut input[b * in_dim..(b + 1) * in_dim];
            dst[..dd].copy_from_slice(x.row(b));
            dst[dd..dd + td].copy_from_slice(&time[b * td..(b + 1) * td]);
            dst[dd + td..].copy_from_slice(self.slots[EMBED].row(rows[b]));
        }

        let dims = cfg.layer_dims();
        let mut pre = Vec::with_capacity(dims.len());
        let mut post: Vec<Vec<Real>> = Vec::with_capacity(dims.len());
        let mut sig: Vec<Vec<Real>> = Vec::with_capacity(dims.len());
        for (l, &(out, fan_in)) in dims.iter().enumerate() {
            let h = if l == 0 { &input } else { &post[l - 1] };
            let mut a = vec![0.0; batch * out];
            bias_rows(&mut a, self.slots[FIRST_LAYER + 2 * l + 1].data());
            gemm(batch, fan_in, out, h, false, self.slots[FIRST_LAYER + 2 * l].data(), true, &mut a, true);
            if l + 1 < dims.len() {
                let s: Vec<Real> = a.iter().map(|&v| sigmoid(v)).collect();
                post.push(a.iter().zip(&s).map(|(&v, &g)| v * g).collect());
                sig.push(s);
            }
            pre.push(a);
        }
        let output = Tensor::from_parts(vec![batch, cfg.out_dim], pre.last().cloned().unwrap_or_default());
        output.check_finite("net_forward output")?;
        Ok(ForwardCache {
            config: cfg.clone(),
            rows,
            features,
            input,
            pre,
            post,
            sig,
            output,
        })
    }

    /// Gradients of `sum(output * upstream)` with respect to every slot, plus
    /// the gradient with respect to the data part of the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<Backward> {
        let cfg = &self.config;
        if cache.config != *cfg {
            return Err(Error::MissingCache);
        }
        cache.output.same_shape(upstream, "net_backward upstream")?;
        upstream.check_finite("net_backward upstream")?;
        let batch = cache.output.rows();
        let dims = cfg.layer_dims();
        let mut grads = Gradients::zeros_like(self);

        let mut delta = upstream.data().to_vec();
        for l in (0..dims.len()).rev() {
            let (out, fan_in) = dims[l];
            if l + 1 < dims.len() {
                for ((d, &a), &s) in delta.iter_mut().zip(&cache.pre[l]).zip(&cache.sig[l]) {
                    *d *= s * (1.0 + a * (1.0 - s));
                }
            }
            let h = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let (w_slot, b_slot) = (FIRST_LAYER + 2 * l, FIRST_LAYER + 2 * l + 1);
            gemm(out, batch, fan_in, &delta, true, h, false, grads.slots[w_slot].data_mut(), false);
            col_sums(&delta, out, grads.slots[b_slot].data_mut());
            let mut below = vec![0.0; batch * fan_in];
            gemm(batch, out, fan_in, &delta, false, self.slots[w_slot].data(), false, &mut below, false);
            delta = below;
        }

        let (dd, td, cd) = (cfg.data_dim, cfg.time_dim, cfg.cond_dim);
        let in_dim = cfg.input_dim();
        let mut d_x = Vec::with_capacity(batch * dd);
        let mut d_time = Vec::with_capacity(batch * td);
        for b in 0..batch {
            let r = &delta[b * in_dim..(b + 1) * in_dim];
            d_x.extend_from_slice(&r[..dd]);
            d_time.extend_from_slice(&r[dd..dd + td]);
            let emb = grads.slots[EMBED].row_mut(cache.rows[b]);
            for (e, &g) in emb.iter_mut().zip(&r[dd + td..dd + td + cd]) {
                *e += g;
            }
        }
        let nf2 = 2 * cfg.n_freqs;
        gemm(td, batch, nf2, &d_time, true, &cache.features, false, grads.slots[TIME_W].data_mut(), false);
        col_sums(&d_time, td, grads.slots[TIME_B].data_mut());
        grads.check_finite()?;
        Ok(Backward {
            grads,
            d_input: Tensor::from_parts(vec![batch, dd], d_x),
        })
    }
}

/// Activations retained by [`NetParams::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    config: NetConfig,
    rows: Vec<usize>,
    features: Vec<Real>,
    input: Vec<Real>,
    pre: Vec<Vec<Real>>,
    post: Vec<Vec<Real>>,
    /// `sigmoid(pre)` for the hidden layers.
    sig: Vec<Vec<Real>>,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Gradients,
    pub d_input: Tensor,
}

/// Anything that maps `(x_tau, tau, cond)` to a clean-data prediction.
///
/// Implemented by [`NetParams`]; tests implement it with closed-form oracles.
pub trait Denoiser {
    fn predict(&self, x: &Tensor, noise: &[Real], cond: &[Cond]) -> Result<Tensor>;
}

impl Denoiser for NetParams {
    fn predict(&self, x: &Tensor, noise: &[Real], cond: &[Cond]) -> Result<Tensor> {
        self.forward(x, noise, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, x: &Tensor, noise: &[Real], cond: &[Cond]) -> Result<Tensor> {
        (**self).predict(x, noise, cond)
    }
}

pub fn sigmoid(v: Real) -> Real {
    let e = (-v.abs()).exp();
    let num = if v >= 0.0 { 1.0 } else { e };
    num / (1.0 + e)
}

fn bias_rows(buf: &mut [Real], bias: &[Real]) {
    for row in buf.chunks_exact_mut(bias.len().max(1)) {
        row.copy_from_slice(bias);
    }
}

fn col_sums(m: &[Real], cols: usize, out: &mut [Real]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if cols == 0 {
        return;
    }
    for row in m.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests;
