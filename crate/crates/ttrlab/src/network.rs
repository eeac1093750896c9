//! Finite-width multilayer perceptrons with optional per-layer low-rank
//! adapters, forward tracing, and exact backpropagation per parameter group.
//!
//! A network with layer dims `n0..nL` applies `y(l) = s_l·(W(l)x + (α/r)·B(l)A(l)x) [+ b]`
//! followed by the activation on every layer except the last. `s_l` is 1 under
//! the standard parameterization and `1/√fan_in` under the NTK
//! parameterization (where weights are drawn at absolute per-entry variance
//! `k`, the forward scaling carrying the fan-in factor).

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::linalg::{self, derive_seed, InitDistribution, InitSpec, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at a pre-activation value. ReLU'(0) is defined as 0 so the
    /// derivative Grams are deterministic.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Standard,
    /// Scales each layer's output by `1/√fan_in`; weights are drawn at
    /// absolute variance `k` instead of `k/fan_in`.
    Ntk,
}

impl Parameterization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Parameterization::Standard),
            "ntk" => Ok(Parameterization::Ntk),
            other => Err(Error::Config(format!("unknown parameterization '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Parameterization::Standard => "standard",
            Parameterization::Ntk => "ntk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
    pub weight_init: InitSpec,
    pub parameterization: Parameterization,
}

impl NetworkSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, weight_init: InitSpec) -> Self {
        NetworkSpec {
            layer_dims,
            activation,
            use_bias: false,
            weight_init,
            parameterization: Parameterization::Standard,
        }
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn with_bias(mut self, b: bool) -> Self {
        self.use_bias = b;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("need at least input and output dims".into()));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all layer dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Low-rank adapter configuration for a set of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub adapted_layers: Vec<usize>,
    pub rank: usize,
    pub a_init: InitSpec,
    pub b_init: InitSpec,
    /// Scaling numerator; the update enters the forward pass as `(α/r)·BA`.
    pub alpha: f64,
    pub freeze_a: bool,
    /// When true (the usual LoRA practice) all base weights are frozen. When
    /// false, only the adapted layers' base weights freeze and the remaining
    /// layers stay trainable, which is the shared-layer setting used by the
    /// single-adapted-layer kernel comparisons.
    pub freeze_base: bool,
    /// Permit `rank == fan_in` even when it exceeds the layer's output dim
    /// (full-rank studies).
    pub allow_full_rank: bool,
}

impl LoraConfig {
    pub fn new(adapted_layers: Vec<usize>, rank: usize, a_init: InitSpec) -> Self {
        LoraConfig {
            adapted_layers,
            rank,
            a_init,
            b_init: InitSpec::zero(),
            alpha: rank as f64,
            freeze_a: false,
            freeze_base: true,
            allow_full_rank: false,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_freeze_a(mut self, f: bool) -> Self {
        self.freeze_a = f;
        self
    }

    pub fn with_freeze_base(mut self, f: bool) -> Self {
        self.freeze_base = f;
        self
    }

    pub fn with_b_init(mut self, b: InitSpec) -> Self {
        self.b_init = b;
        self
    }

    pub fn with_full_rank(mut self, allow: bool) -> Self {
        self.allow_full_rank = allow;
        self
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Instantiated adapter on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
    pub train_a: bool,
    pub train_b: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Matrix,
    pub bias: Option<Vec<f64>>,
    /// Forward output scale (1 or 1/√fan_in).
    pub scale: f64,
    pub train_w: bool,
    pub adapter: Option<Adapter>,
}

impl Layer {
    fn fan_in(&self) -> usize {
        self.w.cols()
    }

    fn fan_out(&self) -> usize {
        self.w.rows()
    }

    /// `W_eff ᵀ d` where `W_eff = W + (α/r)BA`, without materializing `BA`.
    fn effective_t_matvec(&self, d: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.w.matvec_transposed(d)?;
        if let Some(ad) = &self.adapter {
            let bt_d = ad.b.matvec_transposed(d)?;
            let at_btd = ad.a.matvec_transposed(&bt_d)?;
            for (o, v) in out.iter_mut().zip(at_btd) {
                *o += ad.scale * v;
            }
        }
        Ok(out)
    }
}

/// Per-input forward record: pre-activations, post-activations, and the
/// low-rank intermediates `A·x` where present. Traces carry enough of their
/// network's shape to evaluate the analytic kernel recursions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: Vec<f64>,
    /// `y(l)` per layer.
    pub pre: Vec<Vec<f64>>,
    /// `σ(y(l))` per layer; on the last layer the activation is not applied
    /// and this equals `y(L-1)`.
    pub post: Vec<Vec<f64>>,
    /// `A(l)·x(l)` for adapted layers.
    pub lora_mid: Vec<Option<Vec<f64>>>,
    pub activation: Activation,
    pub parameterization: Parameterization,
    pub layer_dims: Vec<usize>,
    pub layer_scales: Vec<f64>,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.pre.len()
    }

    /// Input fed into layer `l` (raw input for `l = 0`).
    pub fn layer_input(&self, l: usize) -> &[f64] {
        if l == 0 {
            &self.input
        } else {
            &self.post[l - 1]
        }
    }

    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("trace has at least one layer")
    }

    /// `σ̇` evaluated at layer `l`'s pre-activations.
    pub fn act_deriv(&self, l: usize) -> Vec<f64> {
        self.pre[l].iter().map(|&y| self.activation.deriv(y)).collect()
    }
}

/// Exact gradients of one scalar (an output coordinate or a loss) with
/// respect to every parameter group. Frozen groups are reported as zero
/// matrices so that inner products over all groups equal inner products over
/// trainable groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: Matrix,
    pub bias: Option<Vec<f64>>,
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
}

impl GradientRecord {
    /// Inner product over all parameter groups.
    pub fn dot(&self, other: &GradientRecord) -> f64 {
        let mut acc = 0.0;
        for (x, y) in self.layers.iter().zip(&other.layers) {
            acc += linalg::dot(x.w.as_slice(), y.w.as_slice());
            if let (Some(bx), Some(by)) = (&x.bias, &y.bias) {
                acc += linalg::dot(bx, by);
            }
            if let (Some(ax), Some(ay)) = (&x.a, &y.a) {
                acc += linalg::dot(ax.as_slice(), ay.as_slice());
            }
            if let (Some(bx), Some(by)) = (&x.b, &y.b) {
                acc += linalg::dot(bx.as_slice(), by.as_slice());
            }
        }
        acc
    }

    pub fn sq_norm(&self) -> f64 {
        self.dot(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

/// Build a base network, optionally attaching adapters.
pub fn build(spec: &NetworkSpec, lora: Option<&LoraConfig>) -> Result<Network> {
    let net = Network::build_base(spec)?;
    match lora {
        Some(cfg) => net.attach_lora(cfg),
        None => Ok(net),
    }
}

impl Network {
    /// Build the base (full fine-tuning) network; every weight trainable.
    pub fn build_base(spec: &NetworkSpec) -> Result<Network> {
        spec.validate()?;
        let dims = &spec.layer_dims;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let seed = derive_seed(spec.weight_init.seed, l as u64);
            let w = match spec.parameterization {
                Parameterization::Standard => {
                    sample_wrapped(n_out, n_in, &spec.weight_init.with_seed(seed), None)?
                }
                Parameterization::Ntk => {
                    // absolute variance k; forward scaling carries 1/fan_in
                    sample_wrapped(n_out, n_in, &spec.weight_init.with_seed(seed), Some(spec.weight_init.scale))?
                }
            };
            let scale = match spec.parameterization {
                Parameterization::Standard => 1.0,
                Parameterization::Ntk => 1.0 / (n_in as f64).sqrt(),
            };
            layers.push(Layer {
                w,
                bias: spec.use_bias.then(|| vec![0.0; n_out]),
                scale,
                train_w: true,
                adapter: None,
            });
        }
        Ok(Network { spec: spec.clone(), layers })
    }

    /// Clone this network and attach low-rank adapters per `cfg`. Base
    /// weights are shared bit-for-bit with `self`; adapted layers' weights
    /// freeze, and the other layers freeze iff `cfg.freeze_base`.
    pub fn attach_lora(&self, cfg: &LoraConfig) -> Result<Network> {
        if cfg.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if cfg.adapted_layers.is_empty() {
            return Err(Error::Config("no adapted layers given".into()));
        }
        if !(cfg.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", cfg.alpha)));
        }
        let mut net = self.clone();
        for layer in net.layers.iter_mut() {
            layer.train_w = !cfg.freeze_base;
        }
        for &l in &cfg.adapted_layers {
            if l >= net.layers.len() {
                return Err(Error::Config(format!(
                    "adapted layer {l} out of range (network has {} layers)",
                    net.layers.len()
                )));
            }
            let (n_in, n_out) = (net.layers[l].fan_in(), net.layers[l].fan_out());
            let cap = n_in.min(n_out);
            if cfg.rank > cap && !(cfg.allow_full_rank && cfg.rank == n_in) {
                return Err(Error::Config(format!(
                    "rank {} exceeds min({n_in},{n_out}) on layer {l} (set allow_full_rank for r = fan_in)",
                    cfg.rank
                )));
            }
            let a_seed = derive_seed(cfg.a_init.seed, l as u64);
            let b_seed = derive_seed(cfg.b_init.seed, l as u64);
            let a = linalg::sample_matrix(cfg.rank, n_in, &cfg.a_init.with_seed(a_seed))?;
            let b = linalg::sample_matrix(n_out, cfg.rank, &cfg.b_init.with_seed(b_seed))?;
            net.layers[l].train_w = false;
            net.layers[l].adapter = Some(Adapter {
                a,
                b,
                scale: cfg.scaling(),
                train_a: !cfg.freeze_a,
                train_b: true,
            });
        }
        Ok(net)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.spec.layer_dims.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ActivationTrace)> {
        if x.len() != self.input_dim() {
            return Err(Error::Dim(format!(
                "input length {} vs n0 = {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers);
        let mut lora_mid = Vec::with_capacity(n_layers);
        let mut h: Vec<f64> = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.w.matvec(&h)?;
            let mid = match &layer.adapter {
                Some(ad) => {
                    let ax = ad.a.matvec(&h)?;
                    let bax = ad.b.matvec(&ax)?;
                    for (yy, v) in y.iter_mut().zip(bax) {
                        *yy += ad.scale * v;
                    }
                    Some(ax)
                }
                None => None,
            };
            if layer.scale != 1.0 {
                for yy in y.iter_mut() {
                    *yy *= layer.scale;
                }
            }
            if let Some(b) = &layer.bias {
                for (yy, bb) in y.iter_mut().zip(b) {
                    *yy += bb;
                }
            }
            let activated = if l + 1 < n_layers {
                y.iter().map(|&v| self.spec.activation.apply(v)).collect()
            } else {
                y.clone()
            };
            pre.push(y);
            lora_mid.push(mid);
            h = activated.clone();
            post.push(activated);
        }
        let out = pre.last().unwrap().clone();
        Ok((
            out,
            ActivationTrace {
                input: x.to_vec(),
                pre,
                post,
                lora_mid,
                activation: self.spec.activation,
                parameterization: self.spec.parameterization,
                layer_dims: self.spec.layer_dims.clone(),
                layer_scales: self.layers.iter().map(|l| l.scale).collect(),
            },
        ))
    }

    /// Backpropagated sensitivities: `deltas[l]` is the gradient of
    /// `Σ_k out_grad[k]·y(L−1,k)` with respect to layer `l`'s pre-activation.
    pub fn backprop_deltas(&self, trace: &ActivationTrace, out_grad: &[f64]) -> Result<Vec<Vec<f64>>> {
        if out_grad.len() != self.output_dim() {
            return Err(Error::Dim(format!(
                "output gradient length {} vs n_L = {}",
                out_grad.len(),
                self.output_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut deltas = vec![Vec::new(); n_layers];
        let mut d = out_grad.to_vec();
        for l in (0..n_layers).rev() {
            deltas[l] = d.clone();
            if l == 0 {
                break;
            }
            let layer = &self.layers[l];
            let mut back = layer.effective_t_matvec(&d)?;
            if layer.scale != 1.0 {
                for b in back.iter_mut() {
                    *b *= layer.scale;
                }
            }
            let dpre: Vec<f64> =
                trace.pre[l - 1].iter().map(|&y| self.spec.activation.deriv(y)).collect();
            d = back.iter().zip(dpre).map(|(&b, s)| b * s).collect();
        }
        Ok(deltas)
    }

    /// Per-layer delta vectors for a single output coordinate.
    pub fn output_deltas(&self, trace: &ActivationTrace, k: usize) -> Result<Vec<Vec<f64>>> {
        if k >= self.output_dim() {
            return Err(Error::Dim(format!("output index {k} vs n_L = {}", self.output_dim())));
        }
        let mut e = vec![0.0; self.output_dim()];
        e[k] = 1.0;
        self.backprop_deltas(trace, &e)
    }

    /// Materialize the gradient record for the scalar whose layer deltas are
    /// given. Frozen groups come back as zeros.
    pub fn gradients_from_deltas(&self, trace: &ActivationTrace, deltas: &[Vec<f64>]) -> GradientRecord {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = trace.layer_input(l);
            let d = &deltas[l];
            let s = layer.scale;
            let w = if layer.train_w {
                Matrix::from_fn(layer.fan_out(), layer.fan_in(), |i, j| s * d[i] * x[j])
            } else {
                Matrix::zeros(layer.fan_out(), layer.fan_in())
            };
            let bias = layer.bias.as_ref().map(|_| {
                if layer.train_w {
                    d.clone()
                } else {
                    vec![0.0; layer.fan_out()]
                }
            });
            let (a, b) = match &layer.adapter {
                Some(ad) => {
                    let r = ad.a.rows();
                    let mid = trace.lora_mid[l].as_ref().expect("adapter layer has intermediate");
                    let ga = if ad.train_a {
                        let btd = ad.b.matvec_transposed(d).expect("shape checked");
                        Matrix::from_fn(r, layer.fan_in(), |i, j| s * ad.scale * btd[i] * x[j])
                    } else {
                        Matrix::zeros(r, layer.fan_in())
                    };
                    let gb = if ad.train_b {
                        Matrix::from_fn(layer.fan_out(), r, |i, j| s * ad.scale * d[i] * mid[j])
                    } else {
                        Matrix::zeros(layer.fan_out(), r)
                    };
                    (Some(ga), Some(gb))
                }
                None => (None, None),
            };
            layers.push(LayerGrads { w, bias, a, b });
        }
        GradientRecord { layers }
    }

    /// Exact gradients of output coordinate `k` for every parameter group.
    pub fn grad_output_k(&self, x: &[f64], k: usize) -> Result<GradientRecord> {
        let (_, trace) = self.forward(x)?;
        let deltas = self.output_deltas(&trace, k)?;
        Ok(self.gradients_from_deltas(&trace, &deltas))
    }

    /// Gradient record of a loss with output-space gradient `g`.
    pub fn grad_loss(&self, trace: &ActivationTrace, g: &[f64]) -> Result<GradientRecord> {
        let deltas = self.backprop_deltas(trace, g)?;
        Ok(self.gradients_from_deltas(trace, &deltas))
    }

    /// Total number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        let mut n = 0;
        for layer in &self.layers {
            if layer.train_w {
                n += layer.w.rows() * layer.w.cols();
                if let Some(b) = &layer.bias {
                    n += b.len();
                }
            }
            if let Some(ad) = &layer.adapter {
                if ad.train_a {
                    n += ad.a.rows() * ad.a.cols();
                }
                if ad.train_b {
                    n += ad.b.rows() * ad.b.cols();
                }
            }
        }
        n
    }

    /// Flatten trainable parameters in a fixed order (layers ascending; per
    /// layer W, bias, adapter A, adapter B — trainable groups only).
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for layer in &self.layers {
            if layer.train_w {
                out.extend_from_slice(layer.w.as_slice());
                if let Some(b) = &layer.bias {
                    out.extend_from_slice(b);
                }
            }
            if let Some(ad) = &layer.adapter {
                if ad.train_a {
                    out.extend_from_slice(ad.a.as_slice());
                }
                if ad.train_b {
                    out.extend_from_slice(ad.b.as_slice());
                }
            }
        }
        out
    }

    /// Inverse of [`flatten_trainable`](Self::flatten_trainable): a copy of
    /// this network with its trainable groups replaced by `params`.
    pub fn unflatten_trainable(&self, params: &[f64]) -> Result<Network> {
        if params.len() != self.trainable_len() {
            return Err(Error::Dim(format!(
                "parameter vector length {} vs trainable size {}",
                params.len(),
                self.trainable_len()
            )));
        }
        let mut net = self.clone();
        let mut pos = 0;
        for layer in net.layers.iter_mut() {
            if layer.train_w {
                let n = layer.w.rows() * layer.w.cols();
                layer.w.as_mut_slice().copy_from_slice(&params[pos..pos + n]);
                pos += n;
                if let Some(b) = &mut layer.bias {
                    let n = b.len();
                    b.copy_from_slice(&params[pos..pos + n]);
                    pos += n;
                }
            }
            if let Some(ad) = &mut layer.adapter {
                if ad.train_a {
                    let n = ad.a.rows() * ad.a.cols();
                    ad.a.as_mut_slice().copy_from_slice(&params[pos..pos + n]);
                    pos += n;
                }
                if ad.train_b {
                    let n = ad.b.rows() * ad.b.cols();
                    ad.b.as_mut_slice().copy_from_slice(&params[pos..pos + n]);
                    pos += n;
                }
            }
        }
        Ok(net)
    }

    /// Serialize to the versioned plain-text blob. Entries are hex-encoded
    /// IEEE-754 bit patterns, so the round trip is bit-exact.
    pub fn save_text(&self) -> String {
        let mut s = String::new();
        s.push_str("ttrlab-net v1\n");
        s.push_str("dims");
        for d in &self.spec.layer_dims {
            let _ = write!(s, " {d}");
        }
        s.push('\n');
        let _ = writeln!(s, "activation {}", self.spec.activation.name());
        let _ = writeln!(s, "parameterization {}", self.spec.parameterization.name());
        let _ = writeln!(s, "bias {}", u8::from(self.spec.use_bias));
        let _ = writeln!(
            s,
            "init {} {:016x} {}",
            self.spec.weight_init.distribution.name(),
            self.spec.weight_init.scale.to_bits(),
            self.spec.weight_init.seed
        );
        for (l, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "layer {l} trainable {} scale {:016x}",
                u8::from(layer.train_w),
                layer.scale.to_bits()
            );
            write_matrix(&mut s, "w", &layer.w);
            if let Some(b) = &layer.bias {
                s.push_str("bvec");
                for v in b {
                    let _ = write!(s, " {:016x}", v.to_bits());
                }
                s.push('\n');
            }
            if let Some(ad) = &layer.adapter {
                let _ = writeln!(
                    s,
                    "adapter scale {:016x} train_a {} train_b {}",
                    ad.scale.to_bits(),
                    u8::from(ad.train_a),
                    u8::from(ad.train_b)
                );
                write_matrix(&mut s, "a", &ad.a);
                write_matrix(&mut s, "b", &ad.b);
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn load_text(text: &str) -> Result<Network> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Io("empty network blob".into()))?;
        if header != "ttrlab-net v1" {
            return Err(Error::Io(format!("unexpected header '{header}'")));
        }
        let dims_line = next_line(&mut lines)?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims")
            .ok_or_else(|| Error::Io("missing dims".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Io(e.to_string())))
            .collect::<Result<_>>()?;
        let activation = Activation::parse(field(&next_line(&mut lines)?, "activation")?)?;
        let parameterization = Parameterization::parse(field(&next_line(&mut lines)?, "parameterization")?)?;
        let use_bias = field(&next_line(&mut lines)?, "bias")? == "1";
        let init_line = next_line(&mut lines)?;
        let toks: Vec<&str> = init_line.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "init" {
            return Err(Error::Io(format!("bad init line '{init_line}'")));
        }
        let weight_init = InitSpec {
            distribution: InitDistribution::parse(toks[1])?,
            scale: f64::from_bits(parse_hex(toks[2])?),
            seed: toks[3].parse().map_err(|_| Error::Io("bad seed".into()))?,
        };
        let spec = NetworkSpec {
            layer_dims: dims.clone(),
            activation,
            use_bias,
            weight_init,
            parameterization,
        };
        spec.validate()?;

        let mut layers = Vec::new();
        let mut pending: Option<String> = None;
        for l in 0..dims.len() - 1 {
            let line = match pending.take() {
                Some(p) => p,
                None => next_line(&mut lines)?,
            };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 6 || toks[0] != "layer" || toks[1] != l.to_string() {
                return Err(Error::Io(format!("bad layer line '{line}'")));
            }
            let train_w = toks[3] == "1";
            let scale = f64::from_bits(parse_hex(toks[5])?);
            let w = read_matrix(&mut lines, "w")?;
            if w.rows() != dims[l + 1] || w.cols() != dims[l] {
                return Err(Error::Io(format!("layer {l} weight shape mismatch")));
            }
            let mut bias = None;
            let mut adapter = None;
            loop {
                let Some(peek) = lines.next() else { break };
                if peek.starts_with("bvec") {
                    let vals: Vec<f64> = peek
                        .split_whitespace()
                        .skip(1)
                        .map(|t| parse_hex(t).map(f64::from_bits))
                        .collect::<Result<_>>()?;
                    bias = Some(vals);
                } else if peek.starts_with("adapter") {
                    let t: Vec<&str> = peek.split_whitespace().collect();
                    if t.len() != 7 {
                        return Err(Error::Io(format!("bad adapter line '{peek}'")));
                    }
                    let scale = f64::from_bits(parse_hex(t[2])?);
                    let train_a = t[4] == "1";
                    let train_b = t[6] == "1";
                    let a = read_matrix(&mut lines, "a")?;
                    let b = read_matrix(&mut lines, "b")?;
                    adapter = Some(Adapter { a, b, scale, train_a, train_b });
                } else {
                    pending = Some(peek.to_string());
                    break;
                }
            }
            layers.push(Layer { w, bias, scale, train_w, adapter });
        }
        Ok(Network { spec, layers })
    }
}

fn sample_wrapped(rows: usize, cols: usize, spec: &InitSpec, abs_variance: Option<f64>) -> Result<Matrix> {
    match abs_variance {
        None => linalg::sample_matrix(rows, cols, spec),
        Some(v) => match spec.distribution {
            InitDistribution::Zero | InitDistribution::Identity => linalg::sample_matrix(rows, cols, spec),
            d => linalg::sample_with_variance(rows, cols, d, v, spec.seed),
        },
    }
}

fn write_matrix(s: &mut String, tag: &str, m: &Matrix) {
    let _ = writeln!(s, "{tag} {} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            let _ = write!(s, "{:016x}", v.to_bits());
            first = false;
        }
        s.push('\n');
    }
}

fn read_matrix<'a>(lines: &mut impl Iterator<Item = &'a str>, tag: &str) -> Result<Matrix> {
    let head = lines.next().ok_or_else(|| Error::Io(format!("missing {tag} matrix header")))?;
    let toks: Vec<&str> = head.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != tag {
        return Err(Error::Io(format!("bad matrix header '{head}'")));
    }
    let rows: usize = toks[1].parse().map_err(|_| Error::Io("bad rows".into()))?;
    let cols: usize = toks[2].parse().map_err(|_| Error::Io("bad cols".into()))?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines.next().ok_or_else(|| Error::Io("truncated matrix".into()))?;
        for tok in line.split_whitespace() {
            data.push(f64::from_bits(parse_hex(tok)?));
        }
    }
    Matrix::from_row_major(rows, cols, data)
}

fn next_line<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<String> {
    lines.next().map(|s| s.to_string()).ok_or_else(|| Error::Io("truncated network blob".into()))
}

fn field<'b>(line: &'b str, key: &str) -> Result<&'b str> {
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| Error::Io(format!("expected '{key} ...', got '{line}'")))
}

fn parse_hex(tok: &str) -> Result<u64> {
    u64::from_str_radix(tok, 16).map_err(|e| Error::Io(format!("bad hex f64 '{tok}': {e}")))
}

/// Loss functions used throughout training and Fisher computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    CrossEntropy,
    Mse,
}

impl Loss {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "ce" => Ok(Loss::CrossEntropy),
            "mse" => Ok(Loss::Mse),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Loss::CrossEntropy => "cross-entropy",
            Loss::Mse => "mse",
        }
    }
}

/// Training target: a class index or a regression vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Vector(Vec<f64>),
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of the loss with respect to the network output.
///
/// Cross-entropy returns `softmax(output) − onehot(label)`; MSE returns
/// `output − target` (a class target is one-hot encoded).
pub fn loss_grad_output(output: &[f64], target: &Target, loss: Loss) -> Result<Vec<f64>> {
    match loss {
        Loss::CrossEntropy => {
            let Target::Class(c) = target else {
                return Err(Error::Config("cross-entropy needs a class label".into()));
            };
            if *c >= output.len() {
                return Err(Error::Config(format!(
                    "label {c} out of range for {} outputs",
                    output.len()
                )));
            }
            let mut g = softmax(output);
            g[*c] -= 1.0;
            Ok(g)
        }
        Loss::Mse => {
            let t = target_vector(target, output.len())?;
            Ok(output.iter().zip(t).map(|(&o, t)| o - t).collect())
        }
    }
}

/// Loss value matching [`loss_grad_output`] (MSE uses the ½‖·‖² convention).
pub fn loss_value(output: &[f64], target: &Target, loss: Loss) -> Result<f64> {
    match loss {
        Loss::CrossEntropy => {
            let Target::Class(c) = target else {
                return Err(Error::Config("cross-entropy needs a class label".into()));
            };
            if *c >= output.len() {
                return Err(Error::Config(format!(
                    "label {c} out of range for {} outputs",
                    output.len()
                )));
            }
            let z = softmax(output);
            let p = z[*c];
            if p.is_nan() {
                return Ok(f64::NAN);
            }
            Ok(-p.max(f64::MIN_POSITIVE).ln())
        }
        Loss::Mse => {
            let t = target_vector(target, output.len())?;
            Ok(0.5 * output.iter().zip(t).map(|(&o, t)| (o - t) * (o - t)).sum::<f64>())
        }
    }
}

fn target_vector(target: &Target, n: usize) -> Result<Vec<f64>> {
    match target {
        Target::Vector(v) => {
            if v.len() != n {
                return Err(Error::Dim(format!("target length {} vs output {}", v.len(), n)));
            }
            Ok(v.clone())
        }
        Target::Class(c) => {
            if *c >= n {
                return Err(Error::Config(format!("label {c} out of range for {n} outputs")));
            }
            let mut v = vec![0.0; n];
            v[*c] = 1.0;
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::InitSpec;

    fn small_spec(dims: Vec<usize>, act: Activation, seed: u64) -> NetworkSpec {
        NetworkSpec::new(dims, act, InitSpec::kaiming(1.0 / 3.0, seed))
    }

    #[test]
    fn forward_identity_weights() {
        let spec = NetworkSpec {
            layer_dims: vec![3, 3, 3],
            activation: Activation::Identity,
            use_bias: false,
            weight_init: InitSpec::new(InitDistribution::Identity, 1.0, 0),
            parameterization: Parameterization::Standard,
        };
        let net = Network::build_base(&spec).unwrap();
        let x = vec![0.3, -1.2, 2.5];
        let (out, _) = net.forward(&x).unwrap();
        for (o, xi) in out.iter().zip(&x) {
            assert_eq!(o, xi);
        }
    }

    #[test]
    fn forward_single_layer_is_wx() {
        let spec = small_spec(vec![4, 3], Activation::Relu, 5);
        let net = Network::build_base(&spec).unwrap();
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let (out, _) = net.forward(&x).unwrap();
        let expect = net.layers[0].w.matvec(&x).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn forward_two_layer_oracle() {
        // straight-line recomputation with explicit loops
        let spec = small_spec(vec![3, 5, 2], Activation::Tanh, 11);
        let net = Network::build_base(&spec).unwrap();
        let x = vec![0.2, -0.7, 1.1];
        let (out, trace) = net.forward(&x).unwrap();
        let w0 = &net.layers[0].w;
        let w1 = &net.layers[1].w;
        let mut h = vec![0.0; 5];
        for i in 0..5 {
            for j in 0..3 {
                h[i] += w0.get(i, j) * x[j];
            }
        }
        let a: Vec<f64> = h.iter().map(|&v| v.tanh()).collect();
        let mut o = vec![0.0; 2];
        for i in 0..2 {
            for j in 0..5 {
                o[i] += w1.get(i, j) * a[j];
            }
        }
        for (u, v) in out.iter().zip(&o) {
            assert!((u - v).abs() < 1e-15);
        }
        assert_eq!(trace.pre.len(), 2);
        assert_eq!(trace.layer_input(1), a.as_slice());
    }

    #[test]
    fn lora_b_zero_matches_base_forward() {
        let spec = small_spec(vec![6, 16, 16, 3], Activation::Relu, 21);
        let base = Network::build_base(&spec).unwrap();
        let cfg = LoraConfig::new(vec![1], 4, InitSpec::kaiming(1.0 / 3.0, 77));
        let lora = base.attach_lora(&cfg).unwrap();
        for s in 0..8u64 {
            let x = linalg::sample_std_normal_vec(6, 1000 + s);
            let (o1, _) = base.forward(&x).unwrap();
            let (o2, _) = lora.forward(&x).unwrap();
            for (a, b) in o1.iter().zip(&o2) {
                assert!((a - b).abs() <= 1e-15, "B=0 forward must match base");
            }
        }
    }

    #[test]
    fn lora_full_rank_identity_a_delta_is_scaled_b() {
        // r = fan_in, A = I: ΔW = (α/r)·B
        let spec = small_spec(vec![4, 4, 2], Activation::Identity, 3);
        let base = Network::build_base(&spec).unwrap();
        let mut cfg = LoraConfig::new(vec![0], 4, InitSpec::new(InitDistribution::Identity, 1.0, 0))
            .with_b_init(InitSpec::kaiming(1.0, 9))
            .with_alpha(8.0);
        cfg.allow_full_rank = true;
        let lora = base.attach_lora(&cfg).unwrap();
        let ad = lora.layers[0].adapter.as_ref().unwrap();
        // with x = e_0 the layer-0 pre-activation shift is (α/r)·B·A·e_0 = 2·B[:,0]
        let x = vec![1.0, 0.0, 0.0, 0.0];
        let (_, t_base) = base.forward(&x).unwrap();
        let (_, t_lora) = lora.forward(&x).unwrap();
        for i in 0..4 {
            let d = t_lora.pre[0][i] - t_base.pre[0][i];
            assert!((d - 2.0 * ad.b.get(i, 0)).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_validation() {
        let spec = small_spec(vec![4, 8, 2], Activation::Relu, 1);
        let base = Network::build_base(&spec).unwrap();
        // head layer is 2x8: rank 4 > min = 2 must fail
        let cfg = LoraConfig::new(vec![1], 4, InitSpec::kaiming(1.0, 2));
        assert!(matches!(base.attach_lora(&cfg), Err(Error::Config(_))));
        // r = fan_in allowed with the full-rank flag
        let cfg = LoraConfig::new(vec![1], 8, InitSpec::kaiming(1.0, 2)).with_full_rank(true);
        assert!(base.attach_lora(&cfg).is_ok());
    }

    #[test]
    fn a_gradient_zero_at_b_zero() {
        let spec = small_spec(vec![5, 12, 12, 3], Activation::Relu, 8);
        let base = Network::build_base(&spec).unwrap();
        let lora = base
            .attach_lora(&LoraConfig::new(vec![1], 4, InitSpec::kaiming(1.0 / 3.0, 13)))
            .unwrap();
        let x = linalg::sample_std_normal_vec(5, 3);
        for k in 0..3 {
            let g = lora.grad_output_k(&x, k).unwrap();
            let ga = g.layers[1].a.as_ref().unwrap();
            assert!(ga.as_slice().iter().all(|&v| v == 0.0), "A-gradient must be literally zero at B=0");
        }
    }

    #[test]
    fn last_layer_w_gradient_structure() {
        let spec = small_spec(vec![4, 6, 3], Activation::Relu, 17);
        let net = Network::build_base(&spec).unwrap();
        let x = linalg::sample_std_normal_vec(4, 5);
        let (_, trace) = net.forward(&x).unwrap();
        let k = 1;
        let g = net.grad_output_k(&x, k).unwrap();
        let gw = &g.layers[1].w;
        let hidden = trace.layer_input(1);
        for i in 0..3 {
            for j in 0..6 {
                let expect = if i == k { hidden[j] } else { 0.0 };
                assert!((gw.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // every parameter group on dims <= (8,16,16,4), incl. LoRA groups
        let spec = small_spec(vec![8, 16, 16, 4], Activation::Tanh, 31);
        let base = Network::build_base(&spec).unwrap();
        let cfg = LoraConfig::new(vec![1], 3, InitSpec::kaiming(0.5, 3))
            .with_b_init(InitSpec::kaiming(0.2, 4))
            .with_alpha(6.0)
            .with_freeze_base(false);
        let net = base.attach_lora(&cfg).unwrap();
        let x = linalg::sample_std_normal_vec(8, 44);
        let k = 2;
        let analytic = net.grad_output_k(&x, k).unwrap();
        let h = 1e-5;
        let rel = |num: f64, ana: f64| (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);

        let mut probe = net.clone();
        for l in 0..probe.layers.len() {
            if probe.layers[l].train_w {
                for i in 0..probe.layers[l].w.rows() {
                    for j in 0..probe.layers[l].w.cols() {
                        let orig = probe.layers[l].w.get(i, j);
                        probe.layers[l].w.set(i, j, orig + h);
                        let up = probe.forward(&x).unwrap().0[k];
                        probe.layers[l].w.set(i, j, orig - h);
                        let dn = probe.forward(&x).unwrap().0[k];
                        probe.layers[l].w.set(i, j, orig);
                        let num = (up - dn) / (2.0 * h);
                        let ana = analytic.layers[l].w.get(i, j);
                        if num.abs() + ana.abs() > 1e-10 {
                            assert!(rel(num, ana) <= 1e-5, "W[{l}][{i},{j}]: {num} vs {ana}");
                        }
                    }
                }
            }
            if probe.layers[l].adapter.is_some() {
                let (ar, ac) = {
                    let ad = probe.layers[l].adapter.as_ref().unwrap();
                    (ad.a.rows(), ad.a.cols())
                };
                for i in 0..ar {
                    for j in 0..ac {
                        let orig = probe.layers[l].adapter.as_ref().unwrap().a.get(i, j);
                        probe.layers[l].adapter.as_mut().unwrap().a.set(i, j, orig + h);
                        let up = probe.forward(&x).unwrap().0[k];
                        probe.layers[l].adapter.as_mut().unwrap().a.set(i, j, orig - h);
                        let dn = probe.forward(&x).unwrap().0[k];
                        probe.layers[l].adapter.as_mut().unwrap().a.set(i, j, orig);
                        let num = (up - dn) / (2.0 * h);
                        let ana = analytic.layers[l].a.as_ref().unwrap().get(i, j);
                        if num.abs() + ana.abs() > 1e-10 {
                            assert!(rel(num, ana) <= 1e-5, "A[{l}][{i},{j}]: {num} vs {ana}");
                        }
                    }
                }
                let (br, bc) = {
                    let ad = probe.layers[l].adapter.as_ref().unwrap();
                    (ad.b.rows(), ad.b.cols())
                };
                for i in 0..br {
                    for j in 0..bc {
                        let orig = probe.layers[l].adapter.as_ref().unwrap().b.get(i, j);
                        probe.layers[l].adapter.as_mut().unwrap().b.set(i, j, orig + h);
                        let up = probe.forward(&x).unwrap().0[k];
                        probe.layers[l].adapter.as_mut().unwrap().b.set(i, j, orig - h);
                        let dn = probe.forward(&x).unwrap().0[k];
                        probe.layers[l].adapter.as_mut().unwrap().b.set(i, j, orig);
                        let num = (up - dn) / (2.0 * h);
                        let ana = analytic.layers[l].b.as_ref().unwrap().get(i, j);
                        if num.abs() + ana.abs() > 1e-10 {
                            assert!(rel(num, ana) <= 1e-5, "B[{l}][{i},{j}]: {num} vs {ana}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn loss_gradients() {
        // mse at the optimum
        let g = loss_grad_output(&[0.4, -0.2], &Target::Vector(vec![0.4, -0.2]), Loss::Mse).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        // cross-entropy at (0,0), label 0 -> (-0.5, 0.5)
        let g = loss_grad_output(&[0.0, 0.0], &Target::Class(0), Loss::CrossEntropy).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
        // out-of-range label
        assert!(loss_grad_output(&[0.0, 0.0], &Target::Class(2), Loss::CrossEntropy).is_err());
        // finite differences of -log softmax
        let out = vec![0.3, -1.2, 0.8];
        let g = loss_grad_output(&out, &Target::Class(1), Loss::CrossEntropy).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = out.clone();
            up[i] += h;
            let mut dn = out.clone();
            dn[i] -= h;
            let lu = loss_value(&up, &Target::Class(1), Loss::CrossEntropy).unwrap();
            let ld = loss_value(&dn, &Target::Class(1), Loss::CrossEntropy).unwrap();
            let num = (lu - ld) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn ntk_width_variance_roughly_constant() {
        // doubling width keeps per-coordinate output variance stable at init
        let var_at = |width: usize| {
            let mut acc = 0.0;
            let trials = 200;
            for s in 0..trials {
                let spec = NetworkSpec::new(
                    vec![8, width, 1],
                    Activation::Relu,
                    InitSpec::new(InitDistribution::Gaussian, 1.0, 5000 + s),
                )
                .with_parameterization(Parameterization::Ntk);
                let net = Network::build_base(&spec).unwrap();
                let x = linalg::sample_std_normal_vec(8, 42);
                let (o, _) = net.forward(&x).unwrap();
                acc += o[0] * o[0];
            }
            acc / trials as f64
        };
        let v1 = var_at(128);
        let v2 = var_at(256);
        assert!((v2 / v1 - 1.0).abs() <= 0.2, "variance ratio {v2}/{v1}");
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let spec = small_spec(vec![5, 9, 4], Activation::Relu, 91).with_bias(true);
        let base = Network::build_base(&spec).unwrap();
        let net = base
            .attach_lora(&LoraConfig::new(vec![0], 2, InitSpec::kaiming(1.0, 6)).with_freeze_a(true))
            .unwrap();
        let text = net.save_text();
        let back = Network::load_text(&text).unwrap();
        assert_eq!(net, back);
        assert_eq!(text, back.save_text());
    }

    #[test]
    fn smoke_width_512_batch() {
        let spec = small_spec(vec![32, 512, 512, 2], Activation::Relu, 7);
        let net = Network::build_base(&spec).unwrap();
        for s in 0..16u64 {
            let x = linalg::sample_std_normal_vec(32, 900 + s);
            let (o, _) = net.forward(&x).unwrap();
            assert!(o.iter().all(|v| v.is_finite()));
        }
    }
}
