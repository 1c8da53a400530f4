//! Discriminative CTR backbones: DNN, DCN V2 (mixture of low-rank cross
//! experts with a parallel deep branch) and target attention pooling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneKind {
    Dnn,
    Dcnv2,
    Dcnv2Ta,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [Self::Dnn, Self::Dcnv2, Self::Dcnv2Ta];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dnn => "dnn",
            Self::Dcnv2 => "dcnv2",
            Self::Dcnv2Ta => "dcnv2_ta",
        }
    }

    pub fn uses_target_attention(self) -> bool {
        self == Self::Dcnv2Ta
    }

    pub fn is_cross(self) -> bool {
        self != Self::Dnn
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}` (expected dnn, dcnv2 or dcnv2_ta)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub hidden: Vec<usize>,
    pub n_experts: usize,
    pub cross_depth: usize,
    pub cross_rank: usize,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind) -> Self {
        Self { kind, hidden: vec![256, 128], n_experts: 3, cross_depth: 3, cross_rank: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("hidden widths must be non-empty and positive: {:?}", self.hidden)));
        }
        if self.kind.is_cross() && (self.n_experts == 0 || self.cross_depth == 0 || self.cross_rank == 0) {
            return Err(Error::Config("cross network needs experts, depth and rank ≥ 1".into()));
        }
        Ok(())
    }
}

fn gaussian(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive scale");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn attach(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// `x W + b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), gaussian(in_dim, out_dim, in_dim, rng)?)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// All-zero weights and bias.
    pub fn register_zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[in_dim, out_dim]))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let w = attach(store, &format!("{name}.w"))?;
        let b = attach(store, &format!("{name}.b"))?;
        let t = store.get(w);
        Ok(Self { w, b, in_dim: t.rows(), out_dim: t.cols() })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let m = g.matmul(x, w)?;
        g.add_bias(m, b)
    }
}

/// Stack of ReLU layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn register(store: &mut ParamStore, name: &str, in_dim: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::register(store, &format!("{name}.{i}"), prev, w, rng)?);
            prev = w;
        }
        Ok(Self { layers })
    }

    pub fn attach(store: &ParamStore, name: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth).map(|i| Linear::attach(store, &format!("{name}.{i}"))).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_dim).collect()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            let z = l.forward(g, h)?;
            h = g.relu(z);
        }
        Ok(h)
    }
}

/// Low-rank cross layer `x_{l+1} = x0 ⊙ (U Vᵀ x_l + b) + x_l`, with `U`
/// stored transposed as `ut: r × w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossLayer {
    pub v: ParamId,
    pub ut: ParamId,
    pub b: ParamId,
}

impl CrossLayer {
    pub fn register(store: &mut ParamStore, name: &str, width: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        let v = store.add(format!("{name}.v"), gaussian(width, rank, width, rng)?)?;
        let ut = store.add(format!("{name}.ut"), gaussian(rank, width, rank, rng)?)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[width]))?;
        Ok(Self { v, ut, b })
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            v: attach(store, &format!("{name}.v"))?,
            ut: attach(store, &format!("{name}.ut"))?,
            b: attach(store, &format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x0: Var, xl: Var) -> Result<Var> {
        let (v, ut, b) = (g.param(self.v), g.param(self.ut), g.param(self.b));
        let low = g.matmul(xl, v)?;
        let up = g.matmul(low, ut)?;
        let inner = g.add_bias(up, b)?;
        let gated = g.mul(x0, inner)?;
        g.add(gated, xl)
    }
}

/// Single-head scaled dot-product attention pooling of a behavior sequence
/// with the target item as query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl TargetAttention {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            wq: store.add(format!("{name}.wq"), gaussian(dim, dim, dim, rng)?)?,
            wk: store.add(format!("{name}.wk"), gaussian(dim, dim, dim, rng)?)?,
            wv: store.add(format!("{name}.wv"), gaussian(dim, dim, dim, rng)?)?,
        })
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            wq: attach(store, &format!("{name}.wq"))?,
            wk: attach(store, &format!("{name}.wk"))?,
            wv: attach(store, &format!("{name}.wv"))?,
        })
    }

    /// `targets: B×d`, `tokens: N×d` with example `b` owning token rows
    /// `ranges[b]`. An empty range pools to zeros.
    pub fn forward(&self, g: &mut Graph, targets: Var, tokens: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let (wq, wk, wv) = (g.param(self.wq), g.param(self.wk), g.param(self.wv));
        let q = g.matmul(targets, wq)?;
        let k = g.matmul(tokens, wk)?;
        let v = g.matmul(tokens, wv)?;
        g.attention(q, k, v, 1, ranges)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Body {
    Dnn { mlp: Mlp },
    Cross { experts: Vec<Vec<CrossLayer>>, gate: ParamId, deep: Mlp },
}

/// A backbone bound to its parameters. `input_width` is the width of the
/// feature vector `x0`; `extra_width` is the width of the optional late slot
/// (the generative model's output), 0 when absent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backbone {
    config: BackboneConfig,
    layout: Vec<String>,
    input_width: usize,
    extra_width: usize,
    body: Body,
    head: Linear,
}

impl Backbone {
    /// `layout` names the slots of `x0` (for error messages and checkpoints).
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        config: BackboneConfig,
        layout: Vec<String>,
        input_width: usize,
        extra_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if input_width == 0 {
            return Err(Error::Config("backbone input width must be positive".into()));
        }
        let last = *config.hidden.last().expect("validated");
        let (body, head_in) = match config.kind {
            BackboneKind::Dnn => {
                let mlp = Mlp::register(store, &format!("{prefix}.mlp"), input_width + extra_width, &config.hidden, rng)?;
                (Body::Dnn { mlp }, last)
            }
            BackboneKind::Dcnv2 | BackboneKind::Dcnv2Ta => {
                let mut experts = Vec::with_capacity(config.n_experts);
                for e in 0..config.n_experts {
                    let stack = (0..config.cross_depth)
                        .map(|l| CrossLayer::register(store, &format!("{prefix}.expert{e}.cross{l}"), input_width, config.cross_rank, rng))
                        .collect::<Result<_>>()?;
                    experts.push(stack);
                }
                let gate = store.add(format!("{prefix}.gate"), gaussian(input_width, config.n_experts, input_width, rng)?)?;
                let deep = Mlp::register(store, &format!("{prefix}.deep"), input_width, &config.hidden, rng)?;
                (Body::Cross { experts, gate, deep }, input_width + last + extra_width)
            }
        };
        // a zero head starts every model at probability 0.5
        let head = Linear::register_zeros(store, &format!("{prefix}.head"), head_in, 1)?;
        Ok(Self { config, layout, input_width, extra_width, body, head })
    }

    pub fn attach(
        store: &ParamStore,
        prefix: &str,
        config: BackboneConfig,
        layout: Vec<String>,
        input_width: usize,
        extra_width: usize,
    ) -> Result<Self> {
        config.validate()?;
        let depth = config.hidden.len();
        let body = match config.kind {
            BackboneKind::Dnn => Body::Dnn { mlp: Mlp::attach(store, &format!("{prefix}.mlp"), depth)? },
            BackboneKind::Dcnv2 | BackboneKind::Dcnv2Ta => {
                let experts = (0..config.n_experts)
                    .map(|e| {
                        (0..config.cross_depth)
                            .map(|l| CrossLayer::attach(store, &format!("{prefix}.expert{e}.cross{l}")))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                Body::Cross {
                    experts,
                    gate: attach(store, &format!("{prefix}.gate"))?,
                    deep: Mlp::attach(store, &format!("{prefix}.deep"), depth)?,
                }
            }
        };
        let head = Linear::attach(store, &format!("{prefix}.head"))?;
        Ok(Self { config, layout, input_width, extra_width, body, head })
    }

    pub fn kind(&self) -> BackboneKind {
        self.config.kind
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layout(&self) -> &[String] {
        &self.layout
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn extra_width(&self) -> usize {
        self.extra_width
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        match &self.body {
            Body::Dnn { mlp } => mlp.widths(),
            Body::Cross { deep, .. } => deep.widths(),
        }
    }

    pub fn n_experts(&self) -> usize {
        match &self.body {
            Body::Dnn { .. } => 0,
            Body::Cross { experts, .. } => experts.len(),
        }
    }

    pub fn depth(&self) -> usize {
        match &self.body {
            Body::Dnn { .. } => 0,
            Body::Cross { experts, .. } => experts.first().map_or(0, Vec::len),
        }
    }

    pub fn experts(&self) -> &[Vec<CrossLayer>] {
        match &self.body {
            Body::Dnn { .. } => &[],
            Body::Cross { experts, .. } => experts,
        }
    }

    pub fn gate(&self) -> Option<ParamId> {
        match &self.body {
            Body::Dnn { .. } => None,
            Body::Cross { gate, .. } => Some(*gate),
        }
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Row-wise softmax gate over experts, `B × n_experts`.
    pub fn gate_weights(&self, g: &mut Graph, x0: Var) -> Result<Option<Var>> {
        match &self.body {
            Body::Dnn { .. } => Ok(None),
            Body::Cross { gate, .. } => {
                let w = g.param(*gate);
                let logits = g.matmul(x0, w)?;
                g.softmax(logits).map(Some)
            }
        }
    }

    /// Logits `B × 1`.
    pub fn forward(&self, g: &mut Graph, x0: Var, extra: Option<Var>) -> Result<Var> {
        let width = g.value(x0).cols();
        if width != self.input_width {
            return Err(Error::shape(
                "backbone",
                format!("input width {width}, expected {} for layout [{}]", self.input_width, self.layout.join(", ")),
            ));
        }
        let extra_w = extra.map_or(0, |e| g.value(e).cols());
        if extra_w != self.extra_width {
            return Err(Error::shape("backbone", format!("late slot width {extra_w}, expected {}", self.extra_width)));
        }
        let top = match &self.body {
            Body::Dnn { mlp } => {
                let input = match extra {
                    Some(e) => g.concat(&[x0, e])?,
                    None => x0,
                };
                mlp.forward(g, input)?
            }
            Body::Cross { experts, deep, .. } => {
                let gates = self.gate_weights(g, x0)?.expect("cross body");
                let mut mix: Option<Var> = None;
                for (e, stack) in experts.iter().enumerate() {
                    let mut x = x0;
                    for layer in stack {
                        x = layer.forward(g, x0, x)?;
                    }
                    let ge = g.select_col(gates, e)?;
                    let weighted = g.mul_rows(x, ge)?;
                    mix = Some(match mix {
                        Some(m) => g.add(m, weighted)?,
                        None => weighted,
                    });
                }
                let deep_out = deep.forward(g, x0)?;
                let mut parts = vec![mix.expect("at least one expert"), deep_out];
                parts.extend(extra);
                g.concat(&parts)?
            }
        };
        self.head.forward(g, top)
    }
}
