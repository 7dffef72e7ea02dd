//! Low-rank linear adapters, gated non-linear adapters and module-level parallel adapters.
//!
//! Every adapter is a two-matrix bottleneck added to a frozen path:
//!
//! ```text
//! h = W0·x + s · W_down( D( act( W_up·x ) ) )
//! ```
//!
//! * `lora`: `act = identity`, `s = alpha / r`, dropout off unless requested.
//! * `cera`: any activation (SiLU by default), latent dropout, `s = scale_s` or `alpha / r`.
//! * `parallel_module`: the same bottleneck placed beside a whole attention block
//!   instead of inside one projection.
//!
//! `W_down` starts at zero, so a fresh adapter never changes the frozen output.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout_on_tape, Activation, DropoutStyle, Mode};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    Cera,
    ParallelModule,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Cera => "cera",
            AdapterKind::ParallelModule => "parallel_module",
        }
    }

    pub fn is_weight_level(self) -> bool {
        !matches!(self, AdapterKind::ParallelModule)
    }
}

/// Projection matrices a weight-level adapter can be injected into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Wq,
    Wv,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Wq => "wq",
            Target::Wv => "wv",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDistribution {
    #[default]
    Uniform,
    Normal,
}

/// Initialization of the up-projection: `uniform(±gain/√k)` or `normal(0, gain/√k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub distribution: InitDistribution,
    pub gain: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            distribution: InitDistribution::Uniform,
            gain: 1.0,
        }
    }
}

fn default_targets() -> Vec<Target> {
    vec![Target::Wq, Target::Wv]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub rank: usize,
    /// Linear scaling numerator; `None` means `alpha = rank`.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Output scale for non-linear kinds; `None` means `alpha / rank`.
    #[serde(default)]
    pub scale_s: Option<f64>,
    pub activation: Activation,
    pub dropout_p: f64,
    #[serde(default)]
    pub dropout_style: DropoutStyle,
    #[serde(default = "default_targets")]
    pub targets: Vec<Target>,
    #[serde(default)]
    pub init: InitSpec,
}

impl AdapterConfig {
    pub fn lora(rank: usize) -> Self {
        AdapterConfig {
            kind: AdapterKind::Lora,
            rank,
            alpha: None,
            scale_s: None,
            activation: Activation::Identity,
            dropout_p: 0.0,
            dropout_style: DropoutStyle::Elementwise,
            targets: default_targets(),
            init: InitSpec::default(),
        }
    }

    pub fn cera(rank: usize) -> Self {
        AdapterConfig {
            kind: AdapterKind::Cera,
            activation: Activation::Silu,
            dropout_p: 0.1,
            ..AdapterConfig::lora(rank)
        }
    }

    pub fn parallel_module(rank: usize) -> Self {
        AdapterConfig {
            kind: AdapterKind::ParallelModule,
            targets: Vec::new(),
            ..AdapterConfig::cera(rank)
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn with_targets(mut self, targets: Vec<Target>) -> Self {
        self.targets = targets;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    /// The multiplier applied to the adapter's output.
    pub fn scale(&self) -> f64 {
        let linear = self.alpha() / self.rank as f64;
        match self.kind {
            AdapterKind::Lora => linear,
            _ => self.scale_s.unwrap_or(linear),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.kind.is_weight_level() && self.targets.is_empty() {
            return Err(Error::Config(format!("{} adapter needs at least one target", self.kind.name())));
        }
        if self.kind == AdapterKind::Lora && self.activation != Activation::Identity {
            return Err(Error::Config("lora adapters are linear: activation must be identity".into()));
        }
        if !self.init.gain.is_finite() || self.init.gain < 0.0 {
            return Err(Error::Config(format!("init gain must be finite and non-negative, got {}", self.init.gain)));
        }
        Ok(())
    }
}

/// Trainable matrices: `w_up: r × k` (LoRA's `A`) and `w_down: d × r` (LoRA's `B`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl AdapterState {
    pub fn rank(&self) -> usize {
        self.w_up.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w_up.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w_down.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w_up.len() + self.w_down.len()
    }
}

/// An adapter configuration together with its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub config: AdapterConfig,
    #[serde(flatten)]
    pub state: AdapterState,
}

/// Draws `w_up` and zeroes `w_down` for a `d × k` host matrix.
pub fn init_adapter(cfg: &AdapterConfig, d: usize, k: usize, rng: &mut RngState) -> Result<AdapterState> {
    cfg.validate()?;
    let r = cfg.rank;
    if r > d.min(k) {
        return Err(Error::Config(format!("rank {r} exceeds min({d}, {k})")));
    }
    let bound = cfg.init.gain / (k as f64).sqrt();
    let w_up = match cfg.init.distribution {
        InitDistribution::Uniform => rng.uniform_tensor(&[r, k], -bound, bound),
        InitDistribution::Normal => rng.normal_tensor(&[r, k], bound),
    };
    Ok(AdapterState {
        w_up,
        w_down: Tensor::zeros(&[d, r]),
    })
}

/// Tape handles for one adapter evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    /// Post-activation, pre-dropout latent, `N × r`.
    pub latent: Var,
    /// Scaled additive contribution, `N × d`.
    pub delta: Var,
}

/// Records `s · W_down(D(act(W_up·x)))` for row inputs `x: N × k`.
pub fn adapter_branch(
    tape: &mut Tape,
    x: Var,
    w_up: Var,
    w_down: Var,
    cfg: &AdapterConfig,
    mode: Mode,
    rng: &mut RngState,
) -> Result<BranchVars> {
    let pre = tape.matmul_t(x, w_up)?;
    let activation = match cfg.kind {
        AdapterKind::Lora => Activation::Identity,
        _ => cfg.activation,
    };
    let latent = activation.apply(tape, pre)?;
    let dropped = dropout_on_tape(tape, latent, cfg.dropout_p, mode, cfg.dropout_style, rng)?;
    let out = tape.matmul_t(dropped, w_down)?;
    let delta = tape.scale(out, cfg.scale())?;
    Ok(BranchVars { latent, delta })
}

fn check_host(op: &'static str, x: &Tensor, w0: &Tensor, st: &AdapterState) -> Result<()> {
    let (d, k) = w0.dims2()?;
    let (r, ku) = st.w_up.dims2()?;
    let (dd, rd) = st.w_down.dims2()?;
    if ku != k || dd != d || rd != r {
        return Err(Error::shape(
            op,
            format!(
                "W0 {d}×{k}, w_up {r}×{ku}, w_down {dd}×{rd} do not compose",
            ),
        ));
    }
    if x.cols() != k {
        return Err(Error::shape(op, format!("input width {} for W0 with {k} columns", x.cols())));
    }
    Ok(())
}

fn require_kind(cfg: &AdapterConfig, kind: AdapterKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "expected a {} adapter, got {}",
            kind.name(),
            cfg.kind.name()
        )));
    }
    Ok(())
}

fn host_forward(
    x: &Tensor,
    w0: &Tensor,
    st: &AdapterState,
    cfg: &AdapterConfig,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w0v = tape.constant(w0.clone());
    let up = tape.constant(st.w_up.clone());
    let down = tape.constant(st.w_down.clone());
    let frozen = tape.matmul_t(xv, w0v)?;
    let branch = adapter_branch(&mut tape, xv, up, down, cfg, mode, rng)?;
    let h = tape.add(frozen, branch.delta)?;
    let out = tape.value(h).clone();
    if x.shape().len() == 1 {
        let d = out.cols();
        out.reshape(vec![d])
    } else {
        Ok(out)
    }
}

/// `W0·x + (alpha / r)·B·(A·x)` for `x: k` or rows `x: N × k`.
pub fn lora_forward(x: &Tensor, w0: &Tensor, st: &AdapterState, cfg: &AdapterConfig) -> Result<Tensor> {
    require_kind(cfg, AdapterKind::Lora)?;
    check_host("lora_forward", x, w0, st)?;
    // eval semantics: any configured dropout is inactive
    let mut unused = RngState::new(0, 0);
    host_forward(x, w0, st, cfg, Mode::Eval, &mut unused)
}

/// `W0·x + s·W_down(D(act(W_up·x)))`; dropout only in train mode.
pub fn cera_forward(
    x: &Tensor,
    w0: &Tensor,
    st: &AdapterState,
    cfg: &AdapterConfig,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Tensor> {
    require_kind(cfg, AdapterKind::Cera)?;
    check_host("cera_forward", x, w0, st)?;
    host_forward(x, w0, st, cfg, mode, rng)
}

/// `block_output + s·W_down(D(act(W_up·block_input)))`.
pub fn parallel_module_forward(
    block_input: &Tensor,
    block_output: &Tensor,
    st: &AdapterState,
    cfg: &AdapterConfig,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Tensor> {
    require_kind(cfg, AdapterKind::ParallelModule)?;
    if block_input.cols() != st.in_dim() || block_output.cols() != st.out_dim() || block_input.rows() != block_output.rows()
    {
        return Err(Error::shape(
            "parallel_module_forward",
            format!(
                "input {:?} / output {:?} for adapter {}→{}",
                block_input.shape(),
                block_output.shape(),
                st.in_dim(),
                st.out_dim()
            ),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(block_input.clone());
    let up = tape.constant(st.w_up.clone());
    let down = tape.constant(st.w_down.clone());
    let branch = adapter_branch(&mut tape, xv, up, down, cfg, mode, rng)?;
    let delta = tape.value(branch.delta).clone().reshape(block_output.shape().to_vec())?;
    block_output.add(&delta)
}

/// Shape and multiplicity of one adapted matrix family, e.g. every layer's `W_q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixGeometry {
    pub d: usize,
    pub k: usize,
    pub multiplicity: usize,
}

/// 32 layers, `W_q: 4096 × 4096`, `W_v: 1024 × 4096` (grouped-query value projection).
pub fn llama3_8b_geometry() -> Vec<MatrixGeometry> {
    vec![
        MatrixGeometry {
            d: 4096,
            k: 4096,
            multiplicity: 32,
        },
        MatrixGeometry {
            d: 1024,
            k: 4096,
            multiplicity: 32,
        },
    ]
}

/// Trainable parameters: `Σ multiplicity · r · (d + k)`. Independent of kind.
pub fn param_count(cfg: &AdapterConfig, geometry: &[MatrixGeometry]) -> Result<u64> {
    if cfg.rank == 0 {
        return Err(Error::Config("adapter rank must be at least 1".into()));
    }
    Ok(geometry
        .iter()
        .map(|g| (g.multiplicity * cfg.rank * (g.d + g.k)) as u64)
        .sum())
}

/// Folds a linear adapter into its host weight: `W0 + s·W_down·W_up`.
///
/// Only linear weight-level adapters can be folded; anything with a non-linear
/// activation, or a module-level adapter, yields [`Error::NotMergeable`].
pub fn merge_linear(w0: &Tensor, st: &AdapterState, cfg: &AdapterConfig) -> Result<Tensor> {
    match cfg.kind {
        AdapterKind::ParallelModule => {
            return Err(Error::NotMergeable(
                "a module-level adapter does not act on a single weight matrix".into(),
            ))
        }
        AdapterKind::Cera if cfg.activation != Activation::Identity => {
            return Err(Error::NotMergeable(format!(
                "{} activation makes the update input-dependent",
                cfg.activation.name()
            )))
        }
        _ => {}
    }
    let delta = st.w_down.matmul(&st.w_up)?.scale(cfg.scale());
    if delta.shape() != w0.shape() {
        return Err(Error::shape(
            "merge_linear",
            format!("update {:?} for weight {:?}", delta.shape(), w0.shape()),
        ));
    }
    w0.add(&delta)
}
