//! A small frozen decoder with adapter injection points.
//!
//! Two modes share one code path:
//!
//! * `language_model`: token + position embeddings, pre-norm causal attention and a
//!   SiLU feed-forward per layer, final norm, vocabulary head.
//! * `regressor`: feature rows go straight into the attention path and a linear head.
//!   Each row is a sequence of length one, so attention reduces to the value path
//!   `x + W_o·W_v·x`. There is no norm or feed-forward, which keeps the whole student
//!   linear in its input whenever the injected adapters are linear.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{adapter_branch, init_adapter, merge_linear, Adapter, AdapterConfig, AdapterKind, BranchVars, Target};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"ADLBK001";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    LanguageModel,
    Regressor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub v_out_dim: usize,
    pub mode: ModelMode,
}

impl ModelConfig {
    /// The default language-model geometry.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            n_layers: 2,
            vocab_size: 32,
            max_seq_len: 64,
            v_out_dim: 32,
            mode: ModelMode::LanguageModel,
        }
    }

    /// One square block used by the regression tasks.
    pub fn regressor() -> Self {
        ModelConfig {
            n_layers: 1,
            v_out_dim: 64,
            max_seq_len: 1,
            mode: ModelMode::Regressor,
            ..ModelConfig::desk()
        }
    }

    pub fn attention_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("v_out_dim", self.v_out_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.v_out_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "v_out_dim {} is not divisible by n_heads {}",
                self.v_out_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Shape `(rows, cols)` of the host matrix at a weight-level site.
    pub fn host_shape(&self, target: Target) -> (usize, usize) {
        match target {
            Target::Wq => (self.attention_width(), self.d_model),
            Target::Wv => (self.v_out_dim, self.d_model),
        }
    }

    /// Output width of the model: vocabulary logits or a `d_model` regression vector.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            ModelMode::LanguageModel => self.vocab_size,
            ModelMode::Regressor => self.d_model,
        }
    }
}

/// Adapted-matrix geometry of a model for the given weight-level targets.
pub fn model_geometry(cfg: &ModelConfig, targets: &[Target]) -> Vec<crate::adapters::MatrixGeometry> {
    let mut t = targets.to_vec();
    t.sort();
    t.dedup();
    t.into_iter()
        .map(|target| {
            let (d, k) = cfg.host_shape(target);
            crate::adapters::MatrixGeometry {
                d,
                k,
                multiplicity: cfg.n_layers,
            }
        })
        .collect()
}

/// Where an adapter sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Wq,
    Wv,
    /// Parallel to the whole attention block.
    Block,
}

impl From<Target> for SiteKind {
    fn from(t: Target) -> Self {
        match t {
            Target::Wq => SiteKind::Wq,
            Target::Wv => SiteKind::Wv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            SiteKind::Wq => "wq",
            SiteKind::Wv => "wv",
            SiteKind::Block => "attn_block",
        };
        write!(f, "layers.{}.{}", self.layer, k)
    }
}

/// Named frozen weights. Never updated by training.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    config: ModelConfig,
    weights: BTreeMap<String, Tensor>,
}

fn layer_key(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

impl FrozenBackbone {
    /// Deterministic scaled-uniform initialization: each matrix draws from `±1/√fan_in`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(seed, streams::BACKBONE);
        let mut weights = BTreeMap::new();
        let dense = |rng: &mut RngState, rows: usize, cols: usize| {
            let b = 1.0 / (cols as f64).sqrt();
            rng.uniform_tensor(&[rows, cols], -b, b)
        };
        let (d, a, v) = (cfg.d_model, cfg.attention_width(), cfg.v_out_dim);
        if cfg.mode == ModelMode::LanguageModel {
            weights.insert("embed".to_string(), rng.uniform_tensor(&[cfg.vocab_size, d], -1.0, 1.0));
            weights.insert("pos".to_string(), rng.uniform_tensor(&[cfg.max_seq_len, d], -0.1, 0.1));
        }
        for l in 0..cfg.n_layers {
            weights.insert(layer_key(l, "wq"), dense(&mut rng, a, d));
            weights.insert(layer_key(l, "wk"), dense(&mut rng, a, d));
            weights.insert(layer_key(l, "wv"), dense(&mut rng, v, d));
            weights.insert(layer_key(l, "wo"), dense(&mut rng, d, v));
            if cfg.mode == ModelMode::LanguageModel {
                let f = cfg.ffn_width();
                weights.insert(layer_key(l, "ffn.w1"), dense(&mut rng, f, d));
                weights.insert(layer_key(l, "ffn.w2"), dense(&mut rng, d, f));
                for ln in ["ln1", "ln2"] {
                    weights.insert(layer_key(l, &format!("{ln}.gain")), Tensor::ones(&[d]));
                    weights.insert(layer_key(l, &format!("{ln}.bias")), Tensor::zeros(&[d]));
                }
            }
        }
        if cfg.mode == ModelMode::LanguageModel {
            weights.insert("ln_f.gain".to_string(), Tensor::ones(&[d]));
            weights.insert("ln_f.bias".to_string(), Tensor::zeros(&[d]));
        }
        weights.insert("head".to_string(), dense(&mut rng, cfg.output_dim(), d));
        Ok(FrozenBackbone {
            config: cfg.clone(),
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::Config(format!("backbone has no weight named {name}")))
    }

    pub fn weight_names(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    /// SHA-256 over every weight's name, shape and little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.weights {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Binary checkpoint: magic, header length, JSON header, then raw `f64` blobs in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a ModelConfig,
            tensors: Vec<(&'a str, &'a [usize])>,
        }
        let header = Header {
            config: &self.config,
            tensors: self.weights.iter().map(|(n, t)| (n.as_str(), t.shape())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 16 + 8 * self.param_count());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.weights.values() {
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            config: ModelConfig,
            tensors: Vec<(String, Vec<usize>)>,
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::Input(format!("{} is not a backbone checkpoint", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(bad)?;
        let header: Header = serde_json::from_slice(body)?;
        header.config.validate()?;
        let mut offset = 16 + hlen;
        let mut weights = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes.get(offset..offset + 8 * n).ok_or_else(bad)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            weights.insert(name, Tensor::new(shape, data)?);
        }
        if offset != bytes.len() {
            return Err(bad());
        }
        Ok(FrozenBackbone {
            config: header.config,
            weights,
        })
    }
}

/// A batch for either mode.
#[derive(Clone, Copy, Debug)]
pub enum Batch<'a> {
    /// Equal-length token sequences.
    Tokens(&'a [Vec<usize>]),
    /// Feature rows, `N × d_model`.
    Features(&'a Tensor),
}

impl Batch<'_> {
    /// Total positions processed (tokens or feature rows).
    pub fn positions(&self) -> usize {
        match self {
            Batch::Tokens(seqs) => seqs.iter().map(Vec::len).sum(),
            Batch::Features(x) => x.rows(),
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Debug)]
pub struct TapeForward {
    /// Logits `(B·T) × V` or regression output `N × d_model`.
    pub output: Var,
    pub branches: BTreeMap<Site, BranchVars>,
    /// Per layer, per sequence, per head `T × T` attention matrices when requested.
    pub attention: Vec<Tensor>,
}

/// Which adapter signal [`Model::collect_latents`] stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// Post-activation latent, `r` columns per site.
    LatentH,
    /// Scaled additive contribution, host output width per site.
    OutputDeltaD,
}

/// Frozen backbone plus injected adapters.
#[derive(Clone, Debug)]
pub struct Model {
    backbone: FrozenBackbone,
    adapters: BTreeMap<Site, Adapter>,
}

impl Model {
    pub fn new(backbone: FrozenBackbone) -> Self {
        Model {
            backbone,
            adapters: BTreeMap::new(),
        }
    }

    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Model::new(FrozenBackbone::build(cfg, seed)?))
    }

    pub fn config(&self) -> &ModelConfig {
        self.backbone.config()
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn adapters(&self) -> &BTreeMap<Site, Adapter> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut BTreeMap<Site, Adapter> {
        &mut self.adapters
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.values().map(|a| a.state.param_count()).sum()
    }

    /// Shape `(d, k)` an adapter at `site` must have.
    pub fn site_shape(&self, site: Site) -> (usize, usize) {
        let cfg = self.config();
        match site.kind {
            SiteKind::Wq => cfg.host_shape(Target::Wq),
            SiteKind::Wv => cfg.host_shape(Target::Wv),
            SiteKind::Block => (cfg.d_model, cfg.d_model),
        }
    }

    pub fn inject(&mut self, site: Site, adapter: Adapter) -> Result<()> {
        if site.layer >= self.config().n_layers {
            return Err(Error::Config(format!(
                "layer {} does not exist (model has {})",
                site.layer,
                self.config().n_layers
            )));
        }
        let block_kind = adapter.config.kind == AdapterKind::ParallelModule;
        if block_kind != (site.kind == SiteKind::Block) {
            return Err(Error::Config(format!(
                "{} adapter cannot sit at {site}",
                adapter.config.kind.name()
            )));
        }
        if self.adapters.contains_key(&site) {
            return Err(Error::Config(format!("an adapter is already injected at {site}")));
        }
        let (d, k) = self.site_shape(site);
        if adapter.state.out_dim() != d || adapter.state.in_dim() != k {
            return Err(Error::shape(
                "inject",
                format!(
                    "adapter {}→{} at {site} expecting {k}→{d}",
                    adapter.state.in_dim(),
                    adapter.state.out_dim()
                ),
            ));
        }
        self.adapters.insert(site, adapter);
        Ok(())
    }

    /// Freshly initialized adapters at every layer: each configured target for
    /// weight-level kinds, the attention block for module-level ones.
    pub fn inject_all(&mut self, cfg: &AdapterConfig, rng: &mut RngState) -> Result<Vec<Site>> {
        cfg.validate()?;
        let kinds: Vec<SiteKind> = if cfg.kind == AdapterKind::ParallelModule {
            vec![SiteKind::Block]
        } else {
            let mut t = cfg.targets.clone();
            t.sort();
            t.dedup();
            t.into_iter().map(SiteKind::from).collect()
        };
        let mut sites = Vec::new();
        for layer in 0..self.config().n_layers {
            for &kind in &kinds {
                let site = Site { layer, kind };
                let (d, k) = self.site_shape(site);
                let state = init_adapter(cfg, d, k, rng)?;
                self.inject(
                    site,
                    Adapter {
                        config: cfg.clone(),
                        state,
                    },
                )?;
                sites.push(site);
            }
        }
        Ok(sites)
    }

    /// Records every adapter matrix on the tape; trainable ones as parameters.
    pub fn adapter_vars(&self, tape: &mut Tape, trainable: bool) -> BTreeMap<Site, (Var, Var)> {
        self.adapters
            .iter()
            .map(|(site, a)| {
                let (up, down) = if trainable {
                    (tape.param(a.state.w_up.clone()), tape.param(a.state.w_down.clone()))
                } else {
                    (tape.constant(a.state.w_up.clone()), tape.constant(a.state.w_down.clone()))
                };
                (*site, (up, down))
            })
            .collect()
    }

    fn frozen(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.constant(self.backbone.weight(name)?.clone()))
    }

    /// Records the forward pass. `adapter_vars` must come from [`Model::adapter_vars`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: Batch<'_>,
        adapter_vars: &BTreeMap<Site, (Var, Var)>,
        mode: Mode,
        rng: &mut RngState,
        capture_attention: bool,
    ) -> Result<TapeForward> {
        let cfg = self.config().clone();
        let mut branches = BTreeMap::new();
        let mut attention = Vec::new();

        let (mut x, seq_len) = match (batch, cfg.mode) {
            (Batch::Tokens(seqs), ModelMode::LanguageModel) => {
                let t = seqs.first().map_or(0, Vec::len);
                if seqs.iter().any(|s| s.len() != t) {
                    return Err(Error::Input("sequences in a batch must share one length".into()));
                }
                if t > cfg.max_seq_len {
                    return Err(Error::Input(format!("sequence length {t} exceeds {}", cfg.max_seq_len)));
                }
                if let Some(&bad) = seqs.iter().flatten().find(|&&id| id >= cfg.vocab_size) {
                    return Err(Error::Input(format!(
                        "token {bad} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
                let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..t).collect();
                let embed = self.frozen(tape, "embed")?;
                let pos = self.frozen(tape, "pos")?;
                let e = tape.gather(embed, &ids)?;
                let p = tape.gather(pos, &positions)?;
                (tape.add(e, p)?, t)
            }
            (Batch::Features(f), ModelMode::Regressor) => {
                if f.cols() != cfg.d_model {
                    return Err(Error::shape(
                        "forward",
                        format!("features of width {} for d_model {}", f.cols(), cfg.d_model),
                    ));
                }
                (tape.constant(f.clone()), 1)
            }
            _ => return Err(Error::Input("batch kind does not match the model mode".into())),
        };

        let rows = tape.value(x).rows();
        let lm = cfg.mode == ModelMode::LanguageModel;
        for l in 0..cfg.n_layers {
            let xn = if lm {
                let g = self.frozen(tape, &layer_key(l, "ln1.gain"))?;
                let b = self.frozen(tape, &layer_key(l, "ln1.bias"))?;
                tape.layer_norm(x, g, b, LN_EPS)?
            } else {
                x
            };

            let mut project = |tape: &mut Tape, kind: SiteKind, name: &str| -> Result<Var> {
                let w = self.frozen(tape, &layer_key(l, name))?;
                let mut h = tape.matmul_t(xn, w)?;
                let site = Site { layer: l, kind };
                if let Some(&(up, down)) = adapter_vars.get(&site) {
                    let a = &self.adapters[&site];
                    let br = adapter_branch(tape, xn, up, down, &a.config, mode, rng)?;
                    h = tape.add(h, br.delta)?;
                    branches.insert(site, br);
                }
                Ok(h)
            };
            let q = project(tape, SiteKind::Wq, "wq")?;
            let v = project(tape, SiteKind::Wv, "wv")?;

            let mixed = if lm && rows > 0 {
                let wk = self.frozen(tape, &layer_key(l, "wk"))?;
                let k = tape.matmul_t(xn, wk)?;
                let n_seq = rows / seq_len;
                let dv = cfg.v_out_dim / cfg.n_heads;
                let inv_sqrt = 1.0 / (cfg.d_head as f64).sqrt();
                let mut per_seq = Vec::with_capacity(n_seq);
                for s in 0..n_seq {
                    let mut heads = Vec::with_capacity(cfg.n_heads);
                    for h in 0..cfg.n_heads {
                        let qh = tape.slice(q, s * seq_len, seq_len, h * cfg.d_head, cfg.d_head)?;
                        let kh = tape.slice(k, s * seq_len, seq_len, h * cfg.d_head, cfg.d_head)?;
                        let vh = tape.slice(v, s * seq_len, seq_len, h * dv, dv)?;
                        let scores = tape.matmul_t(qh, kh)?;
                        let scores = tape.scale(scores, inv_sqrt)?;
                        let probs = tape.softmax_rows(scores, true)?;
                        if capture_attention {
                            attention.push(tape.value(probs).clone());
                        }
                        heads.push(tape.matmul(probs, vh)?);
                    }
                    per_seq.push(tape.concat_cols(&heads)?);
                }
                tape.concat_rows(&per_seq)?
            } else {
                // one key per query: the softmax weight is exactly 1
                v
            };

            let wo = self.frozen(tape, &layer_key(l, "wo"))?;
            let mut attn = tape.matmul_t(mixed, wo)?;
            let block = Site {
                layer: l,
                kind: SiteKind::Block,
            };
            if let Some(&(up, down)) = adapter_vars.get(&block) {
                let a = &self.adapters[&block];
                let br = adapter_branch(tape, xn, up, down, &a.config, mode, rng)?;
                attn = tape.add(attn, br.delta)?;
                branches.insert(block, br);
            }
            x = tape.add(x, attn)?;

            if lm {
                let g = self.frozen(tape, &layer_key(l, "ln2.gain"))?;
                let b = self.frozen(tape, &layer_key(l, "ln2.bias"))?;
                let xn2 = tape.layer_norm(x, g, b, LN_EPS)?;
                let w1 = self.frozen(tape, &layer_key(l, "ffn.w1"))?;
                let w2 = self.frozen(tape, &layer_key(l, "ffn.w2"))?;
                let hidden = tape.matmul_t(xn2, w1)?;
                let hidden = tape.silu(hidden)?;
                let f = tape.matmul_t(hidden, w2)?;
                x = tape.add(x, f)?;
            }
        }

        if lm {
            let g = self.frozen(tape, "ln_f.gain")?;
            let b = self.frozen(tape, "ln_f.bias")?;
            x = tape.layer_norm(x, g, b, LN_EPS)?;
        }
        let head = self.frozen(tape, "head")?;
        let output = tape.matmul_t(x, head)?;
        Ok(TapeForward {
            output,
            branches,
            attention,
        })
    }

    /// Plain forward. Language models return `B × T × V` logits; regressors `N × d_model`.
    pub fn forward(&self, batch: Batch<'_>, mode: Mode, rng: &mut RngState) -> Result<Tensor> {
        Ok(self.forward_full(batch, mode, rng, false)?.output)
    }

    /// Forward pass that also returns each site's latent and delta, plus attention maps
    /// when `capture_attention` is set.
    pub fn forward_full(
        &self,
        batch: Batch<'_>,
        mode: Mode,
        rng: &mut RngState,
        capture_attention: bool,
    ) -> Result<ForwardOutput> {
        let cfg = self.config();
        if let (Batch::Tokens(seqs), ModelMode::LanguageModel) = (batch, cfg.mode) {
            let t = seqs.first().map_or(0, Vec::len);
            if seqs.is_empty() || t == 0 {
                return Ok(ForwardOutput {
                    output: Tensor::zeros(&[seqs.len(), t, cfg.vocab_size]),
                    latents: BTreeMap::new(),
                    deltas: BTreeMap::new(),
                    attention: Vec::new(),
                });
            }
        }
        let mut tape = Tape::new();
        let vars = self.adapter_vars(&mut tape, false);
        let fwd = self.forward_on_tape(&mut tape, batch, &vars, mode, rng, capture_attention)?;
        let mut output = tape.value(fwd.output).clone();
        if let Batch::Tokens(seqs) = batch {
            let t = seqs[0].len();
            output = output.reshape(vec![seqs.len(), t, cfg.vocab_size])?;
        }
        let latents = fwd
            .branches
            .iter()
            .map(|(s, b)| (*s, tape.value(b.latent).clone()))
            .collect();
        let deltas = fwd
            .branches
            .iter()
            .map(|(s, b)| (*s, tape.value(b.delta).clone()))
            .collect();
        Ok(ForwardOutput {
            output,
            latents,
            deltas,
            attention: fwd.attention,
        })
    }

    /// Per-site eval-mode adapter signals stacked over every position of every batch.
    pub fn collect_site_latents(
        &self,
        batches: &[Batch<'_>],
        which: LatentSource,
    ) -> Result<BTreeMap<Site, Tensor>> {
        if self.adapters.is_empty() {
            return Err(Error::Config("no adapter injected".into()));
        }
        let mut parts: BTreeMap<Site, Vec<Tensor>> = BTreeMap::new();
        let mut rng = RngState::new(0, streams::PROBE);
        for batch in batches {
            if batch.positions() == 0 {
                continue;
            }
            let out = self.forward_full(*batch, Mode::Eval, &mut rng, false)?;
            let src = match which {
                LatentSource::LatentH => out.latents,
                LatentSource::OutputDeltaD => out.deltas,
            };
            for (site, t) in src {
                parts.entry(site).or_default().push(t);
            }
        }
        self.adapters
            .keys()
            .map(|site| {
                let (d, _) = self.site_shape(*site);
                let width = match which {
                    LatentSource::LatentH => self.adapters[site].state.rank(),
                    LatentSource::OutputDeltaD => d,
                };
                let t = match parts.remove(site) {
                    Some(p) => Tensor::vstack(&p)?,
                    None => Tensor::zeros(&[0, width]),
                };
                Ok((*site, t))
            })
            .collect()
    }

    /// Site signals concatenated column-wise in site order: `positions × Σ width`.
    pub fn collect_latents(&self, batches: &[Batch<'_>], which: LatentSource) -> Result<Tensor> {
        let per_site = self.collect_site_latents(batches, which)?;
        let parts: Vec<Tensor> = per_site.into_values().collect();
        Tensor::hstack(&parts)
    }

    /// A copy with every adapter folded into its host weight. Fails for adapters that
    /// cannot be merged.
    pub fn merged(&self) -> Result<Model> {
        let mut backbone = self.backbone.clone();
        for (site, a) in &self.adapters {
            let name = match site.kind {
                SiteKind::Wq => layer_key(site.layer, "wq"),
                SiteKind::Wv => layer_key(site.layer, "wv"),
                SiteKind::Block => {
                    return Err(Error::NotMergeable(format!("module-level adapter at {site}")));
                }
            };
            let w = merge_linear(backbone.weight(&name)?, &a.state, &a.config)?;
            backbone.weights.insert(name, w);
        }
        Ok(Model::new(backbone))
    }

    /// JSON bundle of every injected adapter keyed by site name.
    pub fn adapter_bundle(&self) -> AdapterBundle {
        AdapterBundle {
            sites: self
                .adapters
                .iter()
                .map(|(s, a)| (s.to_string(), a.clone()))
                .collect(),
        }
    }

    /// Replaces injected adapters with those from a bundle.
    pub fn load_adapters(&mut self, bundle: &AdapterBundle) -> Result<()> {
        self.adapters.clear();
        for (name, a) in &bundle.sites {
            let site = parse_site(name)?;
            self.inject(site, a.clone())?;
        }
        Ok(())
    }
}

fn parse_site(name: &str) -> Result<Site> {
    let bad = || Error::Input(format!("unrecognized adapter site {name:?}"));
    let rest = name.strip_prefix("layers.").ok_or_else(bad)?;
    let (layer, kind) = rest.split_once('.').ok_or_else(bad)?;
    let layer = layer.parse().map_err(|_| bad())?;
    let kind = match kind {
        "wq" => SiteKind::Wq,
        "wv" => SiteKind::Wv,
        "attn_block" => SiteKind::Block,
        _ => return Err(bad()),
    };
    Ok(Site { layer, kind })
}

/// Result of [`Model::forward_full`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub latents: BTreeMap<Site, Tensor>,
    pub deltas: BTreeMap<Site, Tensor>,
    pub attention: Vec<Tensor>,
}

/// Serialized adapters, stored apart from the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterBundle {
    pub sites: BTreeMap<String, Adapter>,
}

impl AdapterBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = serde_json::to_vec(self)?;
        buf.push(b'\n');
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = String::new();
        std::fs::File::open(path)?.read_to_string(&mut s)?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterConfig;
    use crate::nn::Activation;

    fn tiny_lm() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            n_layers: 2,
            vocab_size: 7,
            max_seq_len: 6,
            v_out_dim: 4,
            mode: ModelMode::LanguageModel,
        }
    }

    fn tokens(seed: u64, b: usize, t: usize, v: usize) -> Vec<Vec<usize>> {
        let mut rng = RngState::new(seed, 77);
        (0..b).map(|_| (0..t).map(|_| rng.index(v)).collect()).collect()
    }

    fn perturb(model: &mut Model, seed: u64) {
        let mut rng = RngState::new(seed, 88);
        for a in model.adapters_mut().values_mut() {
            let s = a.state.w_down.shape().to_vec();
            a.state.w_down = rng.uniform_tensor(&s, -0.5, 0.5);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = FrozenBackbone::build(&ModelConfig::desk(), 5).unwrap();
        let b = FrozenBackbone::build(&ModelConfig::desk(), 5).unwrap();
        let c = FrozenBackbone::build(&ModelConfig::desk(), 6).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn logits_shape_and_empty_batch() {
        let m = Model::build(&tiny_lm(), 1).unwrap();
        let mut rng = RngState::new(0, 0);
        let seqs = tokens(1, 3, 5, 7);
        let y = m.forward(Batch::Tokens(&seqs), Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.shape(), &[3, 5, 7]);
        let empty: Vec<Vec<usize>> = Vec::new();
        assert!(m.forward(Batch::Tokens(&empty), Mode::Eval, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn input_errors() {
        let m = Model::build(&tiny_lm(), 1).unwrap();
        let mut rng = RngState::new(0, 0);
        let overflow = vec![vec![0, 7]];
        assert!(matches!(
            m.forward(Batch::Tokens(&overflow), Mode::Eval, &mut rng),
            Err(Error::Input(_))
        ));
        let long = vec![vec![0; 7]];
        assert!(m.forward(Batch::Tokens(&long), Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn causal_mask_limits_influence() {
        let m = Model::build(&tiny_lm(), 2).unwrap();
        let mut rng = RngState::new(0, 0);
        let base = tokens(2, 1, 6, 7);
        let y0 = m.forward(Batch::Tokens(&base), Mode::Eval, &mut rng).unwrap();
        let t = 3;
        let mut changed = base.clone();
        changed[0][t] = (changed[0][t] + 1) % 7;
        let y1 = m.forward(Batch::Tokens(&changed), Mode::Eval, &mut rng).unwrap();
        for pos in 0..6 {
            let diff: f64 = (0..7)
                .map(|j| (y0.data()[pos * 7 + j] - y1.data()[pos * 7 + j]).abs())
                .sum();
            if pos < t {
                assert_eq!(diff, 0.0, "position {pos}");
            } else {
                assert!(diff > 0.0, "position {pos}");
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = Model::build(&tiny_lm(), 3).unwrap();
        let seqs = tokens(3, 2, 6, 7);
        let out = m
            .forward_full(Batch::Tokens(&seqs), Mode::Eval, &mut RngState::new(0, 0), true)
            .unwrap();
        assert_eq!(out.attention.len(), 2 * 2 * 2);
        for a in &out.attention {
            for i in 0..a.rows() {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_init_injection_is_bit_neutral() {
        let base = Model::build(&tiny_lm(), 4).unwrap();
        let seqs = tokens(4, 2, 6, 7);
        let y0 = base.forward(Batch::Tokens(&seqs), Mode::Eval, &mut RngState::new(0, 0)).unwrap();
        for cfg in [AdapterConfig::lora(2), AdapterConfig::cera(2), AdapterConfig::parallel_module(2)] {
            let mut m = base.clone();
            m.inject_all(&cfg, &mut RngState::new(1, 1)).unwrap();
            let y = m.forward(Batch::Tokens(&seqs), Mode::Train, &mut RngState::new(2, 2)).unwrap();
            assert_eq!(y, y0, "{:?}", cfg.kind);
        }
    }

    #[test]
    fn injection_contracts() {
        let mut m = Model::build(&tiny_lm(), 5).unwrap();
        let cfg = AdapterConfig::lora(2);
        m.inject_all(&cfg, &mut RngState::new(1, 1)).unwrap();
        assert!(matches!(m.inject_all(&cfg, &mut RngState::new(1, 1)), Err(Error::Config(_))));
        let (d, k) = m.site_shape(Site {
            layer: 0,
            kind: SiteKind::Wq,
        });
        let state = init_adapter(&cfg, d, k, &mut RngState::new(1, 1)).unwrap();
        let bad = Site {
            layer: 9,
            kind: SiteKind::Wq,
        };
        assert!(m.inject(bad, Adapter { config: cfg, state }).is_err());
    }

    #[test]
    fn query_and_value_sites_differ() {
        let base = Model::build(&ModelConfig { v_out_dim: 8, ..tiny_lm() }, 6).unwrap();
        let seqs = tokens(6, 1, 6, 7);
        let cfg = AdapterConfig::cera(2);
        let (d, k) = (8, 8);
        let mut rng = RngState::new(6, 6);
        let mut state = init_adapter(&cfg, d, k, &mut rng).unwrap();
        state.w_down = rng.uniform_tensor(&[d, 2], -1.0, 1.0);
        let mut outs = Vec::new();
        for kind in [SiteKind::Wq, SiteKind::Wv] {
            let mut m = base.clone();
            m.inject(
                Site { layer: 0, kind },
                Adapter {
                    config: cfg.clone(),
                    state: state.clone(),
                },
            )
            .unwrap();
            outs.push(m.forward(Batch::Tokens(&seqs), Mode::Eval, &mut RngState::new(0, 0)).unwrap());
        }
        assert!(outs[0].max_abs_diff(&outs[1]).unwrap() > 1e-6);
    }

    #[test]
    fn weight_level_and_module_level_differ() {
        let cfg = ModelConfig {
            v_out_dim: 8,
            ..tiny_lm()
        };
        let base = Model::build(&cfg, 7).unwrap();
        let seqs = tokens(7, 1, 6, 7);
        let mut rng = RngState::new(7, 7);
        let w_up = rng.uniform_tensor(&[2, 8], -0.5, 0.5);
        let w_down = rng.uniform_tensor(&[8, 2], -0.5, 0.5);
        let mut outs = Vec::new();
        for (kind, acfg) in [
            (SiteKind::Wv, AdapterConfig::cera(2)),
            (SiteKind::Block, AdapterConfig::parallel_module(2)),
        ] {
            let mut m = base.clone();
            let state = crate::adapters::AdapterState {
                w_up: w_up.clone(),
                w_down: w_down.clone(),
            };
            m.inject(Site { layer: 0, kind }, Adapter { config: acfg, state }).unwrap();
            outs.push(m.forward(Batch::Tokens(&seqs), Mode::Eval, &mut RngState::new(0, 0)).unwrap());
        }
        assert!(outs[0].max_abs_diff(&outs[1]).unwrap() > 1e-6);
    }

    #[test]
    fn regressor_is_linear_with_linear_adapters() {
        let cfg = ModelConfig {
            d_model: 6,
            v_out_dim: 6,
            n_heads: 1,
            d_head: 6,
            ..ModelConfig::regressor()
        };
        let mut m = Model::build(&cfg, 8).unwrap();
        m.inject_all(&AdapterConfig::lora(2).with_targets(vec![Target::Wv]), &mut RngState::new(1, 1))
            .unwrap();
        perturb(&mut m, 8);
        let mut rng = RngState::new(8, 8);
        let a = rng.uniform_tensor(&[1, 6], -1.0, 1.0);
        let b = rng.uniform_tensor(&[1, 6], -1.0, 1.0);
        let f = |x: &Tensor| m.forward(Batch::Features(x), Mode::Eval, &mut RngState::new(0, 0)).unwrap();
        let lhs = f(&a.add(&b).unwrap());
        let rhs = f(&a).add(&f(&b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn latents_shapes_and_zero_delta() {
        let mut m = Model::build(&tiny_lm(), 9).unwrap();
        let seqs = tokens(9, 3, 5, 7);
        let batches = [Batch::Tokens(&seqs)];
        assert!(m.collect_latents(&batches, LatentSource::LatentH).is_err());
        m.inject_all(&AdapterConfig::cera(3).with_targets(vec![Target::Wv]), &mut RngState::new(1, 1))
            .unwrap();
        let h = m.collect_latents(&batches, LatentSource::LatentH).unwrap();
        assert_eq!(h.shape(), &[15, 2 * 3]);
        let d = m.collect_latents(&batches, LatentSource::OutputDeltaD).unwrap();
        assert!(d.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn merged_lora_matches_unmerged_and_cera_refuses() {
        let mut m = Model::build(&tiny_lm(), 10).unwrap();
        m.inject_all(&AdapterConfig::lora(2), &mut RngState::new(1, 1)).unwrap();
        perturb(&mut m, 10);
        let seqs = tokens(10, 2, 6, 7);
        let y = m.forward(Batch::Tokens(&seqs), Mode::Eval, &mut RngState::new(0, 0)).unwrap();
        let merged = m.merged().unwrap();
        assert!(merged.adapters().is_empty());
        let ym = merged.forward(Batch::Tokens(&seqs), Mode::Eval, &mut RngState::new(0, 0)).unwrap();
        assert!(y.max_abs_diff(&ym).unwrap() < 1e-10);

        let mut c = Model::build(&tiny_lm(), 10).unwrap();
        c.inject_all(&AdapterConfig::cera(2).with_activation(Activation::Silu), &mut RngState::new(1, 1))
            .unwrap();
        assert!(matches!(c.merged(), Err(Error::NotMergeable(_))));
    }

    #[test]
    fn checkpoint_and_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::build(&tiny_lm(), 11).unwrap();
        m.inject_all(&AdapterConfig::cera(2), &mut RngState::new(1, 1)).unwrap();
        perturb(&mut m, 11);
        let bpath = dir.path().join("backbone.bin");
        m.backbone().save(&bpath).unwrap();
        let loaded = FrozenBackbone::load(&bpath).unwrap();
        assert_eq!(loaded.checksum(), m.backbone().checksum());

        let apath = dir.path().join("adapters.json");
        m.adapter_bundle().save(&apath).unwrap();
        let bundle = AdapterBundle::load(&apath).unwrap();
        let mut restored = Model::new(loaded);
        restored.load_adapters(&bundle).unwrap();
        let json = std::fs::read_to_string(&apath).unwrap();
        assert!(json.contains("\"w_up\"") && json.contains("\"w_down\""));
        let seqs = tokens(11, 1, 4, 7);
        let a = m.forward(Batch::Tokens(&seqs), Mode::Eval, &mut RngState::new(0, 0)).unwrap();
        let b = restored.forward(Batch::Tokens(&seqs), Mode::Eval, &mut RngState::new(0, 0)).unwrap();
        assert_eq!(a, b);

        std::fs::write(&bpath, b"garbage").unwrap();
        assert!(FrozenBackbone::load(&bpath).is_err());
    }
}
