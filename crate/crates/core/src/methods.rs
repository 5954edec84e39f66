//! Prompt generators and adapters trained on top of the frozen backbone.
//!
//! The input-dependent generator works in two stages. First a single-head
//! attention pass over the input embeddings `E`:
//!
//! ```text
//! A = mean_rows( softmax((E·W_Q)(E·W_K)ᵀ / √d_k) · (E·W_V) )
//! ```
//!
//! The mean over query rows is taken on the attention matrix before the value
//! product (`mean_rows(S)·V`), which is the same quantity by linearity. Then a
//! bottleneck MLP turns `A` into the prompt:
//!
//! ```text
//! h = ReLU(Aᵀ·W_down + b_down)          (c)
//! u = ReLU(hᵀ·W_up + b_up)              (n·t)
//! S = reshape(u, n × t)                 row-major
//! ```
//!
//! Padding rows are excluded from both the softmax keys and the mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{lora_patch, EmbeddingMatrix, LoraLayerVars};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A soft prompt `S ∈ R^{n×t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub values: Tensor,
}

impl SoftPrompt {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape("soft prompt", values.shape(), &[]));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("soft prompt"));
        }
        Ok(Self { values })
    }

    pub fn hidden(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    /// Frozen backbone, classification head only.
    HeadOnly,
    /// Input-dependent prompt from attention pooling.
    IdSpam,
    /// Ablation: plain mean of the embeddings feeds the same MLP.
    MeanPool,
    /// Static prompt at the input embeddings.
    PromptTuning,
    /// Static prompt at an intermediate layer.
    Lpt,
    /// Low-rank deltas on query and value projections.
    Lora,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::HeadOnly,
        MethodKind::IdSpam,
        MethodKind::MeanPool,
        MethodKind::PromptTuning,
        MethodKind::Lpt,
        MethodKind::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::HeadOnly => "head-only",
            MethodKind::IdSpam => "id-spam",
            MethodKind::MeanPool => "mean-pool",
            MethodKind::PromptTuning => "prompt-tuning",
            MethodKind::Lpt => "lpt",
            MethodKind::Lora => "lora",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown method {name:?}; expected one of {known:?}"
                ))
            })
    }

    /// Whether the method prepends a prompt (and so has an injection layer).
    pub fn injects(self) -> bool {
        matches!(
            self,
            MethodKind::IdSpam | MethodKind::MeanPool | MethodKind::PromptTuning | MethodKind::Lpt
        )
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub kind: MethodKind,
    /// Prompt length `t`.
    pub prompt_len: usize,
    /// Bottleneck width `c`; `None` means `n / 4`.
    pub bottleneck: Option<usize>,
    /// Query/key width; `None` means `n`.
    pub d_k: Option<usize>,
    /// Value width (input width of `W_down`); `None` means `n`.
    pub d_v: Option<usize>,
    /// Apply ReLU to the up-projection output.
    pub outer_relu: bool,
    pub lora_rank: usize,
    pub init_std: f64,
    /// Injection layer; `None` means 0, or `L / 2` for LPT.
    pub inject_layer: Option<usize>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            kind: MethodKind::IdSpam,
            prompt_len: 10,
            bottleneck: None,
            d_k: None,
            d_v: None,
            outer_relu: true,
            lora_rank: 4,
            init_std: 0.02,
            inject_layer: None,
        }
    }
}

impl MethodConfig {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn bottleneck_for(&self, n: usize) -> usize {
        self.bottleneck.unwrap_or((n / 4).max(1))
    }

    pub fn d_k_for(&self, n: usize) -> usize {
        self.d_k.unwrap_or(n)
    }

    pub fn d_v_for(&self, n: usize) -> usize {
        self.d_v.unwrap_or(n)
    }

    /// Prompt rows this method adds to the sequence.
    pub fn prompt_tokens(&self) -> usize {
        if self.kind.injects() {
            self.prompt_len
        } else {
            0
        }
    }

    pub fn layer_for(&self, layers: usize) -> usize {
        match (self.inject_layer, self.kind) {
            (Some(m), _) => m,
            (None, MethodKind::Lpt) => layers / 2,
            (None, _) => 0,
        }
    }

    /// Closed-form trainable parameter count (method only, head excluded).
    pub fn closed_form_params(&self, n: usize, layers: usize) -> usize {
        let t = self.prompt_len;
        let c = self.bottleneck_for(n);
        let mlp = |d_in: usize| d_in * c + c + c * n * t + n * t;
        match self.kind {
            MethodKind::HeadOnly => 0,
            MethodKind::IdSpam => {
                let (dk, dv) = (self.d_k_for(n), self.d_v_for(n));
                2 * n * dk + n * dv + mlp(dv)
            }
            MethodKind::MeanPool => mlp(n),
            MethodKind::PromptTuning | MethodKind::Lpt => n * t,
            MethodKind::Lora => layers * 2 * (n * self.lora_rank + self.lora_rank * n),
        }
    }

    pub fn validate(&self, n: usize, layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kind.injects() {
            if self.prompt_len == 0 {
                return bad("prompt_len must be >= 1".into());
            }
            let m = self.layer_for(layers);
            if m >= layers {
                return Err(Error::LayerOutOfRange { layer: m, layers });
            }
        }
        if matches!(self.kind, MethodKind::IdSpam | MethodKind::MeanPool) {
            let c = self.bottleneck_for(n);
            if c == 0 || c >= n {
                return bad(format!("bottleneck c = {c} must satisfy 0 < c < n = {n}"));
            }
            if self.d_k_for(n) == 0 || self.d_v_for(n) == 0 {
                return bad("d_k and d_v must be >= 1".into());
            }
        }
        if self.kind == MethodKind::Lora && (self.lora_rank == 0 || self.lora_rank > n) {
            return bad(format!("LoRA rank {} must be in 1..={n}", self.lora_rank));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!(
                "init_std {} must be finite and >= 0",
                self.init_std
            ));
        }
        Ok(())
    }
}

/// Bottleneck MLP shared by the attention generator and the mean-pool ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMlp {
    /// `d_in × c`
    pub w_down: Tensor,
    pub b_down: Tensor,
    /// `c × (n·t)`
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub hidden: usize,
    pub prompt_len: usize,
    pub outer_relu: bool,
}

impl PromptMlp {
    pub fn init(
        d_in: usize,
        bottleneck: usize,
        hidden: usize,
        prompt_len: usize,
        std: f64,
        outer_relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let nt = hidden * prompt_len;
        Self {
            w_down: Tensor::randn(&[d_in, bottleneck], std, rng).with_requires_grad(true),
            b_down: Tensor::zeros(&[bottleneck]).with_requires_grad(true),
            w_up: Tensor::randn(&[bottleneck, nt], std, rng).with_requires_grad(true),
            b_up: Tensor::zeros(&[nt]).with_requires_grad(true),
            hidden,
            prompt_len,
            outer_relu,
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_down,
            &mut self.b_down,
            &mut self.w_up,
            &mut self.b_up,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    w_down: Var,
    b_down: Var,
    w_up: Var,
    b_up: Var,
    hidden: usize,
    prompt_len: usize,
    outer_relu: bool,
}

impl MlpVars {
    fn bind<'p>(mlp: &'p PromptMlp, tape: &mut Tape<'p>) -> Self {
        Self {
            w_down: tape.leaf(&mlp.w_down),
            b_down: tape.leaf(&mlp.b_down),
            w_up: tape.leaf(&mlp.w_up),
            b_up: tape.leaf(&mlp.b_up),
            hidden: mlp.hidden,
            prompt_len: mlp.prompt_len,
            outer_relu: mlp.outer_relu,
        }
    }

    fn all(&self) -> Vec<Var> {
        vec![self.w_down, self.b_down, self.w_up, self.b_up]
    }

    /// Pooled context `A` (length `d_in`) to an `n × t` prompt.
    pub fn generate(&self, tape: &mut Tape<'_>, pooled: Var) -> Result<Var> {
        let d_in = tape.value(pooled).len();
        let a = tape.reshape(pooled, &[1, d_in])?;
        let h = tape.matmul(a, self.w_down)?;
        let h = tape.add_bias(h, self.b_down)?;
        let h = tape.relu(h);
        let u = tape.matmul(h, self.w_up)?;
        let mut u = tape.add_bias(u, self.b_up)?;
        if self.outer_relu {
            u = tape.relu(u);
        }
        tape.reshape(u, &[self.hidden, self.prompt_len])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdSpamParams {
    /// `n × d_k`
    pub w_q: Tensor,
    /// `n × d_k`
    pub w_k: Tensor,
    /// `n × d_v`
    pub w_v: Tensor,
    pub mlp: PromptMlp,
}

impl IdSpamParams {
    pub fn init(cfg: &MethodConfig, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let (dk, dv) = (cfg.d_k_for(n), cfg.d_v_for(n));
        let std = cfg.init_std;
        Self {
            w_q: Tensor::randn(&[n, dk], std, rng).with_requires_grad(true),
            w_k: Tensor::randn(&[n, dk], std, rng).with_requires_grad(true),
            w_v: Tensor::randn(&[n, dv], std, rng).with_requires_grad(true),
            mlp: PromptMlp::init(
                dv,
                cfg.bottleneck_for(n),
                n,
                cfg.prompt_len,
                std,
                cfg.outer_relu,
                rng,
            ),
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)];
        out.extend(self.mlp.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v];
        out.extend(self.mlp.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
}

impl AttentionVars {
    /// Single-head attention over `emb` rows, averaged over real rows.
    pub fn attend_and_pool(&self, tape: &mut Tape<'_>, emb: Var, pad_mask: &[f64]) -> Result<Var> {
        let s = tape.shape(emb)[0];
        if pad_mask.len() != s {
            return Err(Error::shape(
                "attend_and_pool",
                tape.shape(emb),
                &[pad_mask.len()],
            ));
        }
        if !pad_mask.iter().any(|&m| m != 0.0) {
            return Err(Error::EmptyAttentionRow { row: 0 });
        }
        let dk = tape.shape(self.w_q)[1];
        let q = tape.matmul(emb, self.w_q)?;
        let k = tape.matmul(emb, self.w_k)?;
        let v = tape.matmul(emb, self.w_v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let mask: Vec<f64> = (0..s).flat_map(|_| pad_mask.iter().copied()).collect();
        let att = tape.softmax_rows(scores, Some(&mask))?;
        let weights = tape.mean_rows(att, pad_mask)?;
        let weights = tape.reshape(weights, &[1, s])?;
        let pooled = tape.matmul(weights, v)?;
        let dv = tape.shape(pooled)[1];
        tape.reshape(pooled, &[dv])
    }
}

/// Mean of the real rows of `emb`, as a weighted row product.
pub fn mean_pool_on_tape(tape: &mut Tape<'_>, emb: Var, pad_mask: &[f64]) -> Result<Var> {
    let s = tape.shape(emb)[0];
    if pad_mask.len() != s {
        return Err(Error::shape(
            "mean_pool",
            tape.shape(emb),
            &[pad_mask.len()],
        ));
    }
    let count: f64 = pad_mask.iter().filter(|&&m| m != 0.0).count() as f64;
    if count == 0.0 {
        return Err(Error::EmptyAttentionRow { row: 0 });
    }
    let weights = pad_mask
        .iter()
        .map(|&m| if m != 0.0 { 1.0 / count } else { 0.0 })
        .collect();
    let w = tape.constant(vec![1, s], weights)?;
    let pooled = tape.matmul(w, emb)?;
    let n = tape.shape(pooled)[1];
    tape.reshape(pooled, &[n])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticPromptParams {
    /// `n × t`
    pub values: Tensor,
    pub inject_at: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    /// `n × r`
    pub q_down: Tensor,
    /// `r × n`, zero at init.
    pub q_up: Tensor,
    pub v_down: Tensor,
    pub v_up: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraParams {
    pub layers: Vec<LoraLayer>,
    pub rank: usize,
    pub scale: f64,
}

impl LoraParams {
    /// Down projections Gaussian with std `1/√n`, up projections zero, scale `1/r`.
    pub fn init(n: usize, layers: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (n as f64).sqrt();
        let layers = (0..layers)
            .map(|_| LoraLayer {
                q_down: Tensor::randn(&[n, rank], std, rng).with_requires_grad(true),
                q_up: Tensor::zeros(&[rank, n]).with_requires_grad(true),
                v_down: Tensor::randn(&[n, rank], std, rng).with_requires_grad(true),
                v_up: Tensor::zeros(&[rank, n]).with_requires_grad(true),
            })
            .collect();
        Self {
            layers,
            rank,
            scale: 1.0 / rank as f64,
        }
    }
}

/// `base + scale · (x · down) · up` on plain tensors.
pub fn lora_forward_patch(
    base: &Tensor,
    x: &Tensor,
    down: &Tensor,
    up: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let n = x.cols();
    let rank = down.cols();
    if rank > n {
        return Err(Error::Config(format!("LoRA rank {rank} exceeds width {n}")));
    }
    let mut tape = Tape::new();
    let (b, xv, d, u) = (
        tape.leaf(base),
        tape.leaf(x),
        tape.leaf(down),
        tape.leaf(up),
    );
    let out = lora_patch(&mut tape, b, xv, d, u, scale)?;
    Ok(tape.tensor(out))
}

/// A trainable method: owns every parameter besides the classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PromptMethod {
    HeadOnly,
    IdSpam(IdSpamParams),
    MeanPool(PromptMlp),
    Static(StaticPromptParams),
    Lora(LoraParams),
}

/// Per-method parameter breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub method_params: usize,
    pub head_params: usize,
    pub total: usize,
}

impl PromptMethod {
    /// Seeded initialisation for a backbone of width `n` and depth `layers`.
    pub fn init(cfg: &MethodConfig, n: usize, layers: usize, seed: u64) -> Result<Self> {
        cfg.validate(n, layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match cfg.kind {
            MethodKind::HeadOnly => PromptMethod::HeadOnly,
            MethodKind::IdSpam => PromptMethod::IdSpam(IdSpamParams::init(cfg, n, &mut rng)),
            MethodKind::MeanPool => PromptMethod::MeanPool(PromptMlp::init(
                n,
                cfg.bottleneck_for(n),
                n,
                cfg.prompt_len,
                cfg.init_std,
                cfg.outer_relu,
                &mut rng,
            )),
            MethodKind::PromptTuning | MethodKind::Lpt => {
                PromptMethod::Static(StaticPromptParams {
                    values: Tensor::randn(&[n, cfg.prompt_len], cfg.init_std, &mut rng)
                        .with_requires_grad(true),
                    inject_at: cfg.layer_for(layers),
                })
            }
            MethodKind::Lora => {
                PromptMethod::Lora(LoraParams::init(n, layers, cfg.lora_rank, &mut rng))
            }
        })
    }

    /// Trainable tensors in registry order, with stable names.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            PromptMethod::HeadOnly => Vec::new(),
            PromptMethod::IdSpam(p) => p
                .tensors()
                .into_iter()
                .map(|(k, t)| (k.to_string(), t))
                .collect(),
            PromptMethod::MeanPool(m) => m
                .tensors()
                .into_iter()
                .map(|(k, t)| (k.to_string(), t))
                .collect(),
            PromptMethod::Static(s) => vec![("prompt".to_string(), &s.values)],
            PromptMethod::Lora(l) => l
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, layer)| {
                    [
                        (format!("layers.{i}.q_down"), &layer.q_down),
                        (format!("layers.{i}.q_up"), &layer.q_up),
                        (format!("layers.{i}.v_down"), &layer.v_down),
                        (format!("layers.{i}.v_up"), &layer.v_up),
                    ]
                })
                .collect(),
        }
    }

    /// Same order as [`PromptMethod::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PromptMethod::HeadOnly => Vec::new(),
            PromptMethod::IdSpam(p) => p.tensors_mut(),
            PromptMethod::MeanPool(m) => m.tensors_mut(),
            PromptMethod::Static(s) => vec![&mut s.values],
            PromptMethod::Lora(l) => l
                .layers
                .iter_mut()
                .flat_map(|layer| {
                    [
                        &mut layer.q_down,
                        &mut layer.q_up,
                        &mut layer.v_down,
                        &mut layer.v_up,
                    ]
                })
                .collect(),
        }
    }

    /// Brute-force count over the registry.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> MethodVars {
        match self {
            PromptMethod::HeadOnly => MethodVars::None,
            PromptMethod::IdSpam(p) => MethodVars::IdSpam(
                AttentionVars {
                    w_q: tape.leaf(&p.w_q),
                    w_k: tape.leaf(&p.w_k),
                    w_v: tape.leaf(&p.w_v),
                },
                MlpVars::bind(&p.mlp, tape),
            ),
            PromptMethod::MeanPool(m) => MethodVars::MeanPool(MlpVars::bind(m, tape)),
            PromptMethod::Static(s) => MethodVars::Static(tape.leaf(&s.values)),
            PromptMethod::Lora(l) => MethodVars::Lora(
                l.layers
                    .iter()
                    .map(|layer| LoraLayerVars {
                        q_down: tape.leaf(&layer.q_down),
                        q_up: tape.leaf(&layer.q_up),
                        v_down: tape.leaf(&layer.v_down),
                        v_up: tape.leaf(&layer.v_up),
                        scale: l.scale,
                    })
                    .collect(),
            ),
        }
    }

    /// Generates the prompt for one input, if the method has one.
    pub fn generate(&self, emb: &EmbeddingMatrix) -> Result<Option<SoftPrompt>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let e = tape.constant(emb.values.shape().to_vec(), emb.values.data().to_vec())?;
        match vars.generate(&mut tape, e, &emb.pad_mask)? {
            Some(p) => Ok(Some(SoftPrompt::new(tape.tensor(p))?)),
            None => Ok(None),
        }
    }
}

/// A method's parameters bound to one tape.
#[derive(Debug, Clone)]
pub enum MethodVars {
    None,
    IdSpam(AttentionVars, MlpVars),
    MeanPool(MlpVars),
    Static(Var),
    Lora(Vec<LoraLayerVars>),
}

impl MethodVars {
    /// Registry order, matching [`PromptMethod::tensors`].
    pub fn all(&self) -> Vec<Var> {
        match self {
            MethodVars::None => Vec::new(),
            MethodVars::IdSpam(a, m) => {
                let mut out = vec![a.w_q, a.w_k, a.w_v];
                out.extend(m.all());
                out
            }
            MethodVars::MeanPool(m) => m.all(),
            MethodVars::Static(v) => vec![*v],
            MethodVars::Lora(layers) => layers
                .iter()
                .flat_map(|l| [l.q_down, l.q_up, l.v_down, l.v_up])
                .collect(),
        }
    }

    pub fn generate(&self, tape: &mut Tape<'_>, emb: Var, pad_mask: &[f64]) -> Result<Option<Var>> {
        Ok(match self {
            MethodVars::None | MethodVars::Lora(_) => None,
            MethodVars::IdSpam(att, mlp) => {
                let pooled = att.attend_and_pool(tape, emb, pad_mask)?;
                Some(mlp.generate(tape, pooled)?)
            }
            MethodVars::MeanPool(mlp) => {
                let pooled = mean_pool_on_tape(tape, emb, pad_mask)?;
                Some(mlp.generate(tape, pooled)?)
            }
            MethodVars::Static(v) => Some(*v),
        })
    }

    pub fn lora(&self) -> Option<&[LoraLayerVars]> {
        match self {
            MethodVars::Lora(l) => Some(l),
            _ => None,
        }
    }
}

/// `A` for plain tensors.
pub fn attend_and_pool(emb: &EmbeddingMatrix, p: &IdSpamParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let att = AttentionVars {
        w_q: tape.leaf(&p.w_q),
        w_k: tape.leaf(&p.w_k),
        w_v: tape.leaf(&p.w_v),
    };
    let e = tape.constant(emb.values.shape().to_vec(), emb.values.data().to_vec())?;
    let a = att.attend_and_pool(&mut tape, e, &emb.pad_mask)?;
    Ok(tape.tensor(a))
}

/// Mean of the real rows of `emb` for plain tensors.
pub fn mean_pool(emb: &EmbeddingMatrix) -> Result<Tensor> {
    let mut tape = Tape::new();
    let e = tape.constant(emb.values.shape().to_vec(), emb.values.data().to_vec())?;
    let a = mean_pool_on_tape(&mut tape, e, &emb.pad_mask)?;
    Ok(tape.tensor(a))
}

/// Pooled context to prompt for plain tensors.
pub fn generate_prompt(pooled: &Tensor, mlp: &PromptMlp) -> Result<SoftPrompt> {
    if !pooled.is_finite() {
        return Err(Error::NonFinite("pooled context"));
    }
    let mut tape = Tape::new();
    let vars = MlpVars::bind(mlp, &mut tape);
    let a = tape.leaf(pooled);
    let p = vars.generate(&mut tape, a)?;
    SoftPrompt::new(tape.tensor(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn random_emb(rows: usize, n: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Tensor::randn(&[rows, n], 1.0, rng), vec![1.0; rows]).unwrap()
    }

    fn id_spam(n: usize, rng: &mut ChaCha8Rng) -> IdSpamParams {
        let cfg = MethodConfig {
            prompt_len: 2,
            init_std: 0.5,
            ..MethodConfig::default()
        };
        IdSpamParams::init(&cfg, n, rng)
    }

    #[test]
    fn single_row_pools_to_its_value() {
        let mut rng = rng();
        let p = id_spam(8, &mut rng);
        let e = random_emb(1, 8, &mut rng);
        let a = attend_and_pool(&e, &p).unwrap();
        let mut tape = Tape::new();
        let (ev, wv) = (tape.leaf(&e.values), tape.leaf(&p.w_v));
        let want = tape.matmul(ev, wv).unwrap();
        assert!(a.max_abs_diff(&tape.tensor(want)) < 1e-15);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut rng = rng();
        let mut p = id_spam(8, &mut rng);
        p.w_q = Tensor::zeros(&[8, 8]);
        p.w_k = Tensor::zeros(&[8, 8]);
        let e = random_emb(5, 8, &mut rng);
        let a = attend_and_pool(&e, &p).unwrap();
        let mean = mean_pool(&e).unwrap();
        let mut tape = Tape::new();
        let m = tape.leaf_owned(mean.reshape(&[1, 8]).unwrap());
        let wv = tape.leaf(&p.w_v);
        let want = tape.matmul(m, wv).unwrap();
        assert!(a.max_abs_diff(&tape.tensor(want)) < 1e-12);
    }

    #[test]
    fn padding_is_ignored_by_pooling() {
        let mut rng = rng();
        let p = id_spam(8, &mut rng);
        let e = random_emb(4, 8, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|i| e.values.row(i).to_vec()).collect();
        rows.push(vec![123.0; 8]);
        let padded =
            EmbeddingMatrix::new(Tensor::from_rows(&rows), vec![1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let a = attend_and_pool(&e, &p).unwrap();
        let b = attend_and_pool(&padded, &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(
            mean_pool(&e)
                .unwrap()
                .max_abs_diff(&mean_pool(&padded).unwrap())
                < 1e-12
        );
    }

    #[test]
    fn all_padding_is_an_error() {
        let mut rng = rng();
        let p = id_spam(8, &mut rng);
        let e = EmbeddingMatrix {
            values: Tensor::zeros(&[2, 8]),
            pad_mask: vec![0.0, 0.0],
        };
        assert!(attend_and_pool(&e, &p).is_err());
    }

    #[test]
    fn zero_context_zero_bias_gives_zero_prompt() {
        let mut rng = rng();
        let p = id_spam(8, &mut rng);
        let s = generate_prompt(&Tensor::zeros(&[8]), &p.mlp).unwrap();
        assert_eq!(s.values.shape(), &[8, 2]);
        assert!(s.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_preactivations_clamp_to_relu_of_bias() {
        let mut rng = rng();
        let mut p = id_spam(8, &mut rng);
        p.mlp.w_down = Tensor::full(&[8, 2], -1.0);
        p.mlp.b_down = Tensor::full(&[2], -0.5);
        p.mlp.b_up = Tensor::vector((0..16).map(|i| i as f64 - 8.0).collect());
        let s = generate_prompt(&Tensor::full(&[8], 1.0), &p.mlp).unwrap();
        let want: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0).max(0.0)).collect();
        assert_eq!(s.values.data(), want.as_slice());
    }

    #[test]
    fn hand_computed_prompt() {
        // n = 4, t = 2, c = 2
        let mlp = PromptMlp {
            w_down: Tensor::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, -1.0],
                vec![0.5, 0.5],
            ]),
            b_down: Tensor::vector(vec![0.1, -0.2]),
            w_up: Tensor::from_rows(&[
                vec![1.0, -1.0, 0.5, 0.0, 2.0, 1.0, -0.5, 0.25],
                vec![0.0, 1.0, 1.0, -2.0, 0.5, 0.0, 1.0, 1.0],
            ]),
            b_up: Tensor::vector(vec![0.0, 0.1, 0.0, 0.0, -0.3, 0.0, 0.2, 0.0]),
            hidden: 4,
            prompt_len: 2,
            outer_relu: true,
        };
        let a = Tensor::vector(vec![1.0, 2.0, 0.5, -1.0]);
        // h = ReLU([1 + 0.5 - 0.5 + 0.1, 2 - 0.5 - 0.5 - 0.2]) = [1.1, 0.8]
        // u = ReLU(1.1·row0 + 0.8·row1 + b_up)
        let h = [1.1, 0.8];
        let want: Vec<f64> = (0..8)
            .map(|j| {
                (h[0] * mlp.w_up.at(0, j) + h[1] * mlp.w_up.at(1, j) + mlp.b_up.data()[j]).max(0.0)
            })
            .collect();
        let s = generate_prompt(&a, &mlp).unwrap();
        assert_eq!(s.values.shape(), &[4, 2]);
        for (got, w) in s.values.data().iter().zip(&want) {
            assert!((got - w).abs() < 1e-12);
        }
        assert!((s.values.at(0, 0) - 1.1).abs() < 1e-12);
        assert!((s.values.at(0, 1) - 0.0).abs() < 1e-12);
        assert!((s.values.at(2, 0) - 2.3).abs() < 1e-12);
    }

    #[test]
    fn outer_relu_flag_allows_negative_entries() {
        let mut rng = rng();
        let mut p = id_spam(8, &mut rng);
        p.mlp.outer_relu = false;
        p.mlp.b_up = Tensor::full(&[16], -1.0);
        let s = generate_prompt(&Tensor::zeros(&[8]), &p.mlp).unwrap();
        assert!(s.values.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn lora_patch_cases() {
        let mut rng = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let base = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let down = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let zero_up = Tensor::zeros(&[2, 4]);
        let out = lora_forward_patch(&base, &x, &down, &zero_up, 0.5).unwrap();
        assert!(out.bitwise_eq(&base));

        // full rank: down = I, up = Δ
        let delta = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let out = lora_forward_patch(&base, &x, &Tensor::identity(4), &delta, 1.0).unwrap();
        let mut tape = Tape::new();
        let (xv, dv) = (tape.leaf(&x), tape.leaf(&delta));
        let xd = tape.matmul(xv, dv).unwrap();
        let bv = tape.leaf(&base);
        let want = tape.add(bv, xd).unwrap();
        assert!(out.max_abs_diff(&tape.tensor(want)) < 1e-12);

        let too_wide = Tensor::zeros(&[4, 5]);
        assert!(lora_forward_patch(&base, &x, &too_wide, &Tensor::zeros(&[5, 4]), 1.0).is_err());
    }

    #[test]
    fn closed_forms_match_registry() {
        let n = 8;
        let cfg = |kind| MethodConfig {
            kind,
            prompt_len: 2,
            bottleneck: Some(4),
            d_k: Some(8),
            lora_rank: 2,
            ..MethodConfig::default()
        };
        let count = |kind| {
            PromptMethod::init(&cfg(kind), n, 2, 0)
                .unwrap()
                .param_count()
        };
        assert_eq!(count(MethodKind::IdSpam), 308);
        assert_eq!(cfg(MethodKind::IdSpam).closed_form_params(n, 2), 308);
        assert_eq!(count(MethodKind::PromptTuning), 16);
        assert_eq!(count(MethodKind::Lora), 128);
        assert_eq!(count(MethodKind::MeanPool), 308 - 3 * 64);
        assert_eq!(count(MethodKind::HeadOnly), 0);
    }

    #[test]
    fn static_prompt_ignores_input() {
        let mut rng = rng();
        let cfg = MethodConfig {
            kind: MethodKind::PromptTuning,
            prompt_len: 3,
            ..MethodConfig::default()
        };
        let m = PromptMethod::init(&cfg, 8, 2, 1).unwrap();
        let a = m.generate(&random_emb(4, 8, &mut rng)).unwrap().unwrap();
        let b = m.generate(&random_emb(6, 8, &mut rng)).unwrap().unwrap();
        assert!(a.values.bitwise_eq(&b.values));
    }

    #[test]
    fn id_spam_prompt_depends_on_input() {
        let mut rng = rng();
        let cfg = MethodConfig {
            prompt_len: 2,
            init_std: 0.5,
            ..MethodConfig::default()
        };
        let m = PromptMethod::init(&cfg, 8, 2, 1).unwrap();
        let e1 = random_emb(4, 8, &mut rng);
        let e2 = random_emb(4, 8, &mut rng);
        let a = m.generate(&e1).unwrap().unwrap();
        let b = m.generate(&e2).unwrap().unwrap();
        assert!(a.values.max_abs_diff(&b.values) > 0.0);
        assert!(a
            .values
            .bitwise_eq(&m.generate(&e1).unwrap().unwrap().values));
        assert!(a.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = MethodConfig::default();
        cfg.bottleneck = Some(8);
        assert!(cfg.validate(8, 2).is_err());
        cfg.bottleneck = None;
        cfg.inject_layer = Some(2);
        assert!(matches!(
            cfg.validate(8, 2),
            Err(Error::LayerOutOfRange { .. })
        ));
        let lora = MethodConfig {
            kind: MethodKind::Lora,
            lora_rank: 9,
            ..MethodConfig::default()
        };
        assert!(lora.validate(8, 2).is_err());
        assert!(MethodKind::parse("nope").is_err());
        for k in MethodKind::ALL {
            assert_eq!(MethodKind::parse(k.name()).unwrap(), k);
        }
    }
}
