//! Frozen pre-layer-norm transformer encoder with a prompt injection point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    /// Hidden dimension `n`.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub num_classes: usize,
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            hidden: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            max_seq: 48,
            num_classes: 2,
            init_std: default_init_std(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.max_seq == 0 || self.ffn_dim == 0 {
            return bad("layers, vocab_size, max_seq and ffn_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!(
                "init_std must be finite and >= 0, got {}",
                self.init_std
            ));
        }
        Ok(())
    }
}

/// Input embeddings `E` of one sequence, plus which rows are real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Tensor,
    /// 1 for real tokens, 0 for padding.
    pub pad_mask: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Tensor, pad_mask: Vec<f64>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != pad_mask.len() || pad_mask.is_empty() {
            return Err(Error::shape("embedding", values.shape(), &[pad_mask.len()]));
        }
        if !pad_mask.iter().any(|&m| m != 0.0) {
            return Err(Error::EmptySequence);
        }
        Ok(Self { values, pad_mask })
    }

    pub fn seq_len(&self) -> usize {
        self.pad_mask.len()
    }

    /// Reorders rows (and the mask) so that output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| self.values.row(p).to_vec()).collect();
        Self {
            values: Tensor::from_rows(&rows),
            pad_mask: perm.iter().map(|&p| self.pad_mask[p]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl LayerParams {
    fn init(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.hidden;
        let std = cfg.init_std;
        let mut w = |r: usize, c: usize| Tensor::randn(&[r, c], std, rng);
        Self {
            ln1_gamma: Tensor::full(&[n], 1.0),
            ln1_beta: Tensor::zeros(&[n]),
            w_q: w(n, n),
            b_q: Tensor::zeros(&[n]),
            w_k: w(n, n),
            b_k: Tensor::zeros(&[n]),
            w_v: w(n, n),
            b_v: Tensor::zeros(&[n]),
            w_o: w(n, n),
            b_o: Tensor::zeros(&[n]),
            ln2_gamma: Tensor::full(&[n], 1.0),
            ln2_beta: Tensor::zeros(&[n]),
            w_ff1: w(n, cfg.ffn_dim),
            b_ff1: Tensor::zeros(&[cfg.ffn_dim]),
            w_ff2: w(cfg.ffn_dim, n),
            b_ff2: Tensor::zeros(&[n]),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

/// Tape handles for one layer, in [`LayerParams::tensors`] order.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("head.weight", &self.weight), ("head.bias", &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Low-rank deltas on the query and value projections of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LoraLayerVars {
    pub q_down: Var,
    pub q_up: Var,
    pub v_down: Var,
    pub v_up: Var,
    pub scale: f64,
}

/// Frozen body parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct BodyVars {
    layers: Vec<LayerVars>,
    final_ln: (Var, Var),
}

/// A prompt to prepend at the input of layer `layer`; `prompt` is `n × t`.
#[derive(Debug, Clone, Copy)]
pub struct Injection {
    pub prompt: Var,
    pub layer: usize,
}

/// Inverted dropout driven by its own seeded stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mask = (0..tape.value(x).len())
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        tape.mul_const(x, mask)
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Input to each layer, then the final normalised states; `layers + 1` entries.
    pub hidden_states: Vec<Var>,
    /// Row index of the pooled token in the final states.
    pub pooled_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    pub head: ClassifierHead,
}

impl BackboneModel {
    /// Seeded Gaussian initialisation; body frozen, head trainable.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.hidden;
        let std = config.init_std;
        let token_embedding = Tensor::randn(&[config.vocab_size, n], std, &mut rng);
        let position_embedding = Tensor::randn(&[config.max_seq, n], std, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(&config, &mut rng))
            .collect();
        let head = ClassifierHead {
            weight: Tensor::randn(&[n, config.num_classes], std, &mut rng).with_requires_grad(true),
            bias: Tensor::zeros(&[config.num_classes]).with_requires_grad(true),
        };
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gamma: Tensor::full(&[n], 1.0),
            final_ln_beta: Tensor::zeros(&[n]),
            head,
            config,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn num_layers(&self) -> usize {
        self.config.layers
    }

    /// Frozen body tensors with stable names.
    pub fn body_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .tensors()
                    .into_iter()
                    .map(|(name, t)| (format!("layers.{i}.{name}"), t)),
            );
        }
        out.push(("final_ln.gamma".into(), &self.final_ln_gamma));
        out.push(("final_ln.beta".into(), &self.final_ln_beta));
        out
    }

    pub fn body_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_ln_gamma);
        out.push(&mut self.final_ln_beta);
        out
    }

    /// `E(tokens)`: token plus positional embedding per row; PAD rows masked.
    pub fn embed(&self, tokens: &[usize]) -> Result<EmbeddingMatrix> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        let n = self.config.hidden;
        let mut data = Vec::with_capacity(tokens.len() * n);
        for (pos, &id) in tokens.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(Error::OutOfVocab {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
            let tok = self.token_embedding.row(id);
            let p = self.position_embedding.row(pos);
            data.extend(tok.iter().zip(p).map(|(a, b)| a + b));
        }
        let pad_mask = tokens
            .iter()
            .map(|&id| if id == PAD { 0.0 } else { 1.0 })
            .collect();
        EmbeddingMatrix::new(Tensor::new(vec![tokens.len(), n], data)?, pad_mask)
    }

    pub fn bind_body<'p>(&'p self, tape: &mut Tape<'p>) -> BodyVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let v: Vec<Var> = l.tensors().iter().map(|(_, t)| tape.leaf(t)).collect();
                LayerVars {
                    ln1: (v[0], v[1]),
                    q: (v[2], v[3]),
                    k: (v[4], v[5]),
                    v: (v[6], v[7]),
                    o: (v[8], v[9]),
                    ln2: (v[10], v[11]),
                    ff1: (v[12], v[13]),
                    ff2: (v[14], v[15]),
                }
            })
            .collect();
        let final_ln = (
            tape.leaf(&self.final_ln_gamma),
            tape.leaf(&self.final_ln_beta),
        );
        BodyVars { layers, final_ln }
    }

    pub fn bind_head<'p>(&'p self, tape: &mut Tape<'p>) -> HeadVars {
        HeadVars {
            weight: tape.leaf(&self.head.weight),
            bias: tape.leaf(&self.head.bias),
        }
    }

    /// Encoder forward on `tape`. Layers before `injection.layer` see the raw
    /// sequence; at that layer's input the prompt's `t` columns become `t`
    /// leading rows and stay for the remaining layers. The head reads the
    /// final state of the first real token.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_>,
        body: &BodyVars,
        head: HeadVars,
        emb: Var,
        pad_mask: &[f64],
        injection: Option<Injection>,
        lora: Option<&[LoraLayerVars]>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardOutput> {
        let n = self.config.hidden;
        if let Some(inj) = injection {
            if inj.layer >= self.config.layers {
                return Err(Error::LayerOutOfRange {
                    layer: inj.layer,
                    layers: self.config.layers,
                });
            }
            let s = tape.shape(inj.prompt);
            if s.len() != 2 || s[0] != n {
                return Err(Error::shape("prompt injection", s, &[n]));
            }
        }
        if let Some(l) = lora {
            if l.len() != self.config.layers {
                return Err(Error::Config(format!(
                    "{} LoRA layers for a {}-layer backbone",
                    l.len(),
                    self.config.layers
                )));
            }
        }
        if tape.shape(emb) != [pad_mask.len(), n] {
            return Err(Error::shape(
                "embedding",
                tape.shape(emb),
                &[pad_mask.len(), n],
            ));
        }
        let mut x = emb;
        let mut key_mask = pad_mask.to_vec();
        let first_real = pad_mask
            .iter()
            .position(|&m| m != 0.0)
            .ok_or(Error::EmptySequence)?;
        let mut pooled_row = first_real;
        let mut hidden_states = Vec::with_capacity(self.config.layers + 1);

        for (li, lv) in body.layers.iter().enumerate() {
            if let Some(inj) = injection.filter(|inj| inj.layer == li) {
                let rows = tape.transpose(inj.prompt)?;
                let t = tape.shape(rows)[0];
                x = tape.concat_rows(rows, x)?;
                let mut mask = vec![1.0; t];
                mask.extend_from_slice(&key_mask);
                key_mask = mask;
                pooled_row += t;
            }
            hidden_states.push(x);
            let lora_layer = lora.map(|l| l[li]);
            x = self.layer_forward(tape, lv, x, &key_mask, lora_layer, dropout.as_deref_mut())?;
        }
        let h = tape.layer_norm(x, body.final_ln.0, body.final_ln.1, LN_EPS)?;
        hidden_states.push(h);
        let pooled = tape.select_row(h, pooled_row)?;
        let pooled = tape.reshape(pooled, &[1, n])?;
        let logits = tape.matmul(pooled, head.weight)?;
        let logits = tape.add_bias(logits, head.bias)?;
        let logits = tape.reshape(logits, &[self.config.num_classes])?;
        Ok(ForwardOutput {
            logits,
            hidden_states,
            pooled_row,
        })
    }

    fn layer_forward(
        &self,
        tape: &mut Tape<'_>,
        lv: &LayerVars,
        x: Var,
        key_mask: &[f64],
        lora: Option<LoraLayerVars>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let n = self.config.hidden;
        let heads = self.config.heads;
        let dh = n / heads;
        let s = tape.shape(x)[0];

        let h = tape.layer_norm(x, lv.ln1.0, lv.ln1.1, LN_EPS)?;
        let mut q = affine(tape, h, lv.q)?;
        let k = affine(tape, h, lv.k)?;
        let mut v = affine(tape, h, lv.v)?;
        if let Some(l) = lora {
            q = lora_patch(tape, q, h, l.q_down, l.q_up, l.scale)?;
            v = lora_patch(tape, v, h, l.v_down, l.v_up, l.scale)?;
        }
        let mask: Vec<f64> = (0..s).flat_map(|_| key_mask.iter().copied()).collect();
        let mut ctx = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = tape.softmax_rows(scores, Some(&mask))?;
            ctx.push(tape.matmul(att, vh)?);
        }
        let ctx = if ctx.len() == 1 {
            ctx[0]
        } else {
            tape.concat_cols(&ctx)?
        };
        let mut attn_out = affine(tape, ctx, lv.o)?;
        if let Some(d) = dropout.as_deref_mut() {
            attn_out = d.apply(tape, attn_out)?;
        }
        let x = tape.add(x, attn_out)?;

        let h = tape.layer_norm(x, lv.ln2.0, lv.ln2.1, LN_EPS)?;
        let f = affine(tape, h, lv.ff1)?;
        let f = tape.relu(f);
        let mut f = affine(tape, f, lv.ff2)?;
        if let Some(d) = dropout {
            f = d.apply(tape, f)?;
        }
        tape.add(x, f)
    }

    /// Convenience forward without gradients. Returns class logits and the
    /// per-layer hidden states (layer inputs, then the final states).
    pub fn forward_with_injection(
        &self,
        tokens: &[usize],
        prompt: Option<&crate::methods::SoftPrompt>,
        layer: usize,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let emb = self.embed(tokens)?;
        let mut tape = Tape::new();
        let body = self.bind_body(&mut tape);
        let head = self.bind_head(&mut tape);
        let injection = prompt.map(|p| Injection {
            prompt: tape.leaf(&p.values),
            layer,
        });
        let x = tape.constant(emb.values.shape().to_vec(), emb.values.data().to_vec())?;
        let out = self.forward_on_tape(
            &mut tape,
            &body,
            head,
            x,
            &emb.pad_mask,
            injection,
            None,
            None,
        )?;
        let hidden = out.hidden_states.iter().map(|&v| tape.tensor(v)).collect();
        Ok((tape.tensor(out.logits), hidden))
    }
}

fn affine(tape: &mut Tape<'_>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// `base + scale · (x · down) · up`
pub fn lora_patch(
    tape: &mut Tape<'_>,
    base: Var,
    x: Var,
    down: Var,
    up: Var,
    scale: f64,
) -> Result<Var> {
    let low = tape.matmul(x, down)?;
    let delta = tape.matmul(low, up)?;
    let delta = tape.scale(delta, scale);
    tape.add(base, delta)
}
