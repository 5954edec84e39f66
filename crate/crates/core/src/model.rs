//! A frozen backbone paired with one trainable method.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneConfig, BackboneModel, Dropout, ForwardOutput, Injection};
use crate::error::{Error, Result};
use crate::methods::{MethodConfig, ParamCount, PromptMethod, SoftPrompt};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftModel {
    pub backbone: BackboneModel,
    pub method_config: MethodConfig,
    pub method: PromptMethod,
    /// Layer whose input receives the prompt; ignored by non-prompt methods.
    pub inject_layer: usize,
}

/// One forward pass recorded on a tape.
#[derive(Debug)]
pub struct Recorded {
    pub output: ForwardOutput,
    pub prompt: Option<Var>,
    /// Trainable handles in [`PeftModel::trainable_parameters`] order.
    pub trainable: Vec<Var>,
}

impl PeftModel {
    pub fn new(backbone: BackboneModel, method_config: MethodConfig, seed: u64) -> Result<Self> {
        let n = backbone.hidden();
        let layers = backbone.num_layers();
        let method = PromptMethod::init(&method_config, n, layers, seed)?;
        let inject_layer = method_config.layer_for(layers);
        Ok(Self {
            backbone,
            method_config,
            method,
            inject_layer,
        })
    }

    /// Fresh backbone (seed `seed`) and method (seed `seed + 1`).
    pub fn build(backbone: BackboneConfig, method: MethodConfig, seed: u64) -> Result<Self> {
        let bb = BackboneModel::new(backbone, seed)?;
        Self::new(bb, method, seed.wrapping_add(1))
    }

    /// Token budget per example once the prompt rows are reserved.
    pub fn encoding_budget(&self) -> usize {
        self.backbone
            .config
            .max_seq
            .saturating_sub(self.method_config.prompt_tokens())
    }

    /// Exactly the tensors an optimiser may update: method, then head.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .method
            .tensors()
            .into_iter()
            .map(|(k, t)| (format!("method.{k}"), t))
            .collect();
        out.extend(
            self.backbone
                .head
                .tensors()
                .into_iter()
                .map(|(k, t)| (k.to_string(), t)),
        );
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.method.tensors_mut();
        out.extend(self.backbone.head.tensors_mut());
        out
    }

    pub fn param_count(&self) -> ParamCount {
        let method_params = self.method.param_count();
        let head_params = self.backbone.head.param_count();
        ParamCount {
            method_params,
            head_params,
            total: method_params + head_params,
        }
    }

    pub fn record<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        tokens: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<Recorded> {
        let emb = self.backbone.embed(tokens)?;
        let body = self.backbone.bind_body(tape);
        let head = self.backbone.bind_head(tape);
        let method = self.method.bind(tape);
        let x = tape.constant(emb.values.shape().to_vec(), emb.values.data().to_vec())?;
        let prompt = method.generate(tape, x, &emb.pad_mask)?;
        let layer = match &self.method {
            PromptMethod::Static(s) => s.inject_at,
            _ => self.inject_layer,
        };
        let injection = prompt.map(|prompt| Injection { prompt, layer });
        let output = self.backbone.forward_on_tape(
            tape,
            &body,
            head,
            x,
            &emb.pad_mask,
            injection,
            method.lora(),
            dropout,
        )?;
        let mut trainable = method.all();
        trainable.extend([head.weight, head.bias]);
        Ok(Recorded {
            output,
            prompt,
            trainable,
        })
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, None)?;
        Ok(tape.tensor(rec.output.logits))
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(self.logits(tokens)?.data()))
    }

    pub fn prompt_for(&self, tokens: &[usize]) -> Result<Option<SoftPrompt>> {
        let emb = self.backbone.embed(tokens)?;
        self.method.generate(&emb)
    }

    /// Cross-entropy loss and its gradient for every trainable tensor.
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        label: usize,
        dropout: Option<&mut Dropout>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, dropout)?;
        let loss = tape.cross_entropy(rec.output.logits, label)?;
        tape.backward(loss)?;
        let grads = rec
            .trainable
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect();
        Ok((tape.scalar(loss), grads))
    }

    pub fn loss(&self, tokens: &[usize], label: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, None)?;
        let loss = tape.cross_entropy(rec.output.logits, label)?;
        Ok(tape.scalar(loss))
    }

    /// Largest relative error between backprop gradients and central
    /// differences of [`PeftModel::loss`], over every trainable element.
    pub fn gradient_check(&self, tokens: &[usize], label: usize, step: f64) -> Result<GradCheck> {
        if step <= 0.0 {
            return Err(Error::Config("gradient check step must be > 0".into()));
        }
        let (_, analytic) = self.loss_and_grads(tokens, label, None)?;
        let names: Vec<String> = self
            .trainable_parameters()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        let mut probe = self.clone();
        let mut per_tensor = Vec::with_capacity(names.len());
        for (ti, name) in names.into_iter().enumerate() {
            let len = analytic[ti].len();
            let mut worst = 0.0f64;
            for i in 0..len {
                let orig = probe.trainable_tensors_mut()[ti].data()[i];
                probe.trainable_tensors_mut()[ti].data_mut()[i] = orig + step;
                let plus = probe.loss(tokens, label)?;
                probe.trainable_tensors_mut()[ti].data_mut()[i] = orig - step;
                let minus = probe.loss(tokens, label)?;
                probe.trainable_tensors_mut()[ti].data_mut()[i] = orig;
                if !(plus.is_finite() && minus.is_finite()) {
                    return Err(Error::NonFinite("gradient check loss"));
                }
                let numeric = (plus - minus) / (2.0 * step);
                worst = worst.max(crate::autodiff::relative_error(analytic[ti][i], numeric));
            }
            per_tensor.push((name, worst));
        }
        let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        Ok(GradCheck {
            max_rel_error,
            per_tensor,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub per_tensor: Vec<(String, f64)>,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::MethodKind;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 16,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            max_seq: 12,
            num_classes: 4,
            init_std: 0.3,
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn head_only_registry() {
        let m = PeftModel::build(cfg(), MethodConfig::new(MethodKind::HeadOnly), 1).unwrap();
        let names: Vec<String> = m
            .trainable_parameters()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        assert_eq!(names, ["head.weight", "head.bias"]);
    }

    #[test]
    fn id_spam_registry() {
        let mc = MethodConfig {
            prompt_len: 2,
            bottleneck: Some(4),
            ..MethodConfig::default()
        };
        let m = PeftModel::build(cfg(), mc, 1).unwrap();
        let names: Vec<String> = m
            .trainable_parameters()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        assert_eq!(
            names,
            [
                "method.w_q",
                "method.w_k",
                "method.w_v",
                "method.w_down",
                "method.b_down",
                "method.w_up",
                "method.b_up",
                "head.weight",
                "head.bias"
            ]
        );
        assert!(m
            .trainable_parameters()
            .iter()
            .all(|(_, t)| t.requires_grad()));
        let count = m.param_count();
        assert_eq!(count.method_params, 308);
        assert_eq!(count.head_params, 8 * 4 + 4);
    }

    #[test]
    fn lora_starts_at_the_base_model() {
        let base = PeftModel::build(cfg(), MethodConfig::new(MethodKind::HeadOnly), 4).unwrap();
        let mut mc = MethodConfig::new(MethodKind::Lora);
        mc.lora_rank = 2;
        let lora = PeftModel::new(base.backbone.clone(), mc, 9).unwrap();
        let tokens = [2, 5, 6, 3];
        assert!(base
            .logits(&tokens)
            .unwrap()
            .bitwise_eq(&lora.logits(&tokens).unwrap()));
        assert_eq!(lora.param_count().method_params, 2 * 2 * (8 * 2 + 2 * 8));
    }
}
