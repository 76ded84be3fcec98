//! Frozen-backbone prompted classifier.
//!
//! A frozen linear (or one-hidden-tanh) backbone maps input plus a learnable
//! prompt vector into feature space; logits are temperature-scaled cosine
//! similarities against frozen class prototypes. Only the prompt ever
//! trains. Gradients are closed-form and checked against the
//! finite-difference oracle in `numcore`.

use crate::error::{Error, Result};
use crate::numcore::{
    cross_entropy, fnv1a64, kl_divergence, softmax, RandomStream, RealMatrix, RealVector,
    PROB_FLOOR,
};

const PROTOTYPE_MIN_NORM: f64 = 1e-9;
const INIT_SPLIT_LABEL: &str = "model_init";

/// Frozen feature extractor shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Linear,
    OneHiddenTanh,
}

impl BackboneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Linear => "linear",
            BackboneKind::OneHiddenTanh => "one_hidden_tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BackboneKind::Linear),
            "one_hidden_tanh" => Ok(BackboneKind::OneHiddenTanh),
            other => Err(Error::config(
                "model.backbone",
                format!("unknown backbone kind `{other}`"),
            )),
        }
    }
}

/// Everything needed to build a model deterministically.
#[derive(Clone, Debug)]
pub struct ModelInitSpec {
    pub input_dim: usize,
    pub prompt_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub backbone: BackboneKind,
    pub init_seed: u64,
    pub init_scale: f64,
    pub tau_logit: f64,
}

impl ModelInitSpec {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("model.input_dim", self.input_dim),
            ("model.prompt_dim", self.prompt_dim),
            ("model.feature_dim", self.feature_dim),
            ("model.num_classes", self.num_classes),
        ] {
            if v < 1 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("model.init_scale", "must be positive"));
        }
        if !(self.tau_logit > 0.0 && self.tau_logit.is_finite()) {
            return Err(Error::config("model.tau_logit", "must be positive"));
        }
        Ok(())
    }
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub features: RealVector,
    pub logits: RealVector,
    pub probs: RealVector,
}

/// Prompted classifier: frozen weights plus one learnable prompt vector.
#[derive(Clone, Debug)]
pub struct PromptedClassifier {
    backbone: BackboneKind,
    w_in: RealMatrix,
    w_prompt: RealMatrix,
    w_hidden: Option<RealMatrix>,
    prototypes: RealMatrix,
    prototype_norms: Vec<f64>,
    prompt: RealVector,
    tau_logit: f64,
}

impl PromptedClassifier {
    /// Deterministic init: frozen weights uniform in [-scale, scale] from a
    /// stream split off the init seed, prototype rows redrawn until their
    /// norm clears the minimum, prompt zeroed.
    pub fn init(spec: &ModelInitSpec) -> Result<Self> {
        spec.validate()?;
        let mut stream = RandomStream::new(spec.init_seed).split_str(INIT_SPLIT_LABEL);
        let s = spec.init_scale;
        let draw_matrix = |stream: &mut RandomStream, rows: usize, cols: usize| -> Result<RealMatrix> {
            let v = stream.uniform_vector(rows * cols, -s, s)?;
            RealMatrix::from_vec(rows, cols, v.as_slice().to_vec())
        };
        let w_in = draw_matrix(&mut stream, spec.feature_dim, spec.input_dim)?;
        let w_prompt = draw_matrix(&mut stream, spec.feature_dim, spec.prompt_dim)?;
        let w_hidden = match spec.backbone {
            BackboneKind::Linear => None,
            BackboneKind::OneHiddenTanh => {
                Some(draw_matrix(&mut stream, spec.feature_dim, spec.feature_dim)?)
            }
        };
        let mut proto_data = Vec::with_capacity(spec.num_classes * spec.feature_dim);
        for _ in 0..spec.num_classes {
            loop {
                let row = stream.uniform_vector(spec.feature_dim, -s, s)?;
                if row.norm() > PROTOTYPE_MIN_NORM {
                    proto_data.extend_from_slice(row.as_slice());
                    break;
                }
            }
        }
        let prototypes = RealMatrix::from_vec(spec.num_classes, spec.feature_dim, proto_data)?;
        Self::assemble(
            spec.backbone,
            w_in,
            w_prompt,
            w_hidden,
            prototypes,
            RealVector::zeros(spec.prompt_dim),
            spec.tau_logit,
        )
    }

    /// Build from explicit parts, validating every shape invariant.
    pub fn assemble(
        backbone: BackboneKind,
        w_in: RealMatrix,
        w_prompt: RealMatrix,
        w_hidden: Option<RealMatrix>,
        prototypes: RealMatrix,
        prompt: RealVector,
        tau_logit: f64,
    ) -> Result<Self> {
        let f = w_in.rows();
        if w_prompt.rows() != f {
            return Err(Error::DimMismatch {
                context: "w_prompt rows",
                left: w_prompt.rows(),
                right: f,
            });
        }
        match (backbone, &w_hidden) {
            (BackboneKind::Linear, Some(_)) => {
                return Err(Error::config("model.backbone", "linear backbone takes no hidden layer"))
            }
            (BackboneKind::OneHiddenTanh, None) => {
                return Err(Error::config("model.backbone", "one_hidden_tanh requires a hidden layer"))
            }
            (BackboneKind::OneHiddenTanh, Some(h)) if h.rows() != f || h.cols() != f => {
                return Err(Error::DimMismatch {
                    context: "w_hidden shape",
                    left: h.rows(),
                    right: f,
                });
            }
            _ => {}
        }
        if prototypes.cols() != f {
            return Err(Error::DimMismatch {
                context: "prototype columns",
                left: prototypes.cols(),
                right: f,
            });
        }
        if prompt.len() != w_prompt.cols() {
            return Err(Error::DimMismatch {
                context: "prompt length",
                left: prompt.len(),
                right: w_prompt.cols(),
            });
        }
        if !(tau_logit > 0.0 && tau_logit.is_finite()) {
            return Err(Error::config("model.tau_logit", "must be positive"));
        }
        let prototype_norms: Vec<f64> =
            (0..prototypes.rows()).map(|r| norm_of(prototypes.row(r))).collect();
        if prototype_norms.iter().any(|&n| n <= PROTOTYPE_MIN_NORM) {
            return Err(Error::ZeroNorm("prototype row"));
        }
        Ok(Self {
            backbone,
            w_in,
            w_prompt,
            w_hidden,
            prototypes,
            prototype_norms,
            prompt,
            tau_logit,
        })
    }

    pub fn backbone(&self) -> BackboneKind {
        self.backbone
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn prompt_dim(&self) -> usize {
        self.w_prompt.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn tau_logit(&self) -> f64 {
        self.tau_logit
    }

    pub fn prompt(&self) -> &RealVector {
        &self.prompt
    }

    pub fn w_in(&self) -> &RealMatrix {
        &self.w_in
    }

    pub fn prototypes(&self) -> &RealMatrix {
        &self.prototypes
    }

    /// Replace the learnable prompt; frozen state is untouched.
    pub fn set_prompt(&mut self, prompt: RealVector) -> Result<()> {
        if prompt.len() != self.prompt_dim() {
            return Err(Error::DimMismatch {
                context: "set_prompt",
                left: prompt.len(),
                right: self.prompt_dim(),
            });
        }
        prompt.validate_finite("set_prompt")?;
        self.prompt = prompt;
        Ok(())
    }

    pub fn with_prompt(&self, prompt: RealVector) -> Result<Self> {
        let mut m = self.clone();
        m.set_prompt(prompt)?;
        Ok(m)
    }

    /// FNV-1a checksum over every frozen field (prompt excluded). Must be
    /// invariant across any training run.
    pub fn frozen_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.push(match self.backbone {
            BackboneKind::Linear => 0u8,
            BackboneKind::OneHiddenTanh => 1u8,
        });
        for d in [
            self.input_dim(),
            self.prompt_dim(),
            self.feature_dim(),
            self.num_classes(),
        ] {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&self.tau_logit.to_bits().to_le_bytes());
        let mut push_floats = |data: &[f64]| {
            for v in data {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        };
        push_floats(self.w_in.as_slice());
        push_floats(self.w_prompt.as_slice());
        if let Some(h) = &self.w_hidden {
            push_floats(h.as_slice());
        }
        push_floats(self.prototypes.as_slice());
        fnv1a64(&bytes)
    }

    /// Full forward pass: features, cosine logits, softmax probabilities.
    pub fn forward(&self, x: &RealVector) -> Result<Forward> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                context: "forward input",
                left: x.len(),
                right: self.input_dim(),
            });
        }
        let mut pre = self.w_in.matvec(x);
        pre.add_scaled(1.0, &self.w_prompt.matvec(&self.prompt));
        let features = match (&self.backbone, &self.w_hidden) {
            (BackboneKind::Linear, _) => pre,
            (BackboneKind::OneHiddenTanh, Some(h)) => h.matvec(&pre).map(f64::tanh),
            (BackboneKind::OneHiddenTanh, None) => unreachable!("validated at construction"),
        };
        let fnorm = features.norm();
        if fnorm == 0.0 {
            return Err(Error::ZeroNorm("forward features"));
        }
        let mut logits = vec![0.0; self.num_classes()];
        for (j, l) in logits.iter_mut().enumerate() {
            let row = self.prototypes.row(j);
            let dot: f64 = row.iter().zip(features.iter()).map(|(a, b)| a * b).sum();
            let cos = (dot / (fnorm * self.prototype_norms[j])).clamp(-1.0, 1.0);
            *l = cos / self.tau_logit;
        }
        let logits = RealVector::from_vec(logits)?;
        let probs = softmax(&logits)?;
        Ok(Forward {
            features,
            logits,
            probs,
        })
    }

    /// Backpropagate a gradient w.r.t. the logits down to (input, prompt).
    fn backprop(&self, fwd: &Forward, g_logits: &RealVector) -> (RealVector, RealVector) {
        let z = &fwd.features;
        let zn = z.norm();
        let fdim = self.feature_dim();
        let mut g_z = vec![0.0; fdim];
        for j in 0..self.num_classes() {
            let coef = g_logits[j] / self.tau_logit;
            if coef == 0.0 {
                continue;
            }
            let row = self.prototypes.row(j);
            let cn = self.prototype_norms[j];
            let cos_j = fwd.logits[j] * self.tau_logit;
            for f in 0..fdim {
                g_z[f] += coef * (row[f] / (zn * cn) - cos_j * z[f] / (zn * zn));
            }
        }
        let g_z = RealVector::from_vec(g_z).expect("finite backprop");
        let g_pre = match (&self.backbone, &self.w_hidden) {
            (BackboneKind::Linear, _) => g_z,
            (BackboneKind::OneHiddenTanh, Some(h)) => {
                let mut g_u = vec![0.0; fdim];
                for f in 0..fdim {
                    g_u[f] = (1.0 - z[f] * z[f]) * g_z[f];
                }
                h.transpose_matvec(&RealVector::from_vec(g_u).expect("finite backprop"))
            }
            (BackboneKind::OneHiddenTanh, None) => unreachable!(),
        };
        let grad_x = self.w_in.transpose_matvec(&g_pre);
        let grad_p = self.w_prompt.transpose_matvec(&g_pre);
        (grad_x, grad_p)
    }

    /// Gradient of cross-entropy w.r.t. the logits. Zero once the predicted
    /// probability of the label has hit the floor (the loss is constant
    /// there).
    fn ce_logit_grad(fwd: &Forward, label: usize) -> RealVector {
        let k = fwd.probs.len();
        if fwd.probs[label] <= PROB_FLOOR {
            return RealVector::zeros(k);
        }
        let mut g = fwd.probs.clone();
        g[label] -= 1.0;
        g
    }

    /// Gradients of KL(p || q) w.r.t. the logits of both distributions.
    fn kl_logit_grads(p: &RealVector, q: &RealVector, kl: f64) -> (RealVector, RealVector) {
        let g_lq = q.sub(p);
        let mut g_lp = vec![0.0; p.len()];
        for (k, g) in g_lp.iter_mut().enumerate() {
            let pk = p[k];
            *g = pk * ((pk.max(PROB_FLOOR).ln() - q[k].max(PROB_FLOOR).ln()) - kl);
        }
        (
            RealVector::from_vec(g_lp).expect("finite kl grad"),
            g_lq,
        )
    }

    pub fn loss_ce(&self, x: &RealVector, y: usize) -> Result<f64> {
        let fwd = self.forward(x)?;
        cross_entropy(&fwd.probs, y)
    }

    pub fn grad_input_ce(&self, x: &RealVector, y: usize) -> Result<RealVector> {
        let fwd = self.forward(x)?;
        if y >= fwd.probs.len() {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: fwd.probs.len(),
            });
        }
        let g_l = Self::ce_logit_grad(&fwd, y);
        Ok(self.backprop(&fwd, &g_l).0)
    }

    pub fn grad_prompt_ce(&self, x: &RealVector, y: usize) -> Result<RealVector> {
        let fwd = self.forward(x)?;
        if y >= fwd.probs.len() {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: fwd.probs.len(),
            });
        }
        let g_l = Self::ce_logit_grad(&fwd, y);
        Ok(self.backprop(&fwd, &g_l).1)
    }

    /// KL(probs(x_clean) || probs(x_adv)).
    pub fn loss_kl(&self, x_clean: &RealVector, x_adv: &RealVector) -> Result<f64> {
        let p = self.forward(x_clean)?.probs;
        let q = self.forward(x_adv)?.probs;
        kl_divergence(&p, &q)
    }

    /// d loss_kl / d x_adv, clean branch held constant.
    pub fn grad_input_kl(&self, x_clean: &RealVector, x_adv: &RealVector) -> Result<RealVector> {
        let p = self.forward(x_clean)?.probs;
        let fwd_q = self.forward(x_adv)?;
        let kl = kl_divergence(&p, &fwd_q.probs)?;
        let (_, g_lq) = Self::kl_logit_grads(&p, &fwd_q.probs, kl);
        Ok(self.backprop(&fwd_q, &g_lq).0)
    }

    /// d loss_kl / d prompt, differentiating through both branches.
    pub fn grad_prompt_kl(&self, x_clean: &RealVector, x_adv: &RealVector) -> Result<RealVector> {
        let fwd_p = self.forward(x_clean)?;
        let fwd_q = self.forward(x_adv)?;
        let kl = kl_divergence(&fwd_p.probs, &fwd_q.probs)?;
        let (g_lp, g_lq) = Self::kl_logit_grads(&fwd_p.probs, &fwd_q.probs, kl);
        let mut g = self.backprop(&fwd_p, &g_lp).1;
        g.add_scaled(1.0, &self.backprop(&fwd_q, &g_lq).1);
        Ok(g)
    }

    /// KL(probs(x_adv) || probs(x_clean)) — the reversed argument order.
    pub fn loss_kl_reversed(&self, x_clean: &RealVector, x_adv: &RealVector) -> Result<f64> {
        let q = self.forward(x_clean)?.probs;
        let p = self.forward(x_adv)?.probs;
        kl_divergence(&p, &q)
    }

    /// d loss_kl_reversed / d x_adv, clean branch held constant.
    pub fn grad_input_kl_reversed(
        &self,
        x_clean: &RealVector,
        x_adv: &RealVector,
    ) -> Result<RealVector> {
        let q = self.forward(x_clean)?.probs;
        let fwd_p = self.forward(x_adv)?;
        let kl = kl_divergence(&fwd_p.probs, &q)?;
        let (g_lp, _) = Self::kl_logit_grads(&fwd_p.probs, &q, kl);
        Ok(self.backprop(&fwd_p, &g_lp).0)
    }

    /// d loss_kl_reversed / d prompt, through both branches.
    pub fn grad_prompt_kl_reversed(
        &self,
        x_clean: &RealVector,
        x_adv: &RealVector,
    ) -> Result<RealVector> {
        let fwd_q = self.forward(x_clean)?;
        let fwd_p = self.forward(x_adv)?;
        let kl = kl_divergence(&fwd_p.probs, &fwd_q.probs)?;
        let (g_lp, g_lq) = Self::kl_logit_grads(&fwd_p.probs, &fwd_q.probs, kl);
        let mut g = self.backprop(&fwd_p, &g_lp).1;
        g.add_scaled(1.0, &self.backprop(&fwd_q, &g_lq).1);
        Ok(g)
    }
}

fn norm_of(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// --- flat text serialization -------------------------------------------
//
// `key = value-list` lines; floats printed at 17 significant digits so a
// round trip is bit-exact. Keys: backbone_kind, input_dim, prompt_dim,
// feature_dim, num_classes, tau_logit, w_in, w_prompt, w_hidden (tanh
// only), prototypes, prompt.

impl PromptedClassifier {
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "backbone_kind = {}", self.backbone.as_str());
        let _ = writeln!(out, "input_dim = {}", self.input_dim());
        let _ = writeln!(out, "prompt_dim = {}", self.prompt_dim());
        let _ = writeln!(out, "feature_dim = {}", self.feature_dim());
        let _ = writeln!(out, "num_classes = {}", self.num_classes());
        let _ = writeln!(out, "tau_logit = {}", fmt_exact(self.tau_logit));
        let _ = writeln!(out, "w_in = {}", join_floats(self.w_in.as_slice()));
        let _ = writeln!(out, "w_prompt = {}", join_floats(self.w_prompt.as_slice()));
        if let Some(h) = &self.w_hidden {
            let _ = writeln!(out, "w_hidden = {}", join_floats(h.as_slice()));
        }
        let _ = writeln!(out, "prototypes = {}", join_floats(self.prototypes.as_slice()));
        let _ = writeln!(out, "prompt = {}", join_floats(self.prompt.as_slice()));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields: std::collections::BTreeMap<&str, (usize, &str)> =
            std::collections::BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if fields.insert(key, (line_no, value.trim())).is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        let known = [
            "backbone_kind",
            "input_dim",
            "prompt_dim",
            "feature_dim",
            "num_classes",
            "tau_logit",
            "w_in",
            "w_prompt",
            "w_hidden",
            "prototypes",
            "prompt",
        ];
        for (key, (line, _)) in &fields {
            if !known.contains(key) {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        let take = |key: &str| -> Result<(usize, &str)> {
            fields.get(key).copied().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing key `{key}`"),
            })
        };
        let parse_usize = |key: &str| -> Result<usize> {
            let (line, v) = take(key)?;
            v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{key}` must be a non-negative integer"),
            })
        };
        let backbone = BackboneKind::parse(take("backbone_kind")?.1)?;
        let input_dim = parse_usize("input_dim")?;
        let prompt_dim = parse_usize("prompt_dim")?;
        let feature_dim = parse_usize("feature_dim")?;
        let num_classes = parse_usize("num_classes")?;
        let (tau_line, tau_raw) = take("tau_logit")?;
        let tau_logit: f64 = tau_raw.parse().map_err(|_| Error::Parse {
            line: tau_line,
            message: "`tau_logit` must be a real number".into(),
        })?;
        let floats = |key: &str, expect: usize| -> Result<Vec<f64>> {
            let (line, v) = take(key)?;
            let vals: std::result::Result<Vec<f64>, _> =
                v.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|_| Error::Parse {
                line,
                message: format!("`{key}` contains a non-numeric entry"),
            })?;
            if vals.len() != expect {
                return Err(Error::Parse {
                    line,
                    message: format!("`{key}` expects {expect} values, found {}", vals.len()),
                });
            }
            Ok(vals)
        };
        let w_in = RealMatrix::from_vec(feature_dim, input_dim, floats("w_in", feature_dim * input_dim)?)?;
        let w_prompt = RealMatrix::from_vec(
            feature_dim,
            prompt_dim,
            floats("w_prompt", feature_dim * prompt_dim)?,
        )?;
        let w_hidden = match backbone {
            BackboneKind::Linear => {
                if fields.contains_key("w_hidden") {
                    return Err(Error::Parse {
                        line: fields["w_hidden"].0,
                        message: "`w_hidden` is invalid for a linear backbone".into(),
                    });
                }
                None
            }
            BackboneKind::OneHiddenTanh => Some(RealMatrix::from_vec(
                feature_dim,
                feature_dim,
                floats("w_hidden", feature_dim * feature_dim)?,
            )?),
        };
        let prototypes = RealMatrix::from_vec(
            num_classes,
            feature_dim,
            floats("prototypes", num_classes * feature_dim)?,
        )?;
        let prompt = RealVector::from_vec(floats("prompt", prompt_dim)?)?;
        Self::assemble(backbone, w_in, w_prompt, w_hidden, prototypes, prompt, tau_logit)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_floats(vals: &[f64]) -> String {
    vals.iter()
        .map(|v| fmt_exact(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_gradient, max_relative_error};

    pub(crate) fn spec(backbone: BackboneKind, seed: u64) -> ModelInitSpec {
        ModelInitSpec {
            input_dim: 3,
            prompt_dim: 4,
            feature_dim: 5,
            num_classes: 3,
            backbone,
            init_seed: seed,
            init_scale: 1.0,
            tau_logit: 0.5,
        }
    }

    fn random_input(stream: &mut RandomStream, dim: usize) -> RealVector {
        stream.uniform_vector(dim, -1.0, 1.0).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_prompt_zero() {
        let s = spec(BackboneKind::OneHiddenTanh, 11);
        let a = PromptedClassifier::init(&s).unwrap();
        let b = PromptedClassifier::init(&s).unwrap();
        assert_eq!(a.frozen_checksum(), b.frozen_checksum());
        assert_eq!(a.w_in, b.w_in);
        assert_eq!(a.prototypes, b.prototypes);
        assert!(a.prompt().iter().all(|&v| v == 0.0));
        assert_eq!(a.prototypes.rows(), 3);
        assert_eq!(a.prototypes.cols(), 5);
    }

    #[test]
    fn equal_prototype_rows_give_equal_logits() {
        let base = PromptedClassifier::init(&spec(BackboneKind::Linear, 3)).unwrap();
        let row = base.prototypes.row(0).to_vec();
        let mut proto = Vec::new();
        proto.extend_from_slice(&row);
        proto.extend_from_slice(&row);
        let prototypes = RealMatrix::from_vec(2, row.len(), proto).unwrap();
        let m = PromptedClassifier::assemble(
            BackboneKind::Linear,
            base.w_in.clone(),
            base.w_prompt.clone(),
            None,
            prototypes,
            base.prompt.clone(),
            base.tau_logit,
        )
        .unwrap();
        let mut s = RandomStream::new(7);
        let x = random_input(&mut s, m.input_dim());
        let fwd = m.forward(&x).unwrap();
        assert_eq!(fwd.logits[0], fwd.logits[1]);
        assert_eq!(fwd.probs.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn tau_rescaling_scales_logits_keeps_argmax() {
        let m = PromptedClassifier::init(&spec(BackboneKind::OneHiddenTanh, 5)).unwrap();
        let mut halved = m.clone();
        halved.tau_logit = m.tau_logit / 2.0;
        let mut s = RandomStream::new(2);
        let x = random_input(&mut s, m.input_dim());
        let a = m.forward(&x).unwrap();
        let b = halved.forward(&x).unwrap();
        for j in 0..m.num_classes() {
            assert!((b.logits[j] - 2.0 * a.logits[j]).abs() < 1e-12);
        }
        let argmax = |v: &RealVector| {
            let mut best = 0;
            for i in 1..v.len() {
                if v[i] > v[best] {
                    best = i;
                }
            }
            best
        };
        assert_eq!(argmax(&a.logits), argmax(&b.logits));
    }

    #[test]
    fn logits_bounded_by_inverse_tau() {
        let m = PromptedClassifier::init(&spec(BackboneKind::Linear, 21)).unwrap();
        let mut s = RandomStream::new(3);
        for _ in 0..50 {
            let x = random_input(&mut s, m.input_dim());
            let fwd = m.forward(&x).unwrap();
            for j in 0..m.num_classes() {
                assert!(fwd.logits[j].abs() <= 1.0 / m.tau_logit + 1e-12);
            }
        }
    }

    #[test]
    fn forward_matches_scalar_rederivation() {
        // 2-dim linear model evaluated by hand through the same formula.
        let w_in = RealMatrix::from_vec(2, 2, vec![0.6, -0.2, 0.1, 0.9]).unwrap();
        let w_prompt = RealMatrix::from_vec(2, 1, vec![0.5, -0.3]).unwrap();
        let prototypes = RealMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let prompt = RealVector::from_vec(vec![0.25]).unwrap();
        let m = PromptedClassifier::assemble(
            BackboneKind::Linear,
            w_in,
            w_prompt,
            None,
            prototypes,
            prompt,
            0.5,
        )
        .unwrap();
        let x = RealVector::from_vec(vec![1.0, -1.0]).unwrap();
        let fwd = m.forward(&x).unwrap();
        let z0: f64 = 0.6 * 1.0 + (-0.2) * (-1.0) + 0.5 * 0.25;
        let z1: f64 = 0.1 * 1.0 + 0.9 * (-1.0) + (-0.3) * 0.25;
        let zn = (z0 * z0 + z1 * z1).sqrt();
        let l0 = (z0 / zn) / 0.5;
        let l1 = (z1 / zn) / 0.5;
        assert!((fwd.logits[0] - l0).abs() < 1e-15);
        assert!((fwd.logits[1] - l1).abs() < 1e-15);
        let e0 = (l0 - l0.max(l1)).exp();
        let e1 = (l1 - l0.max(l1)).exp();
        assert!((fwd.probs[0] - e0 / (e0 + e1)).abs() < 1e-15);
    }

    #[test]
    fn single_class_loss_and_grads_are_zero() {
        let base = PromptedClassifier::init(&spec(BackboneKind::Linear, 8)).unwrap();
        let prototypes = RealMatrix::from_vec(1, 5, base.prototypes.row(0).to_vec()).unwrap();
        let m = PromptedClassifier::assemble(
            BackboneKind::Linear,
            base.w_in.clone(),
            base.w_prompt.clone(),
            None,
            prototypes,
            base.prompt.clone(),
            base.tau_logit,
        )
        .unwrap();
        let mut s = RandomStream::new(4);
        let x = random_input(&mut s, m.input_dim());
        assert_eq!(m.loss_ce(&x, 0).unwrap(), 0.0);
        assert!(m.grad_input_ce(&x, 0).unwrap().iter().all(|&v| v == 0.0));
        assert!(m.grad_prompt_ce(&x, 0).unwrap().iter().all(|&v| v == 0.0));
        let x2 = random_input(&mut s, m.input_dim());
        assert_eq!(m.loss_kl(&x, &x2).unwrap(), 0.0);
        assert!(m.grad_input_kl(&x, &x2).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_at_identical_inputs_is_zero_with_tiny_gradient() {
        let m = PromptedClassifier::init(&spec(BackboneKind::OneHiddenTanh, 6)).unwrap();
        let mut s = RandomStream::new(5);
        let x = random_input(&mut s, m.input_dim());
        assert_eq!(m.loss_kl(&x, &x).unwrap(), 0.0);
        let g = m.grad_input_kl(&x, &x).unwrap();
        assert!(g.norm() < 1e-9, "gradient norm {} not ~0", g.norm());
    }

    #[test]
    fn kl_positive_when_prediction_flips() {
        let m = PromptedClassifier::init(&spec(BackboneKind::Linear, 33)).unwrap();
        let mut s = RandomStream::new(6);
        // Search for a pair of inputs with different argmax; guaranteed to
        // exist for a generic random model.
        let mut found = false;
        'outer: for _ in 0..200 {
            let a = random_input(&mut s, m.input_dim());
            let b = random_input(&mut s, m.input_dim());
            let fa = m.forward(&a).unwrap();
            let fb = m.forward(&b).unwrap();
            let am = (0..fa.probs.len()).max_by(|&i, &j| fa.probs[i].total_cmp(&fa.probs[j]));
            let bm = (0..fb.probs.len()).max_by(|&i, &j| fb.probs[i].total_cmp(&fb.probs[j]));
            if am != bm {
                assert!(m.loss_kl(&a, &b).unwrap() > 0.0);
                found = true;
                break 'outer;
            }
        }
        assert!(found, "no prediction flip found in 200 random pairs");
    }

    /// Gradient check driver shared by the CE and KL cases.
    fn check_gradients(backbone: BackboneKind, trials: usize) {
        let h = 1e-6;
        let tol = 1e-6;
        let mut s = RandomStream::new(0xBEEF ^ backbone as u64);
        for trial in 0..trials {
            let ms = ModelInitSpec {
                init_seed: s.next_u64(),
                backbone,
                ..spec(backbone, 0)
            };
            let mut m = PromptedClassifier::init(&ms).unwrap();
            m.set_prompt(s.uniform_vector(4, -0.5, 0.5).unwrap()).unwrap();
            let x = s.uniform_vector(3, -1.0, 1.0).unwrap();
            // independent second input: keeps KL macroscopic, where the
            // central-difference oracle is itself accurate to ~1e-9
            let x_adv = s.uniform_vector(3, -1.0, 1.0).unwrap();
            let y = (s.next_below(3)) as usize;

            // CE w.r.t. input
            let analytic = m.grad_input_ce(&x, y).unwrap();
            let fd = finite_diff_gradient(|xx| m.loss_ce(xx, y), &x, h).unwrap();
            assert!(
                max_relative_error(&analytic, &fd) < tol,
                "trial {trial}: CE input gradient mismatch"
            );
            // CE w.r.t. prompt
            let analytic = m.grad_prompt_ce(&x, y).unwrap();
            let fd = finite_diff_gradient(
                |p| m.with_prompt(p.clone())?.loss_ce(&x, y),
                m.prompt(),
                h,
            )
            .unwrap();
            assert!(
                max_relative_error(&analytic, &fd) < tol,
                "trial {trial}: CE prompt gradient mismatch"
            );
            // KL w.r.t. adversarial input
            let analytic = m.grad_input_kl(&x, &x_adv).unwrap();
            let fd = finite_diff_gradient(|xa| m.loss_kl(&x, xa), &x_adv, h).unwrap();
            assert!(
                max_relative_error(&analytic, &fd) < tol,
                "trial {trial}: KL input gradient mismatch"
            );
            // KL w.r.t. prompt (both branches)
            let analytic = m.grad_prompt_kl(&x, &x_adv).unwrap();
            let fd = finite_diff_gradient(
                |p| m.with_prompt(p.clone())?.loss_kl(&x, &x_adv),
                m.prompt(),
                h,
            )
            .unwrap();
            assert!(
                max_relative_error(&analytic, &fd) < tol,
                "trial {trial}: KL prompt gradient mismatch"
            );
            // Reversed KL w.r.t. adversarial input and prompt
            let analytic = m.grad_input_kl_reversed(&x, &x_adv).unwrap();
            let fd =
                finite_diff_gradient(|xa| m.loss_kl_reversed(&x, xa), &x_adv, h).unwrap();
            assert!(
                max_relative_error(&analytic, &fd) < tol,
                "trial {trial}: reversed KL input gradient mismatch"
            );
            let analytic = m.grad_prompt_kl_reversed(&x, &x_adv).unwrap();
            let fd = finite_diff_gradient(
                |p| m.with_prompt(p.clone())?.loss_kl_reversed(&x, &x_adv),
                m.prompt(),
                h,
            )
            .unwrap();
            assert!(
                max_relative_error(&analytic, &fd) < tol,
                "trial {trial}: reversed KL prompt gradient mismatch"
            );
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        for backbone in [BackboneKind::Linear, BackboneKind::OneHiddenTanh] {
            let mut m = PromptedClassifier::init(&spec(backbone, 51)).unwrap();
            let mut s = RandomStream::new(1);
            m.set_prompt(s.uniform_vector(4, -0.7, 0.7).unwrap()).unwrap();
            let text = m.to_text();
            let back = PromptedClassifier::from_text(&text).unwrap();
            assert_eq!(back.frozen_checksum(), m.frozen_checksum());
            assert_eq!(back.prompt(), m.prompt());
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn from_text_rejects_malformed_input() {
        let m = PromptedClassifier::init(&spec(BackboneKind::Linear, 52)).unwrap();
        let good = m.to_text();
        assert!(PromptedClassifier::from_text(&good.replace("w_in", "w_unknown")).is_err());
        assert!(PromptedClassifier::from_text(&good.replace("linear", "cubic")).is_err());
        let truncated: String = good.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(PromptedClassifier::from_text(&truncated).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_linear() {
        check_gradients(BackboneKind::Linear, 30);
    }

    #[test]
    fn gradients_match_finite_differences_tanh() {
        check_gradients(BackboneKind::OneHiddenTanh, 30);
    }
}
