//! Feature extractor, closed-set head and the bank of one-vs-all heads.
//!
//! Each open-set head `k` maps a feature to two logits ordered
//! `(out-lier, in-lier)`; its score `p_o(k)` is the in-lier coordinate of the
//! two-logit softmax.

mod checkpoint;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::math::{self, Tape, Tensor2, Var};
use crate::rng;

pub use checkpoint::{load_checkpoint, save_checkpoint};

/// Architecture of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d_feat: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Two hidden layers of width 64 and 32-dimensional features.
    pub fn with_defaults(d_in: usize, num_classes: usize) -> Self {
        Self {
            d_in,
            hidden: vec![64, 64],
            d_feat: 32,
            num_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_feat == 0 || self.num_classes == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A dense layer: `y = x · weightᵀ + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// out × in
    pub weight: Tensor2,
    /// 1 × out
    pub bias: Tensor2,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor2::raw(fan_out, fan_in, data),
            bias: Tensor2::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.matmul_nt(&self.weight)?;
        for r in 0..h.rows() {
            for (o, b) in h.row_mut(r).iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(h)
    }
}

/// Which learning-rate group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Heads,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamKind {
    pub group: ParamGroup,
    pub is_bias: bool,
}

/// All trainable tensors of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<Linear>,
    pub closed_head: Linear,
    pub ova_bank: Vec<Linear>,
}

/// Plain (tape-free) forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    /// batch × d_feat
    pub z: Tensor2,
    /// batch × K closed-set probabilities
    pub p_c: Tensor2,
    /// batch × K in-lier probabilities
    pub p_o: Tensor2,
}

/// Glorot-uniform weights and zero biases, deterministic under `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let mut extractor = Vec::with_capacity(config.hidden.len() + 1);
    let mut fan_in = config.d_in;
    for &h in config.hidden.iter().chain(std::iter::once(&config.d_feat)) {
        extractor.push(Linear::glorot(fan_in, h, &mut rng));
        fan_in = h;
    }
    let closed_head = Linear::glorot(config.d_feat, config.num_classes, &mut rng);
    let ova_bank = (0..config.num_classes)
        .map(|_| Linear::glorot(config.d_feat, 2, &mut rng))
        .collect();
    Ok(ModelParams {
        extractor,
        closed_head,
        ova_bank,
    })
}

impl ModelParams {
    pub fn num_classes(&self) -> usize {
        self.closed_head.out_dim()
    }

    pub fn d_in(&self) -> usize {
        self.extractor[0].in_dim()
    }

    pub fn d_feat(&self) -> usize {
        self.closed_head.in_dim()
    }

    pub fn config(&self) -> ModelConfig {
        let n = self.extractor.len();
        ModelConfig {
            d_in: self.d_in(),
            hidden: self.extractor[..n - 1]
                .iter()
                .map(Linear::out_dim)
                .collect(),
            d_feat: self.d_feat(),
            num_classes: self.num_classes(),
        }
    }

    /// Checks that layer shapes chain and every value is finite.
    pub fn validate(&self) -> Result<()> {
        if self.extractor.is_empty() {
            return Err(Error::Shape("extractor has no layers".into()));
        }
        for w in self.extractor.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!(
                    "extractor layer outputs {} but next layer expects {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        let d_feat = self.extractor.last().map(Linear::out_dim).unwrap_or(0);
        let k = self.num_classes();
        if self.closed_head.in_dim() != d_feat {
            return Err(Error::Shape(
                "closed head input != feature dimension".into(),
            ));
        }
        if self.ova_bank.len() != k {
            return Err(Error::Shape(format!(
                "{} open-set heads for {k} classes",
                self.ova_bank.len()
            )));
        }
        for head in &self.ova_bank {
            if head.weight.shape() != (2, d_feat) || head.bias.shape() != (1, 2) {
                return Err(Error::Shape(format!(
                    "open-set head has shape {:?}, expected (2, {d_feat})",
                    head.weight.shape()
                )));
            }
        }
        for (name, t) in self.named_tensors() {
            if name.ends_with(".bias") && t.rows() != 1 {
                return Err(Error::Shape(format!("{name} must be a row vector")));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Linear, ParamGroup)> {
        let ext = self
            .extractor
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("extractor.{i}"), l, ParamGroup::Backbone));
        let closed = std::iter::once(("closed".to_string(), &self.closed_head, ParamGroup::Heads));
        let ova = self
            .ova_bank
            .iter()
            .enumerate()
            .map(|(k, l)| (format!("ova.{k}"), l, ParamGroup::Heads));
        ext.chain(closed).chain(ova)
    }

    /// Every tensor with its canonical name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        self.layers()
            .flat_map(|(name, l, _)| {
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.layers()
            .flat_map(|(_, _, group)| {
                [
                    ParamKind {
                        group,
                        is_bias: false,
                    },
                    ParamKind {
                        group,
                        is_bias: true,
                    },
                ]
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::new();
        for l in self
            .extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.closed_head))
            .chain(self.ova_bank.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_tensors(&self) -> usize {
        2 * (self.extractor.len() + 1 + self.ova_bank.len())
    }

    /// Rebuilds a parameter set of the same architecture from tensors in
    /// canonical order.
    pub fn with_tensors(&self, tensors: &[Tensor2]) -> Result<ModelParams> {
        if tensors.len() != self.num_tensors() {
            return Err(Error::Shape(format!(
                "{} tensors for a model with {}",
                tensors.len(),
                self.num_tensors()
            )));
        }
        let mut out = self.clone();
        for (dst, src) in out.tensors_mut().into_iter().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "tensor {:?} vs expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(out)
    }

    /// Extractor output for a batch.
    pub fn features(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.d_in()
            )));
        }
        let last = self.extractor.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.extractor.iter().enumerate() {
            h = layer.apply(&h)?;
            if i < last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Closed-set and open-set probabilities for a batch of features.
    pub fn heads(&self, z: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let logits = self.closed_head.apply(z)?;
        let mut p_c = Tensor2::zeros(z.rows(), self.num_classes());
        for r in 0..z.rows() {
            p_c.row_mut(r)
                .copy_from_slice(&math::softmax(logits.row(r))?);
        }
        let mut p_o = Tensor2::zeros(z.rows(), self.num_classes());
        for (k, head) in self.ova_bank.iter().enumerate() {
            let l = head.apply(z)?;
            for r in 0..z.rows() {
                p_o.set(r, k, math::sigmoid(l.get(r, 1) - l.get(r, 0)));
            }
        }
        Ok((p_c, p_o))
    }

    pub fn forward(&self, x: &Tensor2) -> Result<ForwardOut> {
        let z = self.features(x)?;
        let (p_c, p_o) = self.heads(&z)?;
        Ok(ForwardOut { z, p_c, p_o })
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        self.vars_from(&vars).expect("one leaf per tensor")
    }

    /// Groups handles given in canonical tensor order by layer.
    pub fn vars_from(&self, vars: &[Var]) -> Result<ModelVars> {
        if vars.len() != self.num_tensors() {
            return Err(Error::Shape(format!(
                "{} handles for a model with {} tensors",
                vars.len(),
                self.num_tensors()
            )));
        }
        let pairs: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
        let n = self.extractor.len();
        Ok(ModelVars {
            extractor: pairs[..n].to_vec(),
            closed: pairs[n],
            ova: pairs[n + 1..].to_vec(),
        })
    }
}

/// Tape handles for the parameters of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub extractor: Vec<(Var, Var)>,
    pub closed: (Var, Var),
    pub ova: Vec<(Var, Var)>,
}

/// Tape nodes produced by [`ModelVars::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub z: Var,
    pub p_c: Var,
    pub p_o: Var,
}

impl ModelVars {
    /// Handles in canonical tensor order.
    pub fn all(&self) -> Vec<Var> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.closed))
            .chain(&self.ova)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.extractor.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.extractor.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn closed_probs(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let logits = tape.linear(z, self.closed.0, self.closed.1)?;
        tape.softmax_rows(logits)
    }

    /// In-lier probabilities of every one-vs-all head, batch × K.
    pub fn open_probs(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let weights: Vec<Var> = self.ova.iter().map(|&(w, _)| w).collect();
        let biases: Vec<Var> = self.ova.iter().map(|&(_, b)| b).collect();
        let w = tape.concat_rows(&weights)?;
        let b = tape.concat_cols(&biases)?;
        let logits = tape.linear(z, w, b)?;
        tape.pair_softmax(logits)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<ForwardVars> {
        let z = self.features(tape, x)?;
        let p_c = self.closed_probs(tape, z)?;
        let p_o = self.open_probs(tape, z)?;
        Ok(ForwardVars { z, p_c, p_o })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::grad_check;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let mut rng = rng::seeded(seed);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_in: 5,
            hidden: vec![6],
            d_feat: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let p = init_params(&small_config(), 7).unwrap();
        assert_eq!(p.ova_bank.len(), 3);
        for head in &p.ova_bank {
            assert_eq!(head.weight.shape(), (2, 4));
            assert_eq!(head.bias.shape(), (1, 2));
        }
        assert_eq!(p, init_params(&small_config(), 7).unwrap());
        assert_ne!(p, init_params(&small_config(), 8).unwrap());
        assert_eq!(p.config(), small_config());
        p.validate().unwrap();
        assert!(p
            .extractor
            .iter()
            .all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        let bound = (6.0f64 / (5 + 6) as f64).sqrt();
        assert!(p.extractor[0]
            .weight
            .data()
            .iter()
            .all(|w| w.abs() <= bound));
    }

    #[test]
    fn forward_smoke() {
        let p = init_params(&ModelConfig::with_defaults(8, 4), 1).unwrap();
        let out = p.forward(&random_batch(10, 8, 2)).unwrap();
        assert!(out.p_c.is_finite() && out.p_o.is_finite() && out.z.is_finite());
        for row in out.p_c.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(out.p_o.data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(out.z.cols(), 32);
    }

    #[test]
    fn zero_weights_give_uniform_outputs() {
        let mut p = init_params(&small_config(), 3).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = p.forward(&random_batch(4, 5, 3)).unwrap();
        assert!(out
            .p_c
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(out.p_o.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = init_params(&small_config(), 3).unwrap();
        assert!(p.forward(&random_batch(2, 4, 0)).is_err());
    }

    #[test]
    fn batch_independence() {
        let p = init_params(&small_config(), 5).unwrap();
        let a = random_batch(3, 5, 10);
        let b = random_batch(4, 5, 11);
        let joint = p.forward(&Tensor2::vstack(&[&a, &b]).unwrap()).unwrap();
        let fa = p.forward(&a).unwrap();
        let fb = p.forward(&b).unwrap();
        let stacked = Tensor2::vstack(&[&fa.p_o, &fb.p_o]).unwrap();
        assert!(joint.p_o.max_abs_diff(&stacked) < 1e-9);
        let stacked = Tensor2::vstack(&[&fa.p_c, &fb.p_c]).unwrap();
        assert!(joint.p_c.max_abs_diff(&stacked) < 1e-9);
        let single = p.forward(&a.select_rows(&[1])).unwrap();
        assert!(single.z.max_abs_diff(&fa.z.select_rows(&[1])) < 1e-12);
    }

    #[test]
    fn open_probs_invariant_to_common_logit_shift() {
        let mut p = init_params(&small_config(), 9).unwrap();
        let x = random_batch(3, 5, 1);
        let before = p.forward(&x).unwrap().p_o;
        for head in &mut p.ova_bank {
            head.bias.data_mut().iter_mut().for_each(|b| *b += 3.7);
        }
        let after = p.forward(&x).unwrap().p_o;
        assert!(before.max_abs_diff(&after) < 1e-12);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = init_params(&small_config(), 4).unwrap();
        let x = random_batch(6, 5, 4);
        let plain = p.forward(&x).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xv = tape.constant(x);
        let f = vars.forward(&mut tape, xv).unwrap();
        assert!(tape.value(f.z).max_abs_diff(&plain.z) < 1e-12);
        assert!(tape.value(f.p_c).max_abs_diff(&plain.p_c) < 1e-12);
        assert!(tape.value(f.p_o).max_abs_diff(&plain.p_o) < 1e-12);
        assert_eq!(vars.all().len(), p.num_tensors());
    }

    #[test]
    fn open_prob_sum_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            d_in: 4,
            hidden: vec![5],
            d_feat: 4,
            num_classes: 4,
        };
        let params = init_params(&cfg, 21).unwrap();
        let x = random_batch(3, 4, 22);
        let template = params.clone();
        let tensors: Vec<Tensor2> = params.tensors().into_iter().cloned().collect();
        let report = grad_check(
            |tape, vars| {
                let mv = template.vars_from(vars)?;
                let xv = tape.constant(x.clone());
                let out = mv.forward(tape, xv)?;
                Ok(tape.sum(out.p_o))
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }
}
