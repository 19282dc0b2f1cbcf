//! Method variants compared by `ablate`: a base method plus optional
//! modifiers, written like `weighted-no_nil-detach`.

use std::fmt;
use std::str::FromStr;

use unida_core::losses::{LossWeights, OemMode};
use unida_core::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Base {
    /// classification losses only; every target-side term off
    SourceOnly,
    /// every classifier's entropy counts equally
    Uniform,
    /// entropies weighted by the closed-set probabilities
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Nil,
    Cmm,
    Cc,
    Oem,
}

impl Term {
    fn name(self) -> &'static str {
        match self {
            Term::Nil => "nil",
            Term::Cmm => "cmm",
            Term::Cc => "cc",
            Term::Oem => "oem",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub base: Base,
    /// loss terms switched off, sorted
    pub dropped: Vec<Term>,
    pub detach: bool,
}

impl Variant {
    /// `cfg` with this variant's loss settings applied.
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self.base {
            Base::SourceOnly => {
                out.loss.weights = LossWeights {
                    alpha: cfg.loss.weights.alpha,
                    ..LossWeights::source_only()
                }
            }
            Base::Uniform => out.loss.oem_mode = OemMode::Uniform,
            Base::Weighted => out.loss.oem_mode = OemMode::Weighted,
        }
        for t in &self.dropped {
            let w = &mut out.loss.weights;
            match t {
                Term::Nil => w.beta1 = 0.0,
                Term::Cmm => w.beta2 = 0.0,
                Term::Cc => w.eta = 0.0,
                Term::Oem => w.gamma = 0.0,
            }
        }
        if self.detach {
            out.loss.detach_weights = true;
        }
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.base {
            Base::SourceOnly => "source_only",
            Base::Uniform => "uniform",
            Base::Weighted => "weighted",
        })?;
        for t in &self.dropped {
            write!(f, "-no_{}", t.name())?;
        }
        if self.detach {
            f.write_str("-detach")?;
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.trim().split('-');
        let base = match parts.next().unwrap_or("") {
            "source_only" => Base::SourceOnly,
            "uniform" => Base::Uniform,
            "weighted" => Base::Weighted,
            other => {
                return Err(format!(
                    "unknown variant '{other}' (expected source_only, uniform or weighted)"
                ))
            }
        };
        let mut dropped = Vec::new();
        let mut detach = false;
        for m in parts {
            let term = match m {
                "detach" => {
                    detach = true;
                    continue;
                }
                "no_nil" => Term::Nil,
                "no_cmm" => Term::Cmm,
                "no_cc" => Term::Cc,
                "no_oem" => Term::Oem,
                other => return Err(format!("unknown modifier '{other}' in variant '{s}'")),
            };
            if dropped.contains(&term) {
                return Err(format!("modifier '{m}' repeated in variant '{s}'"));
            }
            dropped.push(term);
        }
        if base == Base::SourceOnly && (!dropped.is_empty() || detach) {
            return Err(format!("source_only takes no modifiers ('{s}')"));
        }
        dropped.sort();
        Ok(Variant {
            base,
            dropped,
            detach,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let v: Variant = "weighted-no_cc-no_nil-detach".parse().unwrap();
        assert_eq!(v.dropped, vec![Term::Nil, Term::Cc]);
        assert!(v.detach);
        assert_eq!(v.to_string(), "weighted-no_nil-no_cc-detach");
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        for bad in [
            "",
            "mlnet",
            "weighted-no_x",
            "weighted-no_nil-no_nil",
            "source_only-detach",
        ] {
            assert!(bad.parse::<Variant>().is_err(), "{bad}");
        }
    }

    #[test]
    fn apply_sets_losses() {
        let base = TrainConfig::default();
        let so = "source_only".parse::<Variant>().unwrap().apply(&base);
        assert_eq!(so.loss.weights, LossWeights::source_only());
        let u = "uniform-no_cmm".parse::<Variant>().unwrap().apply(&base);
        assert_eq!(u.loss.oem_mode, OemMode::Uniform);
        assert_eq!(u.loss.weights.beta2, 0.0);
        assert_eq!(u.loss.weights.beta1, base.loss.weights.beta1);
    }
}
