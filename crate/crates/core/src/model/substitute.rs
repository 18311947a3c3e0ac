//! Replacing one feed-forward submodule of one layer.

use serde::{Deserialize, Serialize};

use super::weights::{DenseFfn, FeedForward, TransformerWeights};
use crate::error::{shape_err, CasalError, Result};
use crate::tensor::Matrix;

/// Projection(s) of a gated feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnPart {
    Down,
    Up,
    UpAndDown,
}

impl FfnPart {
    /// Tensor names in the order they are exchanged.
    pub fn tensor_names(self) -> &'static [&'static str] {
        match self {
            FfnPart::Down => &["w_down"],
            FfnPart::Up => &["w_up"],
            FfnPart::UpAndDown => &["w_up", "w_down"],
        }
    }

    pub fn has_up(self) -> bool {
        matches!(self, FfnPart::Up | FfnPart::UpAndDown)
    }

    pub fn has_down(self) -> bool {
        matches!(self, FfnPart::Down | FfnPart::UpAndDown)
    }

    fn get(self, f: &DenseFfn) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(2);
        if self.has_up() {
            out.push(f.w_up.clone());
        }
        if self.has_down() {
            out.push(f.w_down.clone());
        }
        out
    }
}

/// Trainable unit inside one layer's feed-forward block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    Down,
    Up,
    UpAndDown,
    /// The given projection(s) of a set of experts in an MoE layer.
    ExpertSet { experts: Vec<usize>, part: FfnPart },
}

impl Submodule {
    pub fn part(&self) -> FfnPart {
        match self {
            Submodule::Down => FfnPart::Down,
            Submodule::Up => FfnPart::Up,
            Submodule::UpAndDown => FfnPart::UpAndDown,
            Submodule::ExpertSet { part, .. } => *part,
        }
    }

    /// Parses `down`, `up`, `up_and_down`, or `moe_experts_<part>` (all
    /// experts, with `n_experts` supplied). `both` is accepted for
    /// `up_and_down`.
    pub fn parse(name: &str, n_experts: Option<usize>) -> Result<Self> {
        let part = |s: &str| match s {
            "down" => Some(FfnPart::Down),
            "up" => Some(FfnPart::Up),
            "up_and_down" | "both" => Some(FfnPart::UpAndDown),
            _ => None,
        };
        if let Some(rest) = name.strip_prefix("moe_experts_") {
            let n = n_experts.ok_or_else(|| {
                CasalError::InvalidConfig(format!("submodule {name} needs an MoE model"))
            })?;
            let part = part(rest)
                .ok_or_else(|| CasalError::InvalidConfig(format!("unknown submodule {name}")))?;
            return Ok(Submodule::ExpertSet {
                experts: (0..n).collect(),
                part,
            });
        }
        match part(name) {
            Some(FfnPart::Down) => Ok(Submodule::Down),
            Some(FfnPart::Up) => Ok(Submodule::Up),
            Some(FfnPart::UpAndDown) => Ok(Submodule::UpAndDown),
            None => Err(CasalError::InvalidConfig(format!("unknown submodule {name}"))),
        }
    }

    pub fn label(&self) -> String {
        let p = match self.part() {
            FfnPart::Down => "down",
            FfnPart::Up => "up",
            FfnPart::UpAndDown => "up_and_down",
        };
        match self {
            Submodule::ExpertSet { .. } => format!("moe_experts_{p}"),
            _ => p.to_string(),
        }
    }
}

/// Current tensors of `submodule` at `layer`, in exchange order: per target
/// (the dense block, or each listed expert) `w_up` before `w_down`.
pub fn extract_submodule(
    weights: &TransformerWeights,
    layer: usize,
    submodule: &Submodule,
) -> Result<Vec<Matrix>> {
    let lw = weights.layers.get(layer).ok_or_else(|| {
        CasalError::InvalidInput(format!("layer {layer} out of range"))
    })?;
    match (&lw.ffn, submodule) {
        (FeedForward::Dense(f), Submodule::Down | Submodule::Up | Submodule::UpAndDown) => {
            Ok(submodule.part().get(f))
        }
        (FeedForward::Moe { experts, .. }, Submodule::ExpertSet { experts: ids, part }) => {
            let mut out = Vec::new();
            for &e in ids {
                let f = experts.get(e).ok_or_else(|| {
                    CasalError::InvalidInput(format!("expert {e} out of range"))
                })?;
                out.extend(part.get(f));
            }
            Ok(out)
        }
        _ => Err(CasalError::InvalidInput(format!(
            "submodule {} does not fit layer {layer}",
            submodule.label()
        ))),
    }
}

fn replace(target: &mut Matrix, new: Matrix, name: &str) -> Result<()> {
    if target.shape() != new.shape() {
        return Err(shape_err(name, &target.shape(), &new.shape()));
    }
    *target = new;
    Ok(())
}

fn assign_part(f: &mut DenseFfn, part: FfnPart, it: &mut impl Iterator<Item = Matrix>, prefix: &str) -> Result<()> {
    for name in part.tensor_names() {
        let m = it
            .next()
            .ok_or_else(|| CasalError::InvalidInput(format!("missing tensor for {prefix}.{name}")))?;
        let slot = if *name == "w_up" { &mut f.w_up } else { &mut f.w_down };
        replace(slot, m, &format!("{prefix}.{name}"))?;
    }
    Ok(())
}

/// Returns `weights` with the named submodule replaced by `new_tensors`
/// (order as in [`extract_submodule`]). Every other tensor is untouched.
pub fn substitute_weights(
    weights: &TransformerWeights,
    layer: usize,
    submodule: &Submodule,
    new_tensors: Vec<Matrix>,
) -> Result<TransformerWeights> {
    extract_submodule(weights, layer, submodule)?;
    let mut out = weights.clone();
    out.layers[layer].ffn = substitute_ffn(&weights.layers[layer].ffn, layer, submodule, new_tensors)?;
    Ok(out)
}

/// One feed-forward block with the submodule replaced.
pub(crate) fn substitute_ffn(
    ffn: &FeedForward,
    layer: usize,
    submodule: &Submodule,
    new_tensors: Vec<Matrix>,
) -> Result<FeedForward> {
    let expected = match (ffn, submodule) {
        (FeedForward::Dense(_), Submodule::Down | Submodule::Up | Submodule::UpAndDown) => {
            submodule.part().tensor_names().len()
        }
        (FeedForward::Moe { .. }, Submodule::ExpertSet { experts, part }) => {
            experts.len() * part.tensor_names().len()
        }
        _ => {
            return Err(CasalError::InvalidInput(format!(
                "submodule {} does not fit layer {layer}",
                submodule.label()
            )))
        }
    };
    if new_tensors.len() != expected {
        return Err(shape_err("submodule tensor count", &[expected], &[new_tensors.len()]));
    }
    let mut out = ffn.clone();
    let mut it = new_tensors.into_iter();
    match (&mut out, submodule) {
        (FeedForward::Dense(f), _) => assign_part(f, submodule.part(), &mut it, &format!("layers.{layer}"))?,
        (FeedForward::Moe { experts, .. }, Submodule::ExpertSet { experts: ids, part }) => {
            for &e in ids {
                let f = experts
                    .get_mut(e)
                    .ok_or_else(|| CasalError::InvalidInput(format!("expert {e} out of range")))?;
                assign_part(f, *part, &mut it, &format!("layers.{layer}.experts.{e}"))?;
            }
        }
        _ => unreachable!("matched above"),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, MoeConfig};

    #[test]
    fn parse_and_label_round_trip() {
        for name in ["down", "up", "up_and_down"] {
            assert_eq!(Submodule::parse(name, None).unwrap().label(), name);
        }
        let s = Submodule::parse("moe_experts_down", Some(3)).unwrap();
        assert_eq!(
            s,
            Submodule::ExpertSet {
                experts: vec![0, 1, 2],
                part: FfnPart::Down
            }
        );
        assert_eq!(s.label(), "moe_experts_down");
        assert!(Submodule::parse("moe_experts_down", None).is_err());
        assert!(Submodule::parse("gate", None).is_err());
    }

    #[test]
    fn shape_and_count_mismatch_error() {
        let cfg = ModelConfig::toy(20, 6);
        let w = TransformerWeights::init(&cfg).unwrap();
        assert!(substitute_weights(&w, 1, &Submodule::Down, vec![Matrix::zeros(2, 2)]).is_err());
        assert!(substitute_weights(&w, 1, &Submodule::UpAndDown, vec![Matrix::zeros(128, 64)]).is_err());
        let moe = Submodule::ExpertSet {
            experts: vec![0],
            part: FfnPart::Down,
        };
        assert!(substitute_weights(&w, 1, &moe, vec![]).is_err());
    }

    #[test]
    fn expert_set_only_touches_listed_experts() {
        let mut cfg = ModelConfig::toy(20, 6);
        cfg.d_model = 8;
        cfg.d_attn = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 12;
        cfg.moe = Some(MoeConfig { n_experts: 3, top_k: 2 });
        let w = TransformerWeights::init(&cfg).unwrap();
        let sub = Submodule::ExpertSet {
            experts: vec![2],
            part: FfnPart::UpAndDown,
        };
        let new = vec![Matrix::filled(8, 12, 0.5), Matrix::filled(12, 8, -0.5)];
        let out = substitute_weights(&w, 2, &sub, new.clone()).unwrap();
        assert_eq!(extract_submodule(&out, 2, &sub).unwrap(), new);
        let changed: Vec<String> = w
            .named_tensors()
            .into_iter()
            .zip(out.named_tensors())
            .filter(|((_, a), (_, b))| !a.bit_eq(b))
            .map(|((n, _), _)| n)
            .collect();
        assert_eq!(changed, vec!["layers.2.experts.2.w_up", "layers.2.experts.2.w_down"]);
    }
}
