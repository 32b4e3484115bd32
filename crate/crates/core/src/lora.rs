//! Low-rank adapters over frozen weight matrices.
//!
//! An adapted matrix is used as `W0 + W_res + B·A` where `W0` is the frozen
//! original, `W_res` the accumulated residual corrections from the server and
//! `B·A` the trainable rank-`r` update. There is no `alpha / r` scaling.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numkit::Tensor;

/// Default standard deviation of the Gaussian init for `A`.
pub const DEFAULT_INIT_SIGMA: f64 = 0.02;

/// Trainable factor pair: `B` is `d×r`, `A` is `r×k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub b: Tensor,
    pub a: Tensor,
}

impl LoraAdapter {
    pub fn from_factors(b: Tensor, a: Tensor) -> Result<Self> {
        if !b.is_matrix() || !a.is_matrix() || b.cols() != a.rows() {
            return Err(Error::shape("lora_adapter", b.shape(), a.shape()));
        }
        Ok(LoraAdapter { b, a })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// `(d, k)` of the adapted matrix.
    pub fn dims(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// `B·A`.
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("factor shapes checked at construction")
    }

    pub fn num_params(&self) -> usize {
        self.b.len() + self.a.len()
    }
}

/// `B = 0`, `A ~ Normal(0, sigma²)`, so `B·A` starts as the exact zero matrix.
pub fn init_adapter<R: Rng + ?Sized>(
    d: usize,
    k: usize,
    r: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<LoraAdapter> {
    if d == 0 || k == 0 || r == 0 || r > d.min(k) {
        return Err(Error::Config(format!(
            "adapter rank {r} must lie in 1..={} for a {d}x{k} matrix",
            d.min(k)
        )));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Config(format!("adapter init sigma must be >= 0, got {sigma}")));
    }
    Ok(LoraAdapter {
        b: Tensor::zeros(&[d, r]),
        a: Tensor::randn(&[r, k], sigma, rng),
    })
}

/// A frozen weight with its cumulative residual corrections kept separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBase {
    w0: Tensor,
    res_accum: Tensor,
}

impl FrozenBase {
    pub fn new(w0: Tensor) -> Self {
        let res_accum = Tensor::zeros(w0.shape());
        FrozenBase { w0, res_accum }
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn residual(&self) -> &Tensor {
        &self.res_accum
    }

    pub fn shape(&self) -> &[usize] {
        self.w0.shape()
    }

    /// `W0 + W_res_accum`.
    pub fn corrected(&self) -> Tensor {
        self.w0.add(&self.res_accum).expect("same shape by construction")
    }

    /// `W_res_accum ← W_res_accum + w_res`; `W0` is never touched.
    pub fn apply_reswu(&mut self, w_res: &Tensor) -> Result<()> {
        if w_res.shape() != self.w0.shape() {
            return Err(Error::shape("apply_reswu", self.w0.shape(), w_res.shape()));
        }
        self.res_accum.add_assign(w_res)
    }

    /// Chooses the accumulated residual so that `W0 + residual = target`.
    pub fn set_corrected(&mut self, target: &Tensor) -> Result<()> {
        self.res_accum = target.sub(&self.w0)?;
        Ok(())
    }

    pub fn reset_residual(&mut self) {
        self.res_accum = Tensor::zeros(self.w0.shape());
    }
}

/// `W0 + W_res_accum + B·A`.
pub fn effective_weight(base: &FrozenBase, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = adapter.b.matmul(&adapter.a)?;
    if delta.shape() != base.shape() {
        return Err(Error::shape("effective_weight", base.shape(), delta.shape()));
    }
    base.corrected().add(&delta)
}

/// Weight matrices that can carry an adapter within one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 6] = [
        MatrixKind::Q,
        MatrixKind::K,
        MatrixKind::V,
        MatrixKind::O,
        MatrixKind::Fc1,
        MatrixKind::Fc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Q => "q",
            MatrixKind::K => "k",
            MatrixKind::V => "v",
            MatrixKind::O => "o",
            MatrixKind::Fc1 => "fc1",
            MatrixKind::Fc2 => "fc2",
        }
    }
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatrixKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown matrix `{s}` (expected q, k, v, o, fc1 or fc2)")))
    }
}

impl Serialize for MatrixKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MatrixKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One weight matrix of the backbone, e.g. `b0.q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MatrixId {
    pub block: usize,
    pub kind: MatrixKind,
}

impl MatrixId {
    pub fn new(block: usize, kind: MatrixKind) -> Self {
        MatrixId { block, kind }
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}.{}", self.block, self.kind.name())
    }
}

/// Which blocks receive adapters.
///
/// Text form: `all`, `first`, `mid`, `last` (each covering `ceil(depth/3)`
/// blocks), `first:N`, `mid:N`, `last:N`, or a comma list such as `0,2,3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSelect {
    All,
    First(Option<usize>),
    Mid(Option<usize>),
    Last(Option<usize>),
    Explicit(Vec<usize>),
}

impl BlockSelect {
    /// Concrete sorted block indices for a model of the given depth.
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let default_n = depth.div_ceil(3);
        let span = |n: Option<usize>| -> Result<usize> {
            let n = n.unwrap_or(default_n);
            if n == 0 || n > depth {
                return Err(Error::Config(format!(
                    "block count {n} must lie in 1..={depth}"
                )));
            }
            Ok(n)
        };
        let blocks: Vec<usize> = match self {
            BlockSelect::All => (0..depth).collect(),
            BlockSelect::First(n) => (0..span(*n)?).collect(),
            BlockSelect::Last(n) => {
                let n = span(*n)?;
                (depth - n..depth).collect()
            }
            BlockSelect::Mid(n) => {
                let n = span(*n)?;
                let start = (depth - n) / 2;
                (start..start + n).collect()
            }
            BlockSelect::Explicit(list) => {
                let set: BTreeSet<usize> = list.iter().copied().collect();
                if let Some(&bad) = set.iter().find(|&&b| b >= depth) {
                    return Err(Error::Config(format!(
                        "block index {bad} out of range for depth {depth}"
                    )));
                }
                set.into_iter().collect()
            }
        };
        if blocks.is_empty() {
            return Err(Error::Config("placement selects no blocks".into()));
        }
        Ok(blocks)
    }
}

impl FromStr for BlockSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid block selection `{s}`"));
        let count = |rest: Option<&str>| -> Result<Option<usize>> {
            match rest {
                None => Ok(None),
                Some(n) => n.trim().parse::<usize>().map(Some).map_err(|_| bad()),
            }
        };
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h.trim(), Some(r)),
            None => (s, None),
        };
        match head {
            "all" if rest.is_none() => Ok(BlockSelect::All),
            "first" | "bottom" => Ok(BlockSelect::First(count(rest)?)),
            "mid" => Ok(BlockSelect::Mid(count(rest)?)),
            "last" | "top" => Ok(BlockSelect::Last(count(rest)?)),
            _ if rest.is_none() && !s.is_empty() => {
                let list = s
                    .split(',')
                    .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(BlockSelect::Explicit(list))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for BlockSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let named = |f: &mut fmt::Formatter<'_>, name: &str, n: &Option<usize>| match n {
            Some(n) => write!(f, "{name}:{n}"),
            None => write!(f, "{name}"),
        };
        match self {
            BlockSelect::All => write!(f, "all"),
            BlockSelect::First(n) => named(f, "first", n),
            BlockSelect::Mid(n) => named(f, "mid", n),
            BlockSelect::Last(n) => named(f, "last", n),
            BlockSelect::Explicit(list) => {
                let parts: Vec<String> = list.iter().map(|b| b.to_string()).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

impl Serialize for BlockSelect {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BlockSelect {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which weight matrices of which blocks carry adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSpec {
    pub blocks: BlockSelect,
    pub matrices: BTreeSet<MatrixKind>,
}

impl Default for PlacementSpec {
    /// Attention and FFN matrices of the first `ceil(depth/3)` blocks.
    fn default() -> Self {
        PlacementSpec {
            blocks: BlockSelect::First(None),
            matrices: MatrixKind::ALL.into_iter().collect(),
        }
    }
}

impl PlacementSpec {
    pub fn new(blocks: BlockSelect, matrices: impl IntoIterator<Item = MatrixKind>) -> Self {
        PlacementSpec {
            blocks,
            matrices: matrices.into_iter().collect(),
        }
    }

    /// Adapted matrices for `model`, in block then kind order. Kinds the
    /// architecture does not have are skipped; an empty result is an error.
    pub fn resolve(&self, model: &ModelConfig) -> Result<Vec<MatrixId>> {
        let blocks = self.blocks.resolve(model.depth())?;
        let ids: Vec<MatrixId> = model
            .adaptable_matrices()
            .into_iter()
            .filter(|id| blocks.contains(&id.block) && self.matrices.contains(&id.kind))
            .collect();
        if ids.is_empty() {
            return Err(Error::Config(format!(
                "placement `{}` with matrices {:?} adapts nothing in this model",
                self.blocks,
                self.matrices.iter().map(|k| k.name()).collect::<Vec<_>>()
            )));
        }
        Ok(ids)
    }
}

/// Trainable parameter counts, split between adapters and the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableCount {
    pub lora: usize,
    pub head: usize,
}

/// `Σ r(d + k)` over adapted matrices, with the head reported separately.
/// `placement = None` counts the head only.
pub fn count_trainable(
    placement: Option<&PlacementSpec>,
    model: &ModelConfig,
    rank: usize,
) -> Result<TrainableCount> {
    let mut lora = 0;
    if let Some(p) = placement {
        for id in p.resolve(model)? {
            let (d, k) = model
                .matrix_shape(id)
                .ok_or_else(|| Error::Config(format!("model has no matrix {id}")))?;
            if rank == 0 || rank > d.min(k) {
                return Err(Error::Config(format!(
                    "adapter rank {rank} must lie in 1..={} for {id}",
                    d.min(k)
                )));
            }
            lora += rank * (d + k);
        }
    }
    Ok(TrainableCount {
        lora,
        head: model.head_params(),
    })
}
