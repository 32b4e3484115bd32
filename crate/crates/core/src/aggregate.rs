//! Server-side aggregation of client adapter factors.
//!
//! With weights `ω_k`, averaging the factors separately gives
//! `B = Σ ω_k B_k`, `A = Σ ω_k A_k`, whose product differs from the weighted
//! dense update `Σ ω_k B_k A_k`. The gap
//!
//! ```text
//! W_res = Σ ω_k B_k A_k − B A = ½ Σ_k Σ_l ω_k ω_l (B_k − B_l)(A_k − A_l)
//! ```
//!
//! is the residual the server hands back so that `W0 + W_res + B A` equals
//! the dense aggregate exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, MatrixId};
use crate::model::Head;
use crate::numkit::Tensor;

/// How a round's client models are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Averaged factors plus the residual correction folded into the base.
    Reswu,
    /// Averaged factors only.
    Naive,
    /// `A` frozen at its shared initial value; only `B` is trained and averaged.
    Ffa,
    /// Server forms the dense aggregate `W + Σ ω_k B_k A_k` directly and
    /// re-expresses it around the averaged factors.
    Dense,
    /// No adapters; only the head is trained.
    HeadOnly,
    /// Every backbone weight and the head are trained and averaged.
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Reswu,
        Strategy::Dense,
        Strategy::Naive,
        Strategy::Ffa,
        Strategy::HeadOnly,
        Strategy::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Reswu => "reswu",
            Strategy::Naive => "naive",
            Strategy::Ffa => "ffa",
            Strategy::Dense => "dense",
            Strategy::HeadOnly => "head_only",
            Strategy::Full => "full",
        }
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Strategy::Reswu | Strategy::Naive | Strategy::Ffa | Strategy::Dense)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}` (expected reswu, naive, ffa, dense, head_only or full)"
                ))
            })
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One client's upload for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub samples: u64,
    pub factors: BTreeMap<MatrixId, LoraAdapter>,
    pub head: Option<Head>,
}

/// How the frozen base changes after a round.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseUpdate {
    Keep,
    /// Add `W_res` to the base.
    AddResidual(Tensor),
    /// `Σ ω_k B_k A_k`: the base becomes `W + Σ ω_k B_k A_k − B A`.
    DenseDelta(Tensor),
}

/// Server output for one adapted matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixAggregate {
    /// Factors every client adopts next round.
    pub factors: LoraAdapter,
    /// `Σ ω_k B_k A_k − B A`, computed for every strategy as a diagnostic.
    pub residual: Tensor,
    pub base_update: BaseUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub strategy: Strategy,
    pub weights: Vec<f64>,
    pub matrices: BTreeMap<MatrixId, MatrixAggregate>,
}

/// `ω_k = N_k / Σ N`.
pub fn fedavg_weights(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u128 = counts.iter().map(|&n| n as u128).sum();
    if total == 0 {
        return Err(Error::Protocol("no client holds any samples this round".into()));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

fn check_weights(weights: &[f64], clients: usize) -> Result<()> {
    if weights.len() != clients {
        return Err(Error::Protocol(format!(
            "{} weights for {clients} clients",
            weights.len()
        )));
    }
    if clients == 0 {
        return Err(Error::Protocol("nothing to aggregate".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Protocol("aggregation weights must be finite and non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Protocol(format!("aggregation weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// `Σ ω_k T_k`, evaluated as `T_0 + Σ_{k≥1} ω_k (T_k − T_0)` in index
/// order so that identical inputs come back bit-for-bit.
pub fn weighted_sum(tensors: &[&Tensor], weights: &[f64]) -> Result<Tensor> {
    check_weights(weights, tensors.len())?;
    let first = tensors[0];
    let mut acc = first.clone();
    for (t, &w) in tensors.iter().zip(weights).skip(1) {
        if t.shape() != first.shape() {
            return Err(Error::shape("weighted_sum", first.shape(), t.shape()));
        }
        if w != 0.0 {
            acc.axpy(w, &t.sub(first)?)?;
        }
    }
    Ok(acc)
}

fn matrix_ids(updates: &[ClientUpdate]) -> Result<Vec<MatrixId>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    let ids: Vec<MatrixId> = first.factors.keys().copied().collect();
    for u in updates {
        if u.factors.len() != ids.len() || !ids.iter().all(|id| u.factors.contains_key(id)) {
            return Err(Error::Protocol(format!(
                "client {} uploaded a different set of adapted matrices",
                u.client
            )));
        }
    }
    Ok(ids)
}

fn per_client(updates: &[ClientUpdate], id: MatrixId) -> Vec<&LoraAdapter> {
    updates.iter().map(|u| &u.factors[&id]).collect()
}

fn factor_pair(adapters: &[&LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    let bs: Vec<&Tensor> = adapters.iter().map(|a| &a.b).collect();
    let as_: Vec<&Tensor> = adapters.iter().map(|a| &a.a).collect();
    LoraAdapter::from_factors(weighted_sum(&bs, weights)?, weighted_sum(&as_, weights)?)
}

fn weighted_products(adapters: &[&LoraAdapter], weights: &[f64]) -> Result<Tensor> {
    let products = adapters
        .iter()
        .map(|ad| ad.b.matmul(&ad.a))
        .collect::<Result<Vec<_>>>()?;
    weighted_sum(&products.iter().collect::<Vec<_>>(), weights)
}

fn residual_for(adapters: &[&LoraAdapter], weights: &[f64], avg: &LoraAdapter) -> Result<Tensor> {
    weighted_products(adapters, weights)?.sub(&avg.b.matmul(&avg.a)?)
}

/// Weighted factor averages per adapted matrix.
pub fn aggregate_factors(updates: &[ClientUpdate], weights: &[f64]) -> Result<BTreeMap<MatrixId, LoraAdapter>> {
    check_weights(weights, updates.len())?;
    matrix_ids(updates)?
        .into_iter()
        .map(|id| Ok((id, factor_pair(&per_client(updates, id), weights)?)))
        .collect()
}

/// `Σ ω_k B_k A_k − (Σ ω_k B_k)(Σ ω_k A_k)` per adapted matrix.
pub fn residual_weight(updates: &[ClientUpdate], weights: &[f64]) -> Result<BTreeMap<MatrixId, Tensor>> {
    check_weights(weights, updates.len())?;
    let mut out = BTreeMap::new();
    for id in matrix_ids(updates)? {
        let ads = per_client(updates, id);
        let avg = factor_pair(&ads, weights)?;
        out.insert(id, residual_for(&ads, weights, &avg)?);
    }
    Ok(out)
}

/// Pairwise-difference form of the residual. The double sum is symmetric
/// with a zero diagonal, so it is evaluated over `k < l` without the ½.
pub fn residual_weight_pairwise(
    updates: &[ClientUpdate],
    weights: &[f64],
) -> Result<BTreeMap<MatrixId, Tensor>> {
    check_weights(weights, updates.len())?;
    let mut out = BTreeMap::new();
    for id in matrix_ids(updates)? {
        let ads = per_client(updates, id);
        let (d, k) = ads[0].dims();
        let mut acc = Tensor::zeros(&[d, k]);
        for i in 0..ads.len() {
            for j in i + 1..ads.len() {
                let db = ads[i].b.sub(&ads[j].b)?;
                let da = ads[i].a.sub(&ads[j].a)?;
                acc.axpy(weights[i] * weights[j], &db.matmul(&da)?)?;
            }
        }
        out.insert(id, acc);
    }
    Ok(out)
}

/// `W0 + Σ ω_k B_k A_k` per adapted matrix.
pub fn dense_aggregate_oracle(
    bases: &BTreeMap<MatrixId, Tensor>,
    updates: &[ClientUpdate],
    weights: &[f64],
) -> Result<BTreeMap<MatrixId, Tensor>> {
    check_weights(weights, updates.len())?;
    let mut out = BTreeMap::new();
    for id in matrix_ids(updates)? {
        let w0 = bases
            .get(&id)
            .ok_or_else(|| Error::Usage(format!("no base weight for {id}")))?;
        out.insert(id, w0.add(&weighted_products(&per_client(updates, id), weights)?)?);
    }
    Ok(out)
}

/// Runs one factor-aggregation strategy.
pub fn aggregate(strategy: Strategy, updates: &[ClientUpdate], weights: &[f64]) -> Result<AggregationResult> {
    if !strategy.uses_adapters() {
        return Err(Error::Config(format!(
            "strategy `{strategy}` does not aggregate adapter factors"
        )));
    }
    check_weights(weights, updates.len())?;
    let mut matrices = BTreeMap::new();
    for id in matrix_ids(updates)? {
        let ads = per_client(updates, id);
        let mut factors = factor_pair(&ads, weights)?;
        if strategy == Strategy::Ffa {
            let shared = &ads[0].a;
            if ads.iter().any(|ad| ad.a != *shared) {
                return Err(Error::Protocol(format!(
                    "frozen-A aggregation requires one shared A, but clients differ on {id}"
                )));
            }
            factors.a = shared.clone();
        }
        let residual = residual_for(&ads, weights, &factors)?;
        let base_update = match strategy {
            Strategy::Reswu => BaseUpdate::AddResidual(residual.clone()),
            Strategy::Dense => BaseUpdate::DenseDelta(weighted_products(&ads, weights)?),
            _ => BaseUpdate::Keep,
        };
        matrices.insert(
            id,
            MatrixAggregate {
                factors,
                residual,
                base_update,
            },
        );
    }
    Ok(AggregationResult {
        strategy,
        weights: weights.to_vec(),
        matrices,
    })
}

/// Weighted average of client heads.
pub fn aggregate_head(heads: &[&Head], weights: &[f64]) -> Result<Head> {
    check_weights(weights, heads.len())?;
    let ws: Vec<&Tensor> = heads.iter().map(|h| &h.weight).collect();
    let bs: Vec<&Tensor> = heads.iter().map(|h| &h.bias).collect();
    Ok(Head {
        weight: weighted_sum(&ws, weights)?,
        bias: weighted_sum(&bs, weights)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use crate::lora::MatrixKind;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ID: MatrixId = MatrixId {
        block: 0,
        kind: MatrixKind::Q,
    };

    fn update(client: usize, b: Tensor, a: Tensor) -> ClientUpdate {
        ClientUpdate {
            client,
            samples: 1,
            factors: [(ID, LoraAdapter::from_factors(b, a).unwrap())].into(),
            head: None,
        }
    }

    fn random_updates(k: usize, d: usize, r: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<ClientUpdate> {
        (0..k)
            .map(|c| update(c, Tensor::randn(&[d, r], 1.0, rng), Tensor::randn(&[r, n], 1.0, rng)))
            .collect()
    }

    fn simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    /// Entry-by-entry weighted sum of products with explicit scalar loops.
    fn product_oracle(updates: &[ClientUpdate], w: &[f64]) -> Vec<Vec<f64>> {
        let (d, n) = updates[0].factors[&ID].dims();
        let r = updates[0].factors[&ID].rank();
        let mut out = vec![vec![0.0; n]; d];
        for (u, &wk) in updates.iter().zip(w) {
            let ad = &u.factors[&ID];
            for i in 0..d {
                for j in 0..n {
                    let mut p = 0.0;
                    for t in 0..r {
                        p += ad.b.get(i, t) * ad.a.get(t, j);
                    }
                    out[i][j] += wk * p;
                }
            }
        }
        out
    }

    fn max_diff(t: &Tensor, o: &[Vec<f64>]) -> f64 {
        let mut m: f64 = 0.0;
        for (i, row) in o.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m = m.max((t.get(i, j) - v).abs());
            }
        }
        m
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg_weights(&[100, 100, 100, 100]).unwrap(), vec![0.25; 4]);
        assert_eq!(fedavg_weights(&[300, 100]).unwrap(), vec![0.75, 0.25]);
        assert_eq!(fedavg_weights(&[0, 50]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(fedavg_weights(&[0, 0]), Err(Error::Protocol(_))));
    }

    #[test]
    fn identical_factors_return_themselves_with_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = random_updates(1, 4, 2, 5, &mut rng).remove(0);
        let ups: Vec<_> = (0..3).map(|c| ClientUpdate { client: c, ..one.clone() }).collect();
        let w = [0.2, 0.3, 0.5];
        let f = aggregate_factors(&ups, &w).unwrap();
        assert!(f[&ID].b.max_abs_diff(&one.factors[&ID].b).unwrap() < 1e-15);
        assert_eq!(residual_weight(&ups, &w).unwrap()[&ID].max_abs(), 0.0);
        assert_eq!(residual_weight_pairwise(&ups, &w).unwrap()[&ID].max_abs(), 0.0);
    }

    #[test]
    fn opposite_factors_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let ups = vec![update(0, b.clone(), a.clone()), update(1, b.scale(-1.0), a)];
        let f = aggregate_factors(&ups, &[0.5, 0.5]).unwrap();
        assert_eq!(f[&ID].b.max_abs(), 0.0);
    }

    #[test]
    fn single_client_residual_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ups = random_updates(1, 4, 2, 4, &mut rng);
        assert_eq!(residual_weight(&ups, &[1.0]).unwrap()[&ID].max_abs(), 0.0);
    }

    #[test]
    fn factor_average_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ups = random_updates(3, 5, 2, 4, &mut rng);
        let w = simplex(3, &mut rng);
        let f = aggregate_factors(&ups, &w).unwrap();
        for i in 0..5 {
            for t in 0..2 {
                let expect: f64 = ups.iter().zip(&w).map(|(u, wk)| wk * u.factors[&ID].b.get(i, t)).sum();
                assert!((f[&ID].b.get(i, t) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_client_pairwise_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ups = random_updates(2, 4, 2, 4, &mut rng);
        let w = [0.5, 0.5];
        let (a1, a2) = (&ups[0].factors[&ID], &ups[1].factors[&ID]);
        let expect = a1.b.sub(&a2.b).unwrap().matmul(&a1.a.sub(&a2.a).unwrap()).unwrap().scale(0.25);
        let got = residual_weight(&ups, &w).unwrap();
        assert!(got[&ID].max_abs_diff(&expect).unwrap() < 1e-12);
        // Also equals dense target minus product of averages, by loops.
        let dense = product_oracle(&ups, &w);
        let avg = aggregate_factors(&ups, &w).unwrap();
        let ba = avg[&ID].b.matmul(&avg[&ID].a).unwrap();
        let diff = Tensor::new(vec![4, 4], dense.concat()).unwrap().sub(&ba).unwrap();
        assert!(got[&ID].max_abs_diff(&diff).unwrap() < 1e-12);
    }

    #[test]
    fn five_clients_both_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ups = random_updates(5, 6, 3, 5, &mut rng);
        let w = simplex(5, &mut rng);
        let a = residual_weight(&ups, &w).unwrap();
        let b = residual_weight_pairwise(&ups, &w).unwrap();
        assert!(a[&ID].max_abs_diff(&b[&ID]).unwrap() < 1e-10);
    }

    #[test]
    fn dense_oracle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let bases: BTreeMap<_, _> = [(ID, w0.clone())].into();
        let zero = vec![update(0, Tensor::zeros(&[4, 2]), Tensor::randn(&[2, 3], 1.0, &mut rng))];
        assert_eq!(dense_aggregate_oracle(&bases, &zero, &[1.0]).unwrap()[&ID], w0);
        let one = random_updates(1, 4, 2, 3, &mut rng);
        let ad = &one[0].factors[&ID];
        let expect = w0.add(&ad.b.matmul(&ad.a).unwrap()).unwrap();
        assert_eq!(dense_aggregate_oracle(&bases, &one, &[1.0]).unwrap()[&ID], expect);
    }

    #[test]
    fn strategies_report_expected_pieces() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ups = random_updates(3, 4, 2, 4, &mut rng);
        let w = simplex(3, &mut rng);
        let res = residual_weight(&ups, &w).unwrap()[&ID].clone();
        let naive = aggregate(Strategy::Naive, &ups, &w).unwrap();
        assert_eq!(naive.matrices[&ID].base_update, BaseUpdate::Keep);
        assert!(naive.matrices[&ID].residual.frobenius_norm() > 0.0);
        let reswu = aggregate(Strategy::Reswu, &ups, &w).unwrap();
        assert_eq!(reswu.matrices[&ID].base_update, BaseUpdate::AddResidual(res));
        let dense = aggregate(Strategy::Dense, &ups, &w).unwrap();
        let m = &dense.matrices[&ID];
        assert_eq!(m.factors, reswu.matrices[&ID].factors);
        let oracle = Tensor::new(vec![4, 4], product_oracle(&ups, &w).concat()).unwrap();
        match &m.base_update {
            BaseUpdate::DenseDelta(d) => assert!(d.max_abs_diff(&oracle).unwrap() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(aggregate(Strategy::Ffa, &ups, &w), Err(Error::Protocol(_))));
        assert!(matches!(aggregate(Strategy::HeadOnly, &ups, &w), Err(Error::Config(_))));
    }

    #[test]
    fn ffa_with_shared_a_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let ups: Vec<_> = (0..4).map(|c| update(c, Tensor::randn(&[4, 2], 1.0, &mut rng), a.clone())).collect();
        let w = simplex(4, &mut rng);
        let out = aggregate(Strategy::Ffa, &ups, &w).unwrap();
        assert_eq!(out.matrices[&ID].factors.a, a);
        assert!(out.matrices[&ID].residual.max_abs() < 1e-12);
        assert_eq!(out.matrices[&ID].base_update, BaseUpdate::Keep);
    }

    #[test]
    fn equal_products_with_different_factors_give_zero_residual_direction() {
        // B_1 A_1 = B_2 A_2 with B_2 = 2 B_1, A_2 = A_1 / 2; averaging still
        // leaves a residual because the factors themselves differ.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let ups = vec![update(0, b.clone(), a.clone()), update(1, b.scale(2.0), a.scale(0.5))];
        let res = residual_weight(&ups, &[0.5, 0.5]).unwrap();
        // ¼ (B − 2B)(A − A/2) = −⅛ BA, which is nonzero although the products agree.
        let expect = b.matmul(&a).unwrap().scale(-0.125);
        assert!(res[&ID].max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn head_average_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = |rng: &mut ChaCha8Rng| Head {
            weight: Tensor::randn(&[3, 4], 1.0, rng),
            bias: Tensor::randn(&[3], 1.0, rng),
        };
        let (h1, h2) = (h(&mut rng), h(&mut rng));
        assert_eq!(aggregate_head(&[&h1, &h2], &[1.0, 0.0]).unwrap(), h1);
        let avg = aggregate_head(&[&h1, &h2], &[0.25, 0.75]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let e = 0.25 * h1.weight.get(i, j) + 0.75 * h2.weight.get(i, j);
                assert!((avg.weight.get(i, j) - e).abs() < 1e-12);
            }
        }
        let bad = Head {
            weight: Tensor::zeros(&[2, 4]),
            bias: Tensor::zeros(&[2]),
        };
        assert!(matches!(aggregate_head(&[&h1, &bad], &[0.5, 0.5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!("fedavg".parse::<Strategy>(), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exactness_identity(seed in any::<u64>(), k in 1usize..=16, d in 1usize..7, n in 1usize..7, r_raw in 1usize..7) {
            let r = 1 + (r_raw - 1) % d.min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ups = random_updates(k, d, r, n, &mut rng);
            let w = simplex(k, &mut rng);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            let w0 = Tensor::randn(&[d, n], 1.0, &mut rng);
            let bases: BTreeMap<_, _> = [(ID, w0.clone())].into();
            let oracle = dense_aggregate_oracle(&bases, &ups, &w).unwrap();
            let f = aggregate_factors(&ups, &w).unwrap();
            let res = residual_weight(&ups, &w).unwrap();
            let composed = w0.add(&res[&ID]).unwrap().add(&f[&ID].b.matmul(&f[&ID].a).unwrap()).unwrap();
            prop_assert!(composed.max_abs_diff(&oracle[&ID]).unwrap() < 1e-10);
            let pair = residual_weight_pairwise(&ups, &w).unwrap();
            prop_assert!(pair[&ID].max_abs_diff(&res[&ID]).unwrap() < 1e-10);
            // Independent scalar-loop oracle for the dense target.
            let dense = product_oracle(&ups, &w);
            prop_assert!(max_diff(&oracle[&ID].sub(&w0).unwrap(), &dense) < 1e-10);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), k in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ups = random_updates(k, 4, 2, 3, &mut rng);
            let w = simplex(k, &mut rng);
            let mut perm: Vec<usize> = (0..k).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let ups_p: Vec<_> = perm.iter().map(|&i| ups[i].clone()).collect();
            let w_p: Vec<_> = perm.iter().map(|&i| w[i]).collect();
            let a = aggregate(Strategy::Reswu, &ups, &w).unwrap();
            let b = aggregate(Strategy::Reswu, &ups_p, &w_p).unwrap();
            let (ma, mb) = (&a.matrices[&ID], &b.matrices[&ID]);
            prop_assert!(ma.factors.b.max_abs_diff(&mb.factors.b).unwrap() <= 1e-12);
            prop_assert!(ma.factors.a.max_abs_diff(&mb.factors.a).unwrap() <= 1e-12);
            prop_assert!(ma.residual.max_abs_diff(&mb.residual).unwrap() <= 1e-12);
        }
    }
}
