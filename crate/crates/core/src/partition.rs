//! Class-incremental task construction and label-skewed client partitions.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardUniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classes per task, in training order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    /// Seeded permutation of all classes.
    pub order: Vec<usize>,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSequence {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks `0..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flatten().copied().collect()
    }
}

/// Splits a seeded permutation of `0..num_classes` into `num_tasks` equal groups.
pub fn split_tasks<R: Rng + ?Sized>(num_classes: usize, num_tasks: usize, rng: &mut R) -> Result<TaskSequence> {
    if num_tasks == 0 || num_classes == 0 || !num_classes.is_multiple_of(num_tasks) {
        return Err(Error::Config(format!(
            "{num_tasks} tasks must evenly divide {num_classes} classes"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(rng);
    let per = num_classes / num_tasks;
    let tasks = order.chunks(per).map(|c| c.to_vec()).collect();
    Ok(TaskSequence { order, tasks })
}

/// Partition scheme for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    /// Each client holds exactly `alpha` labels of every task.
    Quantity { alpha: usize },
    /// Per-class client proportions drawn from `Dirichlet(beta)`.
    Dirichlet { beta: f64 },
}

/// Client shards for each task: `shards[t][k]` lists sample indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: Scheme,
    pub shards: Vec<Vec<Vec<usize>>>,
}

/// Groups `indices` by label, each group sorted.
fn by_label(indices: &[usize], labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        let y = *labels
            .get(i)
            .ok_or_else(|| Error::Validation(format!("sample index {i} out of range")))?;
        groups.entry(y).or_default().push(i);
    }
    for g in groups.values_mut() {
        g.sort_unstable();
    }
    Ok(groups)
}

fn finish(mut shards: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for s in &mut shards {
        s.sort_unstable();
    }
    shards
}

/// Label sets per client: every client gets `alpha` distinct labels and
/// every label at least one owner.
///
/// A random permutation of the labels is dealt round-robin first so each
/// label has an owner, then each client's remaining slots are filled with
/// uniformly drawn labels it does not yet hold.
fn quantity_owners<R: Rng + ?Sized>(
    num_labels: usize,
    clients: usize,
    alpha: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..num_labels).collect();
    perm.shuffle(rng);
    let mut owned: Vec<Vec<usize>> = vec![Vec::with_capacity(alpha); clients];
    let mut client_order: Vec<usize> = (0..clients).collect();
    client_order.shuffle(rng);
    for (j, &label) in perm.iter().enumerate() {
        owned[client_order[j % clients]].push(label);
    }
    for set in &mut owned {
        let missing = alpha - set.len();
        if missing > 0 {
            let free: Vec<usize> = (0..num_labels).filter(|l| !set.contains(l)).collect();
            for pick in index::sample(rng, free.len(), missing) {
                set.push(free[pick]);
            }
        }
        set.sort_unstable();
    }
    owned
}

/// Quantity-based label imbalance over the samples `indices` of one task.
///
/// Samples of a label are shuffled and split evenly among its owners, the
/// remainder going one each to owners in client-index order.
pub fn quantity_partition<R: Rng + ?Sized>(
    indices: &[usize],
    labels: &[usize],
    clients: usize,
    alpha: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let groups = by_label(indices, labels)?;
    let m = groups.len();
    if clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    if alpha == 0 || alpha > m {
        return Err(Error::Config(format!(
            "alpha = {alpha} must lie in 1..={m} for a task with {m} labels"
        )));
    }
    if clients * alpha < m {
        return Err(Error::Config(format!(
            "{clients} clients with {alpha} labels each cannot cover {m} labels"
        )));
    }
    let label_list: Vec<usize> = groups.keys().copied().collect();
    let owned = quantity_owners(m, clients, alpha, rng);
    let mut shards = vec![Vec::new(); clients];
    for (li, label) in label_list.iter().enumerate() {
        let owners: Vec<usize> = (0..clients).filter(|&k| owned[k].contains(&li)).collect();
        let mut samples = groups[label].clone();
        samples.shuffle(rng);
        let (base, rem) = (samples.len() / owners.len(), samples.len() % owners.len());
        let mut start = 0;
        for (j, &k) in owners.iter().enumerate() {
            let take = base + usize::from(j < rem);
            shards[k].extend_from_slice(&samples[start..start + take]);
            start += take;
        }
    }
    Ok(finish(shards))
}

/// One `Dirichlet(beta · 1)` draw, sampled through log-gamma variates so
/// very small `beta` does not underflow to an all-zero vector.
pub fn dirichlet_proportions<R: Rng + ?Sized>(beta: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    // Gamma(β) = Gamma(β + 1) · U^(1/β)
    let gamma = Gamma::new(beta + 1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = StandardUniform.sample(rng);
            g.ln() + (1.0 - u).ln() / beta
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / total).collect())
}

/// Integer counts summing to `n` that follow `props`, by largest remainder
/// (ties to the lower index).
pub fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Distribution-based label imbalance over the samples `indices` of one task.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    indices: &[usize],
    labels: &[usize],
    clients: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let groups = by_label(indices, labels)?;
    let mut shards = vec![Vec::new(); clients];
    for samples in groups.values() {
        let props = dirichlet_proportions(beta, clients, rng)?;
        let counts = largest_remainder(&props, samples.len());
        let mut samples = samples.clone();
        samples.shuffle(rng);
        let mut start = 0;
        for (k, &c) in counts.iter().enumerate() {
            shards[k].extend_from_slice(&samples[start..start + c]);
            start += c;
        }
    }
    Ok(finish(shards))
}

/// Applies `scheme` to one task's samples.
pub fn partition_task<R: Rng + ?Sized>(
    scheme: Scheme,
    indices: &[usize],
    labels: &[usize],
    clients: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    match scheme {
        Scheme::Quantity { alpha } => quantity_partition(indices, labels, clients, alpha, rng),
        Scheme::Dirichlet { beta } => dirichlet_partition(indices, labels, clients, beta, rng),
    }
}

/// Stratified split of one task's samples into train and validation parts,
/// `floor(0.8 n)` of each class going to train.
pub fn train_val_split<R: Rng + ?Sized>(
    indices: &[usize],
    labels: &[usize],
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for samples in by_label(indices, labels)?.values() {
        let mut s = samples.clone();
        s.shuffle(rng);
        let cut = s.len() * 4 / 5;
        train.extend_from_slice(&s[..cut]);
        val.extend_from_slice(&s[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Per-client class histogram of one task's shards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionStats {
    /// `counts[k][c]`: samples of class `c` held by client `k`.
    pub counts: Vec<Vec<u64>>,
    pub client_totals: Vec<u64>,
    pub class_totals: Vec<u64>,
    /// Shannon entropy (nats) of each client's label distribution; 0 for empty shards.
    pub entropy: Vec<f64>,
    /// Gini impurity of each client's label distribution; 0 for empty shards.
    pub gini: Vec<f64>,
}

pub fn partition_stats(shards: &[Vec<usize>], labels: &[usize], num_classes: usize) -> Result<PartitionStats> {
    let mut counts = vec![vec![0u64; num_classes]; shards.len()];
    for (k, shard) in shards.iter().enumerate() {
        for &i in shard {
            let y = *labels
                .get(i)
                .ok_or_else(|| Error::Validation(format!("sample index {i} out of range")))?;
            if y >= num_classes {
                return Err(Error::Validation(format!("label {y} out of range for {num_classes} classes")));
            }
            counts[k][y] += 1;
        }
    }
    let client_totals: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let class_totals: Vec<u64> = (0..num_classes).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
    let mut entropy = Vec::with_capacity(shards.len());
    let mut gini = Vec::with_capacity(shards.len());
    for (row, &total) in counts.iter().zip(&client_totals) {
        if total == 0 {
            entropy.push(0.0);
            gini.push(0.0);
            continue;
        }
        let ps = row.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total as f64);
        entropy.push(ps.clone().map(|p| -p * p.ln()).sum::<f64>().max(0.0));
        gini.push(1.0 - ps.map(|p| p * p).sum::<f64>());
    }
    Ok(PartitionStats {
        counts,
        client_totals,
        class_totals,
        entropy,
        gini,
    })
}
