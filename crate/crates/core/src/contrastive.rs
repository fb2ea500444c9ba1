//! Memory banks, negative pooling and subsampling, positive construction and
//! the multi-positive InfoNCE objective with its gradient with respect to the
//! anchor.
//!
//! For an anchor `q`, a positive set `P` and sampled negatives `Q'`:
//!
//! ```text
//! ℓ(q, P, Q') = −1/|P| Σ_{k∈P} log[ exp(q·k/τ) / (exp(q·k/τ) + Σ_{n∈Q'} exp(q·n/τ)) ]
//! L_q         = ℓ(q, Λ(q), Q') + ℓ(q, P(q), Q')
//! ```
//!
//! where `Λ(q)` are the members of `Q'` sharing the anchor's partition.
//! Every member of `Q'` stays in the denominator, including those in `Λ(q)`.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::error::{FclError, Result};
use crate::tensor_math::{axpy, dot_unchecked, Vec64};

/// Tolerance on ‖v‖ = 1 for vectors entering the loss or a [`Feature`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub type ClientId = u32;
pub type VolumeId = u32;
pub type PartitionId = u16;

/// A unit-norm embedding tagged with where it came from. This is the only
/// thing a client ever shares.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    vec: Vec64,
    client_id: ClientId,
    volume_id: VolumeId,
    partition_id: PartitionId,
}

impl Feature {
    pub fn new(
        vec: Vec64,
        client_id: ClientId,
        volume_id: VolumeId,
        partition_id: PartitionId,
    ) -> Result<Self> {
        check_unit(&vec, "feature vector")?;
        Ok(Feature {
            vec,
            client_id,
            volume_id,
            partition_id,
        })
    }

    pub fn vec(&self) -> &Vec64 {
        &self.vec
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn client_id(&self) -> ClientId {
        self.client_id
    }

    pub fn volume_id(&self) -> VolumeId {
        self.volume_id
    }

    pub fn partition_id(&self) -> PartitionId {
        self.partition_id
    }

    pub fn check_partition(&self, partitions: usize) -> Result<()> {
        if usize::from(self.partition_id) >= partitions {
            return Err(FclError::Contract(format!(
                "partition {} out of range for S = {partitions}",
                self.partition_id
            )));
        }
        Ok(())
    }
}

impl AsRef<[f64]> for Feature {
    fn as_ref(&self) -> &[f64] {
        &self.vec
    }
}

impl AsRef<[f64]> for Vec64 {
    fn as_ref(&self) -> &[f64] {
        self
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot_unchecked(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
        return Err(FclError::Contract(format!(
            "{what} has norm {n}, expected 1"
        )));
    }
    Ok(())
}

/// Fixed-capacity FIFO of features; pushing into a full bank evicts the
/// oldest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Feature>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(FclError::Contract("bank capacity must be ≥ 1".into()));
        }
        Ok(MemoryBank {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    /// Builds a bank from features in oldest-to-newest order, keeping only
    /// the newest `capacity` of them.
    pub fn from_features(
        capacity: usize,
        dim: usize,
        features: impl IntoIterator<Item = Feature>,
    ) -> Result<Self> {
        let mut bank = MemoryBank::new(capacity, dim)?;
        for f in features {
            bank.push(f)?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, f: Feature) -> Result<()> {
        if f.dim() != self.dim {
            return Err(FclError::dim("memory bank push", self.dim, f.dim()));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(f);
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Feature> + '_ {
        self.entries.iter()
    }
}

/// Concatenates the local bank with every remote bank, local entries first.
/// No deduplication.
pub fn aggregate_banks<'a, I>(local: &'a MemoryBank, remotes: I) -> Result<Vec<&'a Feature>>
where
    I: IntoIterator<Item = &'a MemoryBank>,
{
    let mut pool: Vec<&Feature> = local.iter().collect();
    for bank in remotes {
        if bank.dim() != local.dim() {
            return Err(FclError::dim("aggregated bank", local.dim(), bank.dim()));
        }
        pool.extend(bank.iter());
    }
    Ok(pool)
}

/// Indices of `k` distinct pool members, chosen uniformly without
/// replacement, in random order.
pub fn sample_negative_indices<R: Rng + ?Sized>(
    pool_len: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(FclError::Contract(
            "negative sample size must be ≥ 1".into(),
        ));
    }
    if pool_len < k {
        return Err(FclError::InsufficientPool {
            requested: k,
            available: pool_len,
        });
    }
    Ok(index::sample(rng, pool_len, k).into_vec())
}

pub fn sample_negatives<'a, T, R>(pool: &[&'a T], k: usize, rng: &mut R) -> Result<Vec<&'a T>>
where
    R: Rng + ?Sized,
{
    Ok(sample_negative_indices(pool.len(), k, rng)?
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// One augmented view pushed through both encoders: the main-encoder anchor
/// and the momentum-encoder key.
#[derive(Debug, Clone)]
pub struct EncodedView {
    pub anchor: Vec64,
    pub key: Feature,
}

/// The local positives shared by two views of the same partition taken from
/// two different volumes: `P(qᵢ) = P(qⱼ) = {kᵢ, kⱼ}`.
pub fn build_local_positives(i: &EncodedView, j: &EncodedView) -> Result<[Feature; 2]> {
    if i.key.partition_id() != j.key.partition_id() {
        return Err(FclError::Protocol(format!(
            "local positives from different partitions ({} vs {})",
            i.key.partition_id(),
            j.key.partition_id()
        )));
    }
    if i.key.client_id() == j.key.client_id() && i.key.volume_id() == j.key.volume_id() {
        return Err(FclError::Protocol(format!(
            "local positives must come from two distinct volumes, got volume {} twice",
            i.key.volume_id()
        )));
    }
    if i.anchor.len() != i.key.dim() || j.anchor.len() != j.key.dim() || i.key.dim() != j.key.dim()
    {
        return Err(FclError::dim("local positives", i.key.dim(), j.key.dim()));
    }
    Ok([i.key.clone(), j.key.clone()])
}

/// `Λ(q)`: members of the sampled negatives that share the anchor's
/// partition.
pub fn remote_positives<'a>(partition: PartitionId, sampled: &[&'a Feature]) -> Vec<&'a Feature> {
    sampled
        .iter()
        .copied()
        .filter(|f| f.partition_id() == partition)
        .collect()
}

/// Positives for one anchor.
#[derive(Debug, Clone, Default)]
pub struct PositiveSet<'a> {
    pub local: Vec<&'a Feature>,
    pub remote: Vec<&'a Feature>,
}

impl<'a> PositiveSet<'a> {
    pub fn new(
        anchor_partition: PartitionId,
        local: Vec<&'a Feature>,
        remote: Vec<&'a Feature>,
    ) -> Result<Self> {
        if let Some(bad) = remote.iter().find(|f| f.partition_id() != anchor_partition) {
            return Err(FclError::Protocol(format!(
                "remote positive in partition {} for anchor in partition {anchor_partition}",
                bad.partition_id()
            )));
        }
        Ok(PositiveSet { local, remote })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

pub fn contrastive_loss<P, N>(
    q: &[f64],
    positives: &[P],
    negatives: &[N],
    tau: f64,
) -> Result<LossAndGrad>
where
    P: AsRef<[f64]>,
    N: AsRef<[f64]>,
{
    if !(tau > 0.0) {
        return Err(FclError::Contract(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    if positives.is_empty() {
        return Err(FclError::Contract(
            "contrastive loss needs ≥ 1 positive".into(),
        ));
    }
    check_unit(q, "anchor")?;
    for v in positives
        .iter()
        .map(AsRef::as_ref)
        .chain(negatives.iter().map(AsRef::as_ref))
    {
        if v.len() != q.len() {
            return Err(FclError::dim("contrastive loss", q.len(), v.len()));
        }
        check_unit(v, "positive/negative")?;
    }
    Ok(contrastive_loss_unchecked(q, positives, negatives, tau))
}

/// [`contrastive_loss`] without the argument checks.
pub(crate) fn contrastive_loss_unchecked<P, N>(
    q: &[f64],
    positives: &[P],
    negatives: &[N],
    tau: f64,
) -> LossAndGrad
where
    P: AsRef<[f64]>,
    N: AsRef<[f64]>,
{
    let pos_logits: Vec<f64> = positives
        .iter()
        .map(|k| dot_unchecked(q, k.as_ref()) / tau)
        .collect();
    let neg_logits: Vec<f64> = negatives
        .iter()
        .map(|n| dot_unchecked(q, n.as_ref()) / tau)
        .collect();
    let shift = pos_logits
        .iter()
        .chain(&neg_logits)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    // Σ exp(s_n − M) and Σ exp(s_n − M)·n are shared by every positive term.
    let mut neg_mass = 0.0;
    let mut neg_pull = vec![0.0; q.len()];
    for (n, s) in negatives.iter().zip(&neg_logits) {
        let w = (s - shift).exp();
        neg_mass += w;
        axpy(w, n.as_ref(), &mut neg_pull);
    }

    let count = positives.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; q.len()];
    for (k, s) in positives.iter().zip(&pos_logits) {
        let k = k.as_ref();
        let w = (s - shift).exp();
        let denom = w + neg_mass;
        loss += shift + denom.ln() - s;
        // ∂ℓ_k/∂q = (softmax-weighted mean of {k} ∪ Q' − k) / τ
        axpy((w / denom - 1.0) / (tau * count), k, &mut grad);
        axpy(1.0 / (denom * tau * count), &neg_pull, &mut grad);
    }
    LossAndGrad {
        loss: loss / count,
        grad,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalLoss {
    pub local: f64,
    pub remote: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

/// `ℓ(q, Λ, Q') + ℓ(q, P, Q')`. An empty `Λ` contributes zero loss and zero
/// gradient.
pub fn final_loss<P, L, N>(
    q: &[f64],
    local: &[P],
    remote: &[L],
    negatives: &[N],
    tau: f64,
) -> Result<FinalLoss>
where
    P: AsRef<[f64]>,
    L: AsRef<[f64]>,
    N: AsRef<[f64]>,
{
    let local_term = contrastive_loss(q, local, negatives, tau)?;
    let remote_term = if remote.is_empty() {
        None
    } else {
        Some(contrastive_loss(q, remote, negatives, tau)?)
    };
    Ok(combine(local_term, remote_term))
}

fn combine(local: LossAndGrad, remote: Option<LossAndGrad>) -> FinalLoss {
    match remote {
        None => FinalLoss {
            local: local.loss,
            remote: 0.0,
            total: local.loss,
            grad: local.grad,
        },
        Some(r) => {
            let mut grad = r.grad;
            axpy(1.0, &local.grad, &mut grad);
            FinalLoss {
                local: local.loss,
                remote: r.loss,
                total: r.loss + local.loss,
                grad,
            }
        }
    }
}

/// Everything needed to evaluate `L_q` for one anchor.
#[derive(Debug, Clone)]
pub struct AnchorTerms<'a> {
    pub q: &'a [f64],
    pub local: Vec<&'a [f64]>,
    pub remote: Vec<&'a [f64]>,
    pub negatives: Vec<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean: f64,
    pub mean_local: f64,
    pub mean_remote: f64,
    /// Gradient of the batch mean with respect to each anchor, already scaled
    /// by `1/|B|`.
    pub grads: Vec<Vec<f64>>,
}

pub fn batch_loss(batch: &[AnchorTerms<'_>], tau: f64) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(FclError::Contract("batch loss needs ≥ 1 anchor".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut sum = 0.0;
    let mut sum_local = 0.0;
    let mut sum_remote = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for a in batch {
        let fl = final_loss(a.q, &a.local, &a.remote, &a.negatives, tau)?;
        sum += fl.total;
        sum_local += fl.local;
        sum_remote += fl.remote;
        grads.push(fl.grad.into_iter().map(|g| g * inv).collect());
    }
    Ok(BatchLoss {
        mean: sum * inv,
        mean_local: sum_local * inv,
        mean_remote: sum_remote * inv,
        grads,
    })
}
