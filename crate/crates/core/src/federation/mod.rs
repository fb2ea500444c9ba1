//! Round orchestration: feature exchange, local contrastive training on each
//! client, and federated averaging.
//!
//! Each round runs three phases separated by barriers:
//!
//! 1. exchange: every client broadcasts a snapshot of its local bank and
//!    receives everyone else's (skipped for `random_init` and `local_cl`);
//! 2. local training: clients train independently, possibly in parallel;
//! 3. aggregation: main and momentum encoders are averaged and installed on
//!    every client.
//!
//! Client randomness is keyed by `(seed, client, round)`, so a round produces
//! the same result whatever order clients run in.

mod exchange;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

pub use exchange::{ExchangeMessage, Transport, WirePayload, EXCHANGE_MAGIC, EXCHANGE_VERSION};

use crate::contrastive::{
    aggregate_banks, batch_loss, build_local_positives, remote_positives, sample_negative_indices,
    AnchorTerms, ClientId, EncodedView, Feature, MemoryBank, PartitionId, PositiveSet,
};
use crate::data::{
    generate_dataset, sample_training_pair, standardize, Augmenter, ClientShard, SyntheticConfig,
};
use crate::encoder::{EncoderDims, EncoderParams, ForwardTape};
use crate::error::{FclError, Result};
use crate::evaluation::{self, ProbeConfig};
use crate::parallel::Parallelism;
use crate::seeding::{self, tag};

/// The four ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// No pre-training at all.
    RandomInit,
    /// Contrastive learning on local features only, then FedAvg.
    LocalCl,
    /// Adds exchanged remote features to the negative pool.
    FeOnly,
    /// Feature exchange plus same-partition remote positives.
    FeGsm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::RandomInit, Mode::LocalCl, Mode::FeOnly, Mode::FeGsm];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::RandomInit => "random_init",
            Mode::LocalCl => "local_cl",
            Mode::FeOnly => "fe_only",
            Mode::FeGsm => "fe_gsm",
        }
    }

    pub fn trains(self) -> bool {
        self != Mode::RandomInit
    }

    pub fn exchanges(self) -> bool {
        matches!(self, Mode::FeOnly | Mode::FeGsm)
    }

    pub fn uses_remote_positives(self) -> bool {
        self == Mode::FeGsm
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = FclError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                FclError::config(
                    "mode",
                    format!(
                        "unknown arm `{s}`, expected one of random_init, local_cl, fe_only, fe_gsm"
                    ),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_steps: usize,
    /// Positive pairs per step; each pair contributes two anchors.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// K: local bank capacity and negatives sampled per anchor.
    pub bank_capacity: usize,
    /// No loss is computed until the local bank holds this many entries.
    pub min_bank_fill: usize,
    pub temperature: f64,
    pub mode: Mode,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Pass exchanged messages through the binary wire format.
    pub serialize_exchange: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            rounds: 20,
            local_steps: 25,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.99,
            bank_capacity: 1024,
            min_bank_fill: 16,
            temperature: 0.07,
            mode: Mode::FeGsm,
            hidden_dim: 128,
            embed_dim: 32,
            serialize_exchange: true,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("local_steps", self.local_steps),
            ("batch_size", self.batch_size),
            ("bank_capacity", self.bank_capacity),
            ("min_bank_fill", self.min_bank_fill),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(FclError::config(field, "must be ≥ 1"));
            }
        }
        if self.min_bank_fill > self.bank_capacity {
            return Err(FclError::config(
                "min_bank_fill",
                format!("cannot exceed bank_capacity ({})", self.bank_capacity),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(FclError::config("lr", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(FclError::config("momentum", "must be in [0, 1]"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(FclError::config("temperature", "must be > 0"));
        }
        Ok(())
    }

    pub fn encoder_dims(&self, input_dim: usize) -> EncoderDims {
        EncoderDims::new(input_dim, self.hidden_dim, self.embed_dim)
    }
}

/// Everything one simulated site owns.
#[derive(Debug, Clone)]
pub struct ClientState {
    client_id: ClientId,
    shard: ClientShard,
    main: EncoderParams,
    momentum: EncoderParams,
    local_bank: MemoryBank,
    remote_banks: BTreeMap<ClientId, Arc<MemoryBank>>,
    seed: u64,
}

impl ClientState {
    pub fn new(
        shard: ClientShard,
        init: &EncoderParams,
        bank_capacity: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(ClientState {
            client_id: shard.client_id(),
            shard,
            main: init.clone(),
            momentum: init.clone(),
            local_bank: MemoryBank::new(bank_capacity, init.dims().embed)?,
            remote_banks: BTreeMap::new(),
            seed,
        })
    }

    pub fn client_id(&self) -> ClientId {
        self.client_id
    }

    pub fn shard(&self) -> &ClientShard {
        &self.shard
    }

    pub fn main_params(&self) -> &EncoderParams {
        &self.main
    }

    pub fn momentum_params(&self) -> &EncoderParams {
        &self.momentum
    }

    pub fn local_bank(&self) -> &MemoryBank {
        &self.local_bank
    }

    pub fn remote_banks(&self) -> &BTreeMap<ClientId, Arc<MemoryBank>> {
        &self.remote_banks
    }

    pub fn remote_feature_count(&self) -> usize {
        self.remote_banks.values().map(|b| b.len()).sum()
    }

    /// The message this client would broadcast in `round`.
    pub fn outgoing_message(&self, round: u32) -> Result<ExchangeMessage> {
        ExchangeMessage::from_bank(self.client_id, round, &self.local_bank)
    }
}

/// Weighted elementwise average `Σ wᵢθᵢ / Σ wᵢ`.
pub fn fedavg(models: &[&EncoderParams], weights: &[f64]) -> Result<EncoderParams> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(FclError::dim("fedavg weights", models.len(), weights.len()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(FclError::Contract(
            "fedavg weights must be finite and ≥ 0".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(FclError::Contract("fedavg weights sum to zero".into()));
    }
    if let [only] = models {
        return Ok((*only).clone());
    }
    let mut acc = EncoderParams::zeros(models[0].dims());
    for (m, w) in models.iter().zip(weights) {
        acc.add_scaled(w / total, m)?;
    }
    // Identical inputs would otherwise come back perturbed by rounding.
    if models[1..].iter().all(|m| *m == models[0]) {
        return Ok(models[0].clone());
    }
    Ok(acc)
}

/// All-to-all exchange of local bank snapshots. Each client ends up holding
/// an immutable copy of every other client's bank.
pub fn exchange(clients: &mut [ClientState], round: u32, transport: Transport) -> Result<()> {
    let mut delivered: Vec<(ClientId, Arc<MemoryBank>)> = Vec::with_capacity(clients.len());
    for c in clients.iter() {
        let msg = transport.deliver(&c.outgoing_message(round)?)?;
        if msg.sender_id() != c.client_id || msg.round_index() != round {
            return Err(FclError::Protocol(format!(
                "message from client {} round {} arrived as client {} round {}",
                c.client_id,
                round,
                msg.sender_id(),
                msg.round_index()
            )));
        }
        let bank = MemoryBank::from_features(
            c.local_bank.capacity(),
            c.local_bank.dim(),
            msg.into_features(),
        )?;
        delivered.push((c.client_id, Arc::new(bank)));
    }
    for c in clients.iter_mut() {
        c.remote_banks = delivered
            .iter()
            .filter(|(sender, _)| *sender != c.client_id)
            .map(|(sender, bank)| (*sender, Arc::clone(bank)))
            .collect();
    }
    Ok(())
}

/// One row of the per-round CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub client: ClientId,
    /// NaN when no loss was computed (control arm or cold bank).
    pub mean_loss_local: f64,
    pub mean_loss_remote: f64,
    /// Local bank entries divided by capacity, at the end of the round.
    pub bank_fill: f64,
    pub alignment_metric: f64,
}

pub fn write_round_csv<W: std::io::Write>(w: W, rows: &[RoundReport]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LocalStats {
    loss_local: f64,
    loss_remote: f64,
    steps_with_loss: usize,
}

struct PendingView {
    tape: ForwardTape,
    view: EncodedView,
}

fn encode_view<R: Rng>(
    client: &ClientState,
    augment: &Augmenter,
    at: crate::data::SliceRef,
    partition: PartitionId,
    rng: &mut R,
) -> Result<PendingView> {
    let x = client.shard.slice(at);
    let query = standardize(&augment.apply(x, rng)?);
    let key_input = standardize(&augment.apply(x, rng)?);
    let (anchor, tape) = client.main.forward(&query)?;
    let key = client.momentum.embed(&key_input)?;
    let volume_id = client.shard.volumes()[at.volume].volume_id();
    Ok(PendingView {
        tape,
        view: EncodedView {
            anchor,
            key: Feature::new(key, client.client_id, volume_id, partition)?,
        },
    })
}

/// One local optimisation step: build a batch, compute the loss against the
/// current pool, update both encoders and enqueue the new keys.
fn local_step<R: Rng>(
    client: &mut ClientState,
    cfg: &RoundConfig,
    augment: &Augmenter,
    rng: &mut R,
) -> Result<Option<(f64, f64)>> {
    let partitions = client.shard.partition_spec().partitions;
    let mut views = Vec::with_capacity(2 * cfg.batch_size);
    let mut positives = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let s = rng.random_range(0..partitions) as PartitionId;
        let (ri, rj) = sample_training_pair(&client.shard, s, rng)?;
        let vi = encode_view(client, augment, ri, s, rng)?;
        let vj = encode_view(client, augment, rj, s, rng)?;
        positives.push(build_local_positives(&vi.view, &vj.view)?);
        views.push(vi);
        views.push(vj);
    }

    let mut losses = None;
    if client.local_bank.len() >= cfg.min_bank_fill {
        let remotes: Vec<&MemoryBank> = if cfg.mode.exchanges() {
            client.remote_banks.values().map(|b| b.as_ref()).collect()
        } else {
            Vec::new()
        };
        let pool = aggregate_banks(&client.local_bank, remotes)?;
        let k = cfg.bank_capacity.min(pool.len());

        let mut sampled = Vec::with_capacity(views.len());
        for pv in &views {
            let idx = sample_negative_indices(pool.len(), k, rng)?;
            let negatives: Vec<&Feature> = idx.into_iter().map(|i| pool[i]).collect();
            let remote = if cfg.mode.uses_remote_positives() {
                remote_positives(pv.view.key.partition_id(), &negatives)
            } else {
                Vec::new()
            };
            sampled.push((negatives, remote));
        }
        let terms: Vec<AnchorTerms<'_>> = views
            .iter()
            .zip(&sampled)
            .enumerate()
            .map(|(a, (pv, (negatives, remote)))| {
                let local = &positives[a / 2];
                let set = PositiveSet::new(
                    pv.view.key.partition_id(),
                    local.iter().collect(),
                    remote.clone(),
                )?;
                Ok(AnchorTerms {
                    q: pv.view.anchor.as_slice(),
                    local: set.local.iter().map(|f| f.vec().as_slice()).collect(),
                    remote: set.remote.iter().map(|f| f.vec().as_slice()).collect(),
                    negatives: negatives.iter().map(|f| f.vec().as_slice()).collect(),
                })
            })
            .collect::<Result<_>>()?;
        let loss = batch_loss(&terms, cfg.temperature)?;

        let mut grad = EncoderParams::zeros(client.main.dims());
        for (pv, g) in views.iter().zip(&loss.grads) {
            grad.add_scaled(1.0, &client.main.backward(&pv.tape, g)?)?;
        }
        client.main.sgd_step(&grad, cfg.lr)?;
        losses = Some((loss.mean_local, loss.mean_remote));
    }

    client
        .momentum
        .momentum_update(&client.main, cfg.momentum)?;
    for pv in views {
        client.local_bank.push(pv.view.key)?;
    }
    Ok(losses)
}

fn train_client(client: &mut ClientState, cfg: &RoundConfig, round: usize) -> Result<LocalStats> {
    let mut rng = seeding::stream(
        client.seed,
        &[tag::CLIENT_ROUND, u64::from(client.client_id), round as u64],
    );
    let augment = Augmenter::new(client.shard.image_side());
    let mut stats = LocalStats::default();
    for _ in 0..cfg.local_steps {
        if let Some((local, remote)) = local_step(client, cfg, &augment, &mut rng)? {
            stats.loss_local += local;
            stats.loss_remote += remote;
            stats.steps_with_loss += 1;
        }
    }
    Ok(stats)
}

fn aggregate(clients: &mut [ClientState]) -> Result<()> {
    let weights: Vec<f64> = clients
        .iter()
        .map(|c| c.shard.slice_count() as f64)
        .collect();
    let mains: Vec<&EncoderParams> = clients.iter().map(|c| &c.main).collect();
    let main = fedavg(&mains, &weights)?;
    let moms: Vec<&EncoderParams> = clients.iter().map(|c| &c.momentum).collect();
    let momentum = fedavg(&moms, &weights)?;
    for c in clients.iter_mut() {
        c.main.clone_from(&main);
        c.momentum.clone_from(&momentum);
    }
    Ok(())
}

fn round_alignment(clients: &[ClientState]) -> Result<Vec<f64>> {
    if clients.len() < 2 {
        return Ok(vec![0.0; clients.len()]);
    }
    let shards: Vec<ClientShard> = clients.iter().map(|c| c.shard.clone()).collect();
    let points = evaluation::embed_shards(&clients[0].main, &shards)?;
    clients
        .iter()
        .map(|c| evaluation::client_alignment(&points, c.client_id))
        .collect()
}

/// Runs exchange, local training and aggregation for one round.
pub fn run_round(
    clients: &mut [ClientState],
    cfg: &RoundConfig,
    round: usize,
    par: &Parallelism,
) -> Result<Vec<RoundReport>> {
    let round_u32 = round as u32;
    let stats: Vec<LocalStats> = if cfg.mode.trains() {
        if cfg.mode.exchanges() {
            exchange(
                clients,
                round_u32,
                Transport {
                    serialize: cfg.serialize_exchange,
                },
            )?;
        }
        par.map_mut(clients, |c| {
            train_client(c, cfg, round).map_err(|e| FclError::Client {
                client_id: c.client_id,
                source: Box::new(e),
            })
        })
        .into_iter()
        .collect::<Result<_>>()?
    } else {
        vec![LocalStats::default(); clients.len()]
    };
    if cfg.mode.trains() {
        aggregate(clients)?;
    }
    let alignment = round_alignment(clients)?;

    Ok(clients
        .iter()
        .zip(stats)
        .zip(alignment)
        .map(|((c, s), a)| {
            let mean = |x: f64| {
                if s.steps_with_loss == 0 {
                    f64::NAN
                } else {
                    x / s.steps_with_loss as f64
                }
            };
            RoundReport {
                round,
                client: c.client_id,
                mean_loss_local: mean(s.loss_local),
                mean_loss_remote: mean(s.loss_remote),
                bank_fill: c.local_bank.len() as f64 / c.local_bank.capacity() as f64,
                alignment_metric: a,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    /// Global seed; overrides `data.seed`.
    pub seed: u64,
    pub data: SyntheticConfig,
    pub round: RoundConfig,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.round.validate()?;
        self.probe.validate(self.data.volumes_per_client)
    }

    pub fn data_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub encoder: EncoderParams,
    pub rounds: Vec<RoundReport>,
    pub eval: Vec<evaluation::EvalRow>,
}

/// Identical freshly initialised clients, one per shard.
pub fn init_clients(cfg: &ExperimentConfig, shards: Vec<ClientShard>) -> Result<Vec<ClientState>> {
    let dims = cfg.round.encoder_dims(cfg.data.input_dim());
    let init = EncoderParams::init(dims, &mut seeding::stream(cfg.seed, &[tag::INIT]));
    shards
        .into_iter()
        .map(|s| ClientState::new(s, &init, cfg.round.bank_capacity, cfg.seed))
        .collect()
}

/// Generates data, pre-trains for `cfg.round.rounds` rounds and probes the
/// final global encoder.
pub fn run_experiment(cfg: &ExperimentConfig, par: &Parallelism) -> Result<ExperimentResult> {
    cfg.validate()?;
    let shards = generate_dataset(&cfg.data_config())?;
    let mut clients = init_clients(cfg, shards)?;
    let mut rounds = Vec::new();
    for r in 0..cfg.round.rounds {
        let rows = run_round(&mut clients, &cfg.round, r, par)?;
        if let Some(first) = rows.first() {
            log::info!(
                "[{}] round {r}: local loss {:.4}, remote loss {:.4}, alignment {:.4}",
                cfg.round.mode,
                rows.iter().map(|x| x.mean_loss_local).sum::<f64>() / rows.len() as f64,
                rows.iter().map(|x| x.mean_loss_remote).sum::<f64>() / rows.len() as f64,
                first.alignment_metric
            );
        }
        rounds.extend(rows);
    }
    let encoder = clients[0].main.clone();
    let shards: Vec<ClientShard> = clients.into_iter().map(|c| c.shard).collect();
    let eval = evaluation::evaluate_encoder(
        cfg.round.mode.as_str(),
        &encoder,
        &shards,
        &cfg.probe,
        cfg.seed,
    )?;
    Ok(ExperimentResult {
        encoder,
        rounds,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            data: SyntheticConfig {
                num_clients: 3,
                volumes_per_client: 5,
                ..SyntheticConfig::default()
            },
            round: RoundConfig {
                rounds: 2,
                local_steps: 3,
                batch_size: 4,
                bank_capacity: 16,
                min_bank_fill: 8,
                hidden_dim: 16,
                embed_dim: 8,
                ..RoundConfig::default()
            },
            probe: ProbeConfig {
                budgets: vec![1],
                epochs: 10,
                folds: 5,
                ..ProbeConfig::default()
            },
        }
    }

    #[test]
    fn fedavg_examples() {
        let d = EncoderDims::new(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = EncoderParams::init(d, &mut rng);
        let b = EncoderParams::init(d, &mut rng);
        assert_eq!(fedavg(&[&a, &a, &a], &[1.0, 2.0, 3.0]).unwrap(), a);
        assert_eq!(fedavg(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        let mut neg = a.clone();
        neg.scale(-1.0);
        assert!(fedavg(&[&a, &neg], &[1.0, 1.0])
            .unwrap()
            .flatten()
            .iter()
            .all(|v| *v == 0.0));
        assert!(fedavg(&[&a, &b], &[0.0, 0.0]).is_err());
        let other = EncoderParams::init(EncoderDims::new(3, 5, 2), &mut rng);
        assert!(matches!(
            fedavg(&[&a, &other], &[1.0, 1.0]),
            Err(FclError::Dimension { .. })
        ));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("fedswav".parse::<Mode>().is_err());
    }

    #[test]
    fn exchange_counts_and_ownership() {
        let cfg = tiny();
        let shards = generate_dataset(&cfg.data_config()).unwrap();
        let mut clients = init_clients(&cfg, shards).unwrap();
        let solo = &mut clients[..1].to_vec();
        exchange(solo, 0, Transport { serialize: true }).unwrap();
        assert!(solo[0].remote_banks().is_empty());

        let mut round = RoundConfig {
            mode: Mode::LocalCl,
            ..cfg.round.clone()
        };
        round.local_steps = 4; // 4 steps × 8 keys fills a K = 16 bank
        run_round(&mut clients, &round, 0, &Parallelism::sequential()).unwrap();
        exchange(&mut clients, 1, Transport { serialize: true }).unwrap();
        for c in &clients {
            assert_eq!(c.local_bank().len(), 16);
            assert_eq!(c.remote_feature_count(), 2 * 16);
            assert!(!c.remote_banks().contains_key(&c.client_id()));
            assert!(c
                .local_bank()
                .iter()
                .all(|f| f.client_id() == c.client_id()));
            for (sender, bank) in c.remote_banks() {
                assert!(bank.iter().all(|f| f.client_id() == *sender));
            }
            let pool = aggregate_banks(
                c.local_bank(),
                c.remote_banks().values().map(|b| b.as_ref()),
            )
            .unwrap();
            assert_eq!(pool.len(), 3 * 16);
        }
    }

    #[test]
    fn random_init_leaves_params_unchanged() {
        let mut cfg = tiny();
        cfg.round.mode = Mode::RandomInit;
        let shards = generate_dataset(&cfg.data_config()).unwrap();
        let mut clients = init_clients(&cfg, shards).unwrap();
        let before = clients[0].main_params().clone();
        for r in 0..3 {
            let rows = run_round(&mut clients, &cfg.round, r, &Parallelism::sequential()).unwrap();
            assert!(rows
                .iter()
                .all(|x| x.mean_loss_local.is_nan() && x.bank_fill == 0.0));
        }
        assert!(clients.iter().all(|c| c.main_params() == &before));
    }

    #[test]
    fn clients_agree_after_aggregation_and_banks_stay_bounded() {
        for mode in [Mode::LocalCl, Mode::FeOnly, Mode::FeGsm] {
            let mut cfg = tiny();
            cfg.round.mode = mode;
            let shards = generate_dataset(&cfg.data_config()).unwrap();
            let mut clients = init_clients(&cfg, shards).unwrap();
            let init = clients[0].main_params().clone();
            for r in 0..3 {
                let rows =
                    run_round(&mut clients, &cfg.round, r, &Parallelism::sequential()).unwrap();
                for c in &clients {
                    assert_eq!(c.main_params(), clients[0].main_params());
                    assert_eq!(c.momentum_params(), clients[0].momentum_params());
                    assert!(c.local_bank().len() <= c.local_bank().capacity());
                }
                assert_eq!(rows.len(), 3);
            }
            assert_ne!(clients[0].main_params(), &init, "{mode} did not train");
        }
    }

    #[test]
    fn remote_loss_only_with_gsm() {
        let mut cfg = tiny();
        cfg.round.rounds = 3;
        for mode in [Mode::FeOnly, Mode::FeGsm] {
            cfg.round.mode = mode;
            let res = run_experiment(&cfg, &Parallelism::sequential()).unwrap();
            let last = res.rounds.last().unwrap();
            assert!(last.mean_loss_local > 0.0);
            if mode == Mode::FeGsm {
                assert!(last.mean_loss_remote > 0.0);
            } else {
                assert_eq!(last.mean_loss_remote, 0.0);
            }
        }
    }

    #[test]
    fn parallel_rounds_match_sequential() {
        let cfg = tiny();
        let seq = run_experiment(&cfg, &Parallelism::sequential()).unwrap();
        let par = run_experiment(&cfg, &Parallelism::with_threads(3).unwrap()).unwrap();
        assert_eq!(seq.encoder, par.encoder);
        let a: Vec<String> = seq.rounds.iter().map(|r| format!("{r:?}")).collect();
        let b: Vec<String> = par.rounds.iter().map(|r| format!("{r:?}")).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rounds_evaluates_initialisation() {
        let mut cfg = tiny();
        cfg.round.rounds = 0;
        let res = run_experiment(&cfg, &Parallelism::sequential()).unwrap();
        let shards = generate_dataset(&cfg.data_config()).unwrap();
        let init = init_clients(&cfg, shards).unwrap()[0].main_params().clone();
        assert_eq!(res.encoder, init);
        assert!(res.rounds.is_empty());
        assert_eq!(res.eval.len(), 5);
    }
}
