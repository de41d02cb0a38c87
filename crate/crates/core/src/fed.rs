//! The federated protocol: round orchestration over partially shared
//! models, contrastive regularization on flattened parameter vectors,
//! weighted aggregation, wire-byte accounting, and the baseline matrix.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::metrics::{comm_report, psnr, ssim, CommReport, MetricsRecord};
use crate::models::{KINet, ParameterSet, Partition, PartitionMode};
use crate::rng::{self, tag};
use crate::scalar::Scalar;
use crate::sim::{ClientDataset, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedmri,
    Fedavg,
    Fedprox,
    Singleset,
    TransferSite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    L1,
    L2,
    Ntxent,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Uniform,
    DataProportion,
}

/// Resolved run parameters shared by every algorithm.
#[derive(Debug, Clone)]
pub struct FLConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub mu: f64,
    pub mu_prox: f64,
    pub partition_mode: PartitionMode,
    pub contrastive_kind: ContrastiveKind,
    pub aggregation: Aggregation,
    pub joint_local_update: bool,
    pub seed: u64,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            algorithm: Algorithm::Fedmri,
            clients: 1,
            rounds: 1,
            local_epochs: 1,
            lr: 1e-4,
            batch: 8,
            mu: 100.0,
            mu_prox: 0.01,
            partition_mode: PartitionMode::default(),
            contrastive_kind: ContrastiveKind::L1,
            aggregation: Aggregation::Uniform,
            joint_local_update: false,
            seed: 0,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.local_epochs < 1 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.mu < 0.0 || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be nonnegative, got {}", self.mu)));
        }
        if self.mu_prox < 0.0 || !self.mu_prox.is_finite() {
            return Err(Error::Config(format!(
                "mu_prox must be nonnegative, got {}",
                self.mu_prox
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadClass {
    Model,
    Negatives,
}

/// One wire transfer. Payloads are accounted as raw little-endian float32
/// runs in parameter name order: 4 bytes per element plus the JSON manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundMessage {
    pub direction: Direction,
    pub class: PayloadClass,
    pub round: usize,
    pub client: usize,
    pub elements: usize,
    pub manifest: String,
    pub byte_count: u64,
}

impl RoundMessage {
    pub fn new(
        direction: Direction,
        class: PayloadClass,
        round: usize,
        client: usize,
        elements: usize,
    ) -> Self {
        #[derive(Serialize)]
        struct Manifest {
            direction: Direction,
            class: PayloadClass,
            round: usize,
            client: usize,
            elements: usize,
            dtype: &'static str,
        }
        let manifest = serde_json::to_string(&Manifest {
            direction,
            class,
            round,
            client,
            elements,
            dtype: "f32",
        })
        .expect("manifest serializes");
        let byte_count = 4 * elements as u64 + manifest.len() as u64;
        RoundMessage {
            direction,
            class,
            round,
            client,
            elements,
            manifest,
            byte_count,
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        4 * self.elements as u64
    }
}

const DENOM_GUARD: f64 = 1e-12;
const NTXENT_TEMPERATURE: f64 = 0.5;

fn check_vectors<T: Scalar>(anchor: &[T], positive: &[T], negatives: &[Vec<T>]) -> Result<()> {
    if negatives.is_empty() {
        return Err(Error::Config("contrastive term needs at least one negative".into()));
    }
    if positive.len() != anchor.len() {
        return Err(Error::Dimension(format!(
            "positive has {} elements, anchor has {}",
            positive.len(),
            anchor.len()
        )));
    }
    for (i, q) in negatives.iter().enumerate() {
        if q.len() != anchor.len() {
            return Err(Error::Dimension(format!(
                "negative {i} has {} elements, anchor has {}",
                q.len(),
                anchor.len()
            )));
        }
    }
    Ok(())
}

fn l1_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum()
}

fn l2_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

fn norm<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Softmax probabilities over cosine-similarity logits: entry 0 is the
/// positive, the rest follow `negatives` order. None when any vector has a
/// near-zero norm.
fn ntxent_probs<T: Scalar>(
    anchor: &[T],
    positive: &[T],
    negatives: &[Vec<T>],
) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let na = norm(anchor);
    let np = norm(positive);
    if na < DENOM_GUARD || np < DENOM_GUARD {
        return None;
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(dot(anchor, positive) / (na * np));
    for q in negatives {
        let nq = norm(q);
        if nq < DENOM_GUARD {
            return None;
        }
        sims.push(dot(anchor, q) / (na * nq));
    }
    let m = sims
        .iter()
        .map(|s| s / NTXENT_TEMPERATURE)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims
        .iter()
        .map(|s| (s / NTXENT_TEMPERATURE - m).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / z).collect();
    Some((probs, sims, na))
}

/// Ratio (or NT-Xent) loss comparing an anchor parameter vector against one
/// positive and a set of negatives. Returns `(value, skipped)`; skipped is
/// set when the denominator guard trips and the value is forced to 0.
pub fn contrastive_loss<T: Scalar>(
    anchor: &[T],
    positive: &[T],
    negatives: &[Vec<T>],
    kind: ContrastiveKind,
) -> Result<(T, bool)> {
    check_vectors(anchor, positive, negatives)?;
    match kind {
        ContrastiveKind::Off => Ok((T::zero(), true)),
        ContrastiveKind::L1 => {
            let n = l1_dist(anchor, positive);
            let d: f64 = negatives.iter().map(|q| l1_dist(q, anchor)).sum();
            if d < DENOM_GUARD {
                Ok((T::zero(), true))
            } else {
                Ok((T::cast(n / d), false))
            }
        }
        ContrastiveKind::L2 => {
            let n = l2_dist(anchor, positive);
            let d: f64 = negatives.iter().map(|q| l2_dist(q, anchor)).sum();
            if d < DENOM_GUARD {
                Ok((T::zero(), true))
            } else {
                Ok((T::cast(n / d), false))
            }
        }
        ContrastiveKind::Ntxent => match ntxent_probs(anchor, positive, negatives) {
            None => Ok((T::zero(), true)),
            Some((probs, _, _)) => Ok((T::cast(-probs[0].ln()), false)),
        },
    }
}

/// Analytic gradient of [`contrastive_loss`] with respect to the anchor.
/// Zero vector whenever the loss is skipped; sign(0) = 0 at L1 kinks.
pub fn contrastive_grad<T: Scalar>(
    anchor: &[T],
    positive: &[T],
    negatives: &[Vec<T>],
    kind: ContrastiveKind,
) -> Result<Vec<T>> {
    check_vectors(anchor, positive, negatives)?;
    let dim = anchor.len();
    let zeros = || vec![T::zero(); dim];
    match kind {
        ContrastiveKind::Off => Ok(zeros()),
        ContrastiveKind::L1 => {
            let n = l1_dist(anchor, positive);
            let d: f64 = negatives.iter().map(|q| l1_dist(q, anchor)).sum();
            if d < DENOM_GUARD {
                return Ok(zeros());
            }
            let mut g = Vec::with_capacity(dim);
            for j in 0..dim {
                let a = anchor[j].as_f64();
                let dn = sgn(a - positive[j].as_f64());
                let dd: f64 = negatives.iter().map(|q| sgn(a - q[j].as_f64())).sum();
                g.push(T::cast((dn * d - n * dd) / (d * d)));
            }
            Ok(g)
        }
        ContrastiveKind::L2 => {
            let n = l2_dist(anchor, positive);
            let d: f64 = negatives.iter().map(|q| l2_dist(q, anchor)).sum();
            if d < DENOM_GUARD {
                return Ok(zeros());
            }
            let norms: Vec<f64> = negatives.iter().map(|q| l2_dist(q, anchor)).collect();
            let mut g = Vec::with_capacity(dim);
            for j in 0..dim {
                let a = anchor[j].as_f64();
                let dn = if n < DENOM_GUARD {
                    0.0
                } else {
                    (a - positive[j].as_f64()) / n
                };
                let dd: f64 = negatives
                    .iter()
                    .zip(&norms)
                    .filter(|(_, &nq)| nq >= DENOM_GUARD)
                    .map(|(q, &nq)| (a - q[j].as_f64()) / nq)
                    .sum();
                g.push(T::cast((dn * d - n * dd) / (d * d)));
            }
            Ok(g)
        }
        ContrastiveKind::Ntxent => {
            let Some((probs, sims, na)) = ntxent_probs(anchor, positive, negatives) else {
                return Ok(zeros());
            };
            // dL/ds_0 = (p_0 - 1)/tau, dL/ds_i = p_i/tau;
            // grad_a cos(a, v) = v/(|a||v|) - cos * a/|a|^2
            let mut g = vec![0.0f64; dim];
            let mut accumulate = |v: &[T], cos: f64, coef: f64| {
                let nv = norm(v);
                for (gj, (&vj, &aj)) in g.iter_mut().zip(v.iter().zip(anchor)) {
                    *gj += coef * (vj.as_f64() / (na * nv) - cos * aj.as_f64() / (na * na));
                }
            };
            accumulate(positive, sims[0], (probs[0] - 1.0) / NTXENT_TEMPERATURE);
            for (i, q) in negatives.iter().enumerate() {
                accumulate(q, sims[i + 1], probs[i + 1] / NTXENT_TEMPERATURE);
            }
            Ok(g.into_iter().map(T::cast).collect())
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-client, per-round digest of which partitions changed. The protocol
/// contract: the local update never touches SHARED, the encoder update
/// never touches LOCAL (both only when the split is actually in force,
/// i.e. not under joint training or full-sharing baselines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FreezeAudit {
    pub client_id: usize,
    pub shared_before_local: String,
    pub shared_after_local: String,
    pub local_before_encoder: String,
    pub local_after_encoder: String,
}

impl FreezeAudit {
    pub fn shared_frozen(&self) -> bool {
        self.shared_before_local == self.shared_after_local
    }

    pub fn local_frozen(&self) -> bool {
        self.local_before_encoder == self.local_after_encoder
    }
}

/// One client: its model copy, data, and persistent optimizer state.
/// RNG streams are derived per use from (seed, client_id, round) so
/// concurrent and sequential execution produce identical results.
#[derive(Debug)]
pub struct ClientState<T> {
    pub client_id: usize,
    pub params: ParameterSet<T>,
    pub dataset: ClientDataset<T>,
    pub optimizer: Optimizer<T>,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(client_id: usize, params: ParameterSet<T>, dataset: ClientDataset<T>) -> Self {
        ClientState {
            client_id,
            params,
            dataset,
            optimizer: Optimizer::new(OptimizerKind::RmsProp),
        }
    }
}

/// Server-side view: current global shared vector, the previous round's
/// uploads (the contrastive negatives), and the 1-based round index.
#[derive(Debug, Clone)]
pub struct ServerState<T> {
    pub global_shared: Vec<T>,
    pub prev_round_client_shared: Vec<Vec<T>>,
    pub round: usize,
}

const PHASE_LOCAL: u64 = 0;
const PHASE_ENCODER: u64 = 1;

struct ContrastiveCtx<'a, T> {
    positive: &'a [T],
    negatives: &'a [Vec<T>],
    mu: f64,
    kind: ContrastiveKind,
}

struct EpochPlan<'a, T> {
    trainable: Option<Partition>,
    epochs: usize,
    phase: u64,
    round: usize,
    prox_anchor: Option<&'a [T]>,
    con: Option<ContrastiveCtx<'a, T>>,
}

fn contrastive_active(config: &FLConfig, round: usize, has_negatives: bool) -> bool {
    config.mu > 0.0
        && config.contrastive_kind != ContrastiveKind::Off
        && round > 1
        && has_negatives
}

/// grad += mu * (w - anchor) over every parameter, anchor flat in name order.
fn add_prox_grad<T: Scalar>(set: &mut ParameterSet<T>, anchor: &[T], mu: T) -> Result<()> {
    if anchor.len() != set.element_count(None) {
        return Err(Error::Dimension(format!(
            "proximal anchor has {} elements, model has {}",
            anchor.len(),
            set.element_count(None)
        )));
    }
    let idx = set.sorted_indices(None);
    let mut off = 0;
    for i in idx {
        let p = &mut set.params_mut()[i];
        let n = p.value.data().len();
        for j in 0..n {
            let w = p.value.data()[j];
            p.grad.data_mut()[j] += mu * (w - anchor[off + j]);
        }
        off += n;
    }
    Ok(())
}

/// Minibatch training loop shared by every algorithm. Per minibatch:
/// accumulate reconstruction grads (scaled 1/batch), then the proximal
/// and contrastive terms, then one optimizer step on the trainable
/// partition. Shuffles are keyed by (seed, client, round, phase, epoch).
fn train_epochs<T: Scalar>(
    params: &mut ParameterSet<T>,
    opt: &mut Optimizer<T>,
    model: &KINet,
    data: &ClientDataset<T>,
    client_id: usize,
    config: &FLConfig,
    plan: &EpochPlan<T>,
) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Config(format!("client {client_id} has an empty train set")));
    }
    let n = data.train.len();
    let (h, w) = (data.mask.bits.shape()[0], data.mask.bits.shape()[1]);
    let lr = T::cast(config.lr);
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut srng = rng::stream(
            config.seed,
            &[
                tag::SHUFFLE,
                client_id as u64,
                plan.round as u64,
                plan.phase,
                epoch as u64,
            ],
        );
        order.shuffle(&mut srng);
        for chunk in order.chunks(config.batch) {
            params.zero_grads();
            let inv = T::cast(1.0 / chunk.len() as f64);
            for &i in chunk {
                let s = &data.train[i];
                let (mut tape, out) = model.forward(params, &s.k_meas, &data.mask.bits)?;
                let target = s.y.reshaped(&[1, h, w])?;
                let loss = tape.l1_loss(out, &target)?;
                let scaled = tape.scale(loss, inv);
                tape.backward(scaled)?;
                params.add_tape_grads(&tape);
            }
            if let Some(anchor) = plan.prox_anchor {
                add_prox_grad(params, anchor, T::cast(config.mu_prox))?;
            }
            if let Some(c) = &plan.con {
                let a = params.flatten(Partition::Shared);
                let g = contrastive_grad(&a, c.positive, c.negatives, c.kind)?;
                params.add_shared_grad(&g, T::cast(c.mu))?;
            }
            params.step(opt, lr, plan.trainable)?;
        }
    }
    Ok(())
}

/// Local phase of one round. Merges the broadcast global into SHARED, then
/// trains `local_epochs` epochs. What trains depends on the algorithm:
/// fedmri freezes SHARED (unless joint training, which folds the
/// contrastive term in and replaces the separate encoder phase); the
/// fully shared baselines train everything, fedprox with a proximal pull
/// toward the broadcast model.
pub fn client_local_update<T: Scalar>(
    client: &mut ClientState<T>,
    model: &KINet,
    global_shared: &[T],
    config: &FLConfig,
    round: usize,
    negatives: &[Vec<T>],
) -> Result<()> {
    if client.dataset.train.is_empty() {
        return Err(Error::Config(format!(
            "client {} has an empty train set",
            client.client_id
        )));
    }
    client.params.merge_params(global_shared)?;
    let (trainable, prox_anchor, con) = match config.algorithm {
        Algorithm::Fedmri => {
            if config.joint_local_update {
                let con = contrastive_active(config, round, !negatives.is_empty()).then_some(
                    ContrastiveCtx {
                        positive: global_shared,
                        negatives,
                        mu: config.mu,
                        kind: config.contrastive_kind,
                    },
                );
                (None, None, con)
            } else {
                (Some(Partition::Local), None, None)
            }
        }
        Algorithm::Fedavg | Algorithm::Singleset | Algorithm::TransferSite => (None, None, None),
        Algorithm::Fedprox => (None, Some(global_shared), None),
    };
    if client.params.element_count(trainable) == 0 {
        return Ok(());
    }
    let plan = EpochPlan {
        trainable,
        epochs: config.local_epochs,
        phase: PHASE_LOCAL,
        round,
        prox_anchor,
        con,
    };
    train_epochs(
        &mut client.params,
        &mut client.optimizer,
        model,
        &client.dataset,
        client.client_id,
        config,
        &plan,
    )
}

/// Encoder phase of one round: a single epoch updating only SHARED under
/// reconstruction loss plus `mu` times the contrastive term (anchor: the
/// client's current SHARED vector; positive: the server's global; negatives:
/// every previous-round upload, self included). The term is skipped in the
/// first round. Returns the updated SHARED vector, which becomes the upload.
pub fn client_encoder_update<T: Scalar>(
    client: &mut ClientState<T>,
    model: &KINet,
    server: &ServerState<T>,
    config: &FLConfig,
) -> Result<Vec<T>> {
    let con = contrastive_active(
        config,
        server.round,
        !server.prev_round_client_shared.is_empty(),
    )
    .then_some(ContrastiveCtx {
        positive: &server.global_shared,
        negatives: &server.prev_round_client_shared,
        mu: config.mu,
        kind: config.contrastive_kind,
    });
    if client.params.element_count(Some(Partition::Shared)) > 0 {
        let plan = EpochPlan {
            trainable: Some(Partition::Shared),
            epochs: 1,
            phase: PHASE_ENCODER,
            round: server.round,
            prox_anchor: None,
            con,
        };
        train_epochs(
            &mut client.params,
            &mut client.optimizer,
            model,
            &client.dataset,
            client.client_id,
            config,
            &plan,
        )?;
    }
    Ok(client.params.flatten(Partition::Shared))
}

/// Elementwise weighted average, accumulated in client order.
pub fn server_aggregate<T: Scalar>(vectors: &[Vec<T>], weights: &[f64]) -> Result<Vec<T>> {
    if vectors.is_empty() {
        return Err(Error::Config("aggregation needs at least one vector".into()));
    }
    if weights.len() != vectors.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} vectors",
            weights.len(),
            vectors.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("aggregation weights sum to {sum}, want 1")));
    }
    let dim = vectors[0].len();
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Dimension(format!(
                "vector {i} has {} elements, vector 0 has {dim}",
                v.len()
            )));
        }
    }
    let mut out = vec![T::zero(); dim];
    for (v, &w) in vectors.iter().zip(weights) {
        let wc = T::cast(w);
        for (o, &x) in out.iter_mut().zip(v) {
            *o += wc * x;
        }
    }
    Ok(out)
}

/// Mean L1 reconstruction loss of `params` over a sample list.
pub fn mean_l1_loss<T: Scalar>(
    model: &KINet,
    params: &ParameterSet<T>,
    samples: &[Sample<T>],
    mask_bits: &Tensor<T>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("loss over an empty sample list".into()));
    }
    let mut acc = 0.0;
    for s in samples {
        let r = model.reconstruct(params, &s.k_meas, mask_bits)?;
        let n = r.data().len() as f64;
        acc += r
            .data()
            .iter()
            .zip(s.y.data())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>()
            / n;
    }
    Ok(acc / samples.len() as f64)
}

/// Everything one round produced: wire messages, partition audits, the
/// uploaded vectors, and the aggregated global (empty for algorithms
/// without aggregation).
#[derive(Debug, Clone)]
pub struct RoundReport<T> {
    pub round: usize,
    pub messages: Vec<RoundMessage>,
    pub audits: Vec<FreezeAudit>,
    pub uploads: Vec<Vec<T>>,
    pub global_after: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult<T> {
    pub records: Vec<MetricsRecord>,
    pub reports: Vec<RoundReport<T>>,
    pub comm: CommReport,
    /// Measured per-round wall time. Kept out of MetricsRecord so CSV
    /// output stays byte-identical across reruns.
    pub round_wall_ms: Vec<u64>,
    /// Per client, per test image, at the final round; paired significance
    /// tests between runs consume this.
    pub final_round_per_image_psnr: Vec<Vec<f64>>,
}

pub struct Experiment<T> {
    pub config: FLConfig,
    pub model: KINet,
    pub clients: Vec<ClientState<T>>,
    pub server: ServerState<T>,
    pub weights: Vec<f64>,
    traveling: Option<(ParameterSet<T>, Optimizer<T>)>,
}

impl<T: Scalar> Experiment<T> {
    /// Build server and clients from one seeded model init; every client
    /// starts from the same parameters. Fully shared baselines force
    /// `partition_mode = all_shared`.
    pub fn new(
        mut config: FLConfig,
        spec: &crate::models::KINetSpec,
        datasets: Vec<ClientDataset<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if datasets.len() != config.clients {
            return Err(Error::Config(format!(
                "config names {} clients but {} datasets were supplied",
                config.clients,
                datasets.len()
            )));
        }
        if matches!(config.algorithm, Algorithm::Fedavg | Algorithm::Fedprox) {
            config.partition_mode = PartitionMode::AllShared;
        }
        for (i, ds) in datasets.iter().enumerate() {
            if ds.train.is_empty() {
                return Err(Error::Config(format!("client {i} has an empty train set")));
            }
            if ds.test.is_empty() {
                return Err(Error::Config(format!("client {i} has an empty test set")));
            }
        }
        let mut init_rng = rng::stream(config.seed, &[tag::INIT]);
        let (model, params0) =
            crate::models::build_kinet::<T>(spec, config.partition_mode, &mut init_rng)?;
        let weights = match config.aggregation {
            Aggregation::Uniform => vec![1.0 / config.clients as f64; config.clients],
            Aggregation::DataProportion => {
                let total: usize = datasets.iter().map(|d| d.train.len()).sum();
                datasets
                    .iter()
                    .map(|d| d.train.len() as f64 / total as f64)
                    .collect()
            }
        };
        let global_shared = params0.flatten(Partition::Shared);
        let traveling = matches!(config.algorithm, Algorithm::TransferSite)
            .then(|| (params0.clone(), Optimizer::new(OptimizerKind::RmsProp)));
        let clients = datasets
            .into_iter()
            .enumerate()
            .map(|(i, ds)| ClientState::new(i, params0.clone(), ds))
            .collect();
        Ok(Experiment {
            config,
            model,
            clients,
            server: ServerState {
                global_shared,
                prev_round_client_shared: Vec::new(),
                round: 1,
            },
            weights,
            traveling,
        })
    }

    pub fn traveling_params(&self) -> Option<&ParameterSet<T>> {
        self.traveling.as_ref().map(|(p, _)| p)
    }

    /// One communication round: broadcast, local work (clients run
    /// concurrently; results are merged in client order), upload,
    /// aggregate, and re-sync every client's SHARED with the new global.
    pub fn run_round(&mut self) -> Result<RoundReport<T>> {
        let z = self.server.round;
        let mut messages = Vec::new();
        let mut audits = Vec::new();
        let (uploads, global_after) = match self.config.algorithm {
            Algorithm::Fedmri | Algorithm::Fedavg | Algorithm::Fedprox => {
                let (uploads, new_global) =
                    self.run_round_aggregated(z, &mut messages, &mut audits)?;
                self.server.prev_round_client_shared = uploads.clone();
                self.server.global_shared = new_global.clone();
                for client in &mut self.clients {
                    client.params.merge_params(&new_global)?;
                }
                (uploads, new_global)
            }
            Algorithm::Singleset => {
                self.run_round_singleset(z, &mut audits)?;
                (Vec::new(), Vec::new())
            }
            Algorithm::TransferSite => {
                self.run_round_transfer(z, &mut messages)?;
                (Vec::new(), Vec::new())
            }
        };
        self.server.round = z + 1;
        Ok(RoundReport {
            round: z,
            messages,
            audits,
            uploads,
            global_after,
        })
    }

    fn run_round_aggregated(
        &mut self,
        z: usize,
        messages: &mut Vec<RoundMessage>,
        audits: &mut Vec<FreezeAudit>,
    ) -> Result<(Vec<Vec<T>>, Vec<T>)> {
        let s = self.clients.len();
        let shared_len = self.server.global_shared.len();
        let negatives_active = matches!(self.config.algorithm, Algorithm::Fedmri)
            && contrastive_active(
                &self.config,
                z,
                !self.server.prev_round_client_shared.is_empty(),
            );
        for c in 0..s {
            messages.push(RoundMessage::new(Direction::Down, PayloadClass::Model, z, c, shared_len));
            if negatives_active {
                messages.push(RoundMessage::new(
                    Direction::Down,
                    PayloadClass::Negatives,
                    z,
                    c,
                    shared_len * s,
                ));
            }
        }
        let model = &self.model;
        let server = &self.server;
        let config = &self.config;
        let results: Vec<Result<(Vec<T>, FreezeAudit)>> = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(s);
            for client in self.clients.iter_mut() {
                handles.push(scope.spawn(move || client_round_work(client, model, server, config)));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("client worker panicked"))
                .collect()
        });
        let mut uploads = Vec::with_capacity(s);
        for (c, r) in results.into_iter().enumerate() {
            let (up, audit) = r?;
            messages.push(RoundMessage::new(Direction::Up, PayloadClass::Model, z, c, up.len()));
            audits.push(audit);
            uploads.push(up);
        }
        let new_global = server_aggregate(&uploads, &self.weights)?;
        Ok((uploads, new_global))
    }

    fn run_round_singleset(&mut self, z: usize, audits: &mut Vec<FreezeAudit>) -> Result<()> {
        let model = &self.model;
        let config = &self.config;
        let results: Vec<Result<FreezeAudit>> = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(self.clients.len());
            for client in self.clients.iter_mut() {
                handles.push(scope.spawn(move || {
                    let own = client.params.flatten(Partition::Shared);
                    let sb = sha256_hex(&client.params.partition_bytes(Partition::Shared));
                    client_local_update(client, model, &own, config, z, &[])?;
                    let sa = sha256_hex(&client.params.partition_bytes(Partition::Shared));
                    let lb = sha256_hex(&client.params.partition_bytes(Partition::Local));
                    Ok(FreezeAudit {
                        client_id: client.client_id,
                        shared_before_local: sb,
                        shared_after_local: sa,
                        local_before_encoder: lb.clone(),
                        local_after_encoder: lb,
                    })
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("client worker panicked"))
                .collect()
        });
        for r in results {
            audits.push(r?);
        }
        Ok(())
    }

    fn run_round_transfer(&mut self, z: usize, messages: &mut Vec<RoundMessage>) -> Result<()> {
        let s = self.clients.len();
        let mut order: Vec<usize> = (0..s).collect();
        let mut vrng = rng::stream(self.config.seed, &[tag::VISIT_ORDER, z as u64]);
        order.shuffle(&mut vrng);
        let (tparams, topt) = self.traveling.as_mut().expect("transfer model present");
        let all = tparams.element_count(None);
        for &c in &order {
            messages.push(RoundMessage::new(Direction::Down, PayloadClass::Model, z, c, all));
            let plan = EpochPlan {
                trainable: None,
                epochs: self.config.local_epochs,
                phase: PHASE_LOCAL,
                round: z,
                prox_anchor: None,
                con: None,
            };
            train_epochs(
                tparams,
                topt,
                &self.model,
                &self.clients[c].dataset,
                c,
                &self.config,
                &plan,
            )?;
            messages.push(RoundMessage::new(Direction::Up, PayloadClass::Model, z, c, all));
        }
        Ok(())
    }

    /// Mean test PSNR/SSIM plus the per-image PSNR list for one client,
    /// using the model that client would deploy right now.
    pub fn evaluate_client(&self, c: usize) -> Result<(f64, f64, Vec<f64>)> {
        let client = &self.clients[c];
        let params = if matches!(self.config.algorithm, Algorithm::TransferSite) {
            &self.traveling.as_ref().expect("transfer model present").0
        } else {
            &client.params
        };
        let mut psnrs = Vec::with_capacity(client.dataset.test.len());
        let mut ssims = Vec::with_capacity(client.dataset.test.len());
        for s in &client.dataset.test {
            let recon = self.model.reconstruct(params, &s.k_meas, &client.dataset.mask.bits)?;
            let (h, w) = (s.y.shape()[0], s.y.shape()[1]);
            let img = recon.reshaped(&[h, w])?;
            psnrs.push(psnr(&img, &s.y, 1.0)?);
            ssims.push(ssim(&img, &s.y, 1.0)?);
        }
        if psnrs.is_empty() {
            return Err(Error::Config(format!("client {c} has an empty test set")));
        }
        let n = psnrs.len() as f64;
        Ok((
            psnrs.iter().sum::<f64>() / n,
            ssims.iter().sum::<f64>() / n,
            psnrs,
        ))
    }

    fn evaluate_all(&self) -> Result<Vec<(f64, f64, Vec<f64>)>> {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..self.clients.len())
                .map(|c| scope.spawn(move || self.evaluate_client(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        })
    }

    /// All configured rounds, evaluating every client after each one.
    pub fn run(&mut self) -> Result<ExperimentResult<T>> {
        let mut records = Vec::new();
        let mut reports = Vec::new();
        let mut round_wall_ms = Vec::new();
        let mut last_per_image: Vec<Vec<f64>> = vec![Vec::new(); self.clients.len()];
        for _ in 0..self.config.rounds {
            let t0 = Instant::now();
            let report = self.run_round()?;
            let evals = self.evaluate_all()?;
            round_wall_ms.push(t0.elapsed().as_millis() as u64);
            for (c, (p, s, per)) in evals.into_iter().enumerate() {
                let bytes_up: u64 = report
                    .messages
                    .iter()
                    .filter(|m| m.client == c && m.direction == Direction::Up)
                    .map(|m| m.byte_count)
                    .sum();
                let bytes_down: u64 = report
                    .messages
                    .iter()
                    .filter(|m| m.client == c && m.direction == Direction::Down)
                    .map(|m| m.byte_count)
                    .sum();
                records.push(MetricsRecord {
                    round: report.round,
                    client_id: c,
                    psnr: p,
                    ssim: s,
                    bytes_up,
                    bytes_down,
                    wall_ms: 0,
                });
                last_per_image[c] = per;
            }
            reports.push(report);
        }
        let all: Vec<RoundMessage> =
            reports.iter().flat_map(|r| r.messages.iter().cloned()).collect();
        Ok(ExperimentResult {
            records,
            comm: comm_report(&all),
            round_wall_ms,
            final_round_per_image_psnr: last_per_image,
            reports,
        })
    }
}

fn client_round_work<T: Scalar>(
    client: &mut ClientState<T>,
    model: &KINet,
    server: &ServerState<T>,
    config: &FLConfig,
) -> Result<(Vec<T>, FreezeAudit)> {
    let z = server.round;
    client.params.merge_params(&server.global_shared)?;
    let shared_before_local = sha256_hex(&client.params.partition_bytes(Partition::Shared));
    client_local_update(
        client,
        model,
        &server.global_shared,
        config,
        z,
        &server.prev_round_client_shared,
    )?;
    let shared_after_local = sha256_hex(&client.params.partition_bytes(Partition::Shared));
    let local_before_encoder = sha256_hex(&client.params.partition_bytes(Partition::Local));
    let upload = if matches!(config.algorithm, Algorithm::Fedmri) && !config.joint_local_update {
        client_encoder_update(client, model, server, config)?
    } else {
        client.params.flatten(Partition::Shared)
    };
    let local_after_encoder = sha256_hex(&client.params.partition_bytes(Partition::Local));
    Ok((
        upload,
        FreezeAudit {
            client_id: client.client_id,
            shared_before_local,
            shared_after_local,
            local_before_encoder,
            local_after_encoder,
        },
    ))
}

/// Build and run in one call.
pub fn run_experiment<T: Scalar>(
    config: FLConfig,
    spec: &crate::models::KINetSpec,
    datasets: Vec<ClientDataset<T>>,
) -> Result<ExperimentResult<T>> {
    Experiment::new(config, spec, datasets)?.run()
}
