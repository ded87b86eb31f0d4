//! Round-by-round simulation of `N` clients and one server over an
//! in-process transport.
//!
//! Round `t`: fresh keys and key-sum agreement, local gradient at `θ_t`,
//! upload, aggregation, broadcast, decryption and the update to `θ_{t+1}`.
//! The published loop lists "receive, decrypt, update" before "compute the
//! local gradient"; running it in this order means round 0 starts from a
//! plain local gradient at `θ_0`, and the two orders produce the same
//! sequence of models.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::bucket::Bucketing;
use super::client::{Aggregate, ClientState, RoundContext, UploadTrace};
use super::config::{ClipSchedule, DatasetSpec, Mode, RunConfig};
use super::message::{BroadcastMessage, Payload, UploadMessage, WireContext};
use super::overflow::{measure_overflow, wrap_levels};
use super::server::ServerState;
use super::transport::{Endpoint, Envelope, MessageKind, Transport};
use crate::analysis::{comm_factor, min_clip_threshold_quantized, table_factor, tau_measured};
use crate::error::{Error, Result};
use crate::key_agreement::{decode_share, encode_share, KeyShare};
use crate::lwe::{expand_bucket_matrix, LweParams, PublicMatrix, SecretKey, Seed};
use crate::trainer::{
    load_csv, make_synthetic, CsvSchema, DatasetPartition, GaussianGradient, LocalObjective, Model,
    ModelObjective, NoisyQuadratic, SyntheticSpec,
};

/// Per-round measurements. `wall_time_s` is excluded from the CSV so that
/// reruns produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// `F(θ_t)` before this round's update.
    pub loss: f64,
    /// `‖∇F(θ_t)‖²` before this round's update.
    pub grad_norm_sq: f64,
    /// Length of one client's upload message.
    pub upload_bytes: u64,
    /// Payload bits of one client's upload.
    pub upload_payload_bits: u64,
    pub broadcast_bytes: u64,
    /// All key-agreement traffic this round.
    pub key_share_bytes: u64,
    pub overflow_count: u64,
    /// `C_t` used for this round's uploads.
    pub clip: f64,
    pub accuracy: Option<f64>,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: [&str; 7] = [
    "round",
    "loss",
    "grad_norm_sq",
    "upload_bytes",
    "broadcast_bytes",
    "overflow_count",
    "C_t",
];

impl RoundMetrics {
    pub fn csv_row(&self) -> [String; 7] {
        [
            self.round.to_string(),
            format!("{}", self.loss),
            format!("{}", self.grad_norm_sq),
            self.upload_bytes.to_string(),
            self.broadcast_bytes.to_string(),
            self.overflow_count.to_string(),
            format!("{}", self.clip),
        ]
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[RoundMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Protocol(format!("writing metrics: {e}"));
    w.write_record(METRICS_HEADER).map_err(err)?;
    for r in rows {
        w.write_record(r.csv_row()).map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Protocol(format!("writing metrics: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub rounds: u32,
    pub clients: usize,
    pub dim: usize,
    pub num_buckets: usize,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub mean_grad_norm_sq: f64,
    pub total_upload_bytes: u64,
    pub total_broadcast_bytes: u64,
    pub total_key_share_bytes: u64,
    pub upload_bytes_per_client_round: u64,
    pub upload_payload_bits_per_client_round: u64,
    /// `⌈log2 q⌉ / b`.
    pub tau_measured: f64,
    /// Upload payload bits over `d·b` (includes bucket padding).
    pub tau_payload: f64,
    /// Closed-form factor for the configured `m`.
    pub tau_formula: f64,
    /// `(b + 15)/b`.
    pub tau_table: f64,
    pub overflow_total: u64,
    pub overflow_fraction: f64,
    pub clip_initial: f64,
    pub clip_final: f64,
    pub param_warnings: Vec<String>,
    pub wall_time_s: f64,
}

struct Objectives {
    per_client: Vec<Box<dyn LocalObjective>>,
    theta0: Vec<f64>,
    test: Option<ModelObjective>,
}

const STREAM_INIT: u64 = 7;

fn build_objectives(cfg: &RunConfig) -> Result<Objectives> {
    let n = cfg.clients;
    let model_for = |nf: usize| -> Result<(Model, Vec<f64>)> {
        let kind = cfg
            .model
            .clone()
            .ok_or_else(|| Error::config("model", "missing"))?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seeds.data);
        rng.set_stream(STREAM_INIT);
        let model = Model::initialized(kind, nf, &mut rng)?;
        let theta0 = model.params().to_vec();
        Ok((model, theta0))
    };
    let from_partitions =
        |parts: Vec<DatasetPartition>, test: Option<DatasetPartition>| -> Result<Objectives> {
            let nf = parts[0].n_features();
            let (model, theta0) = model_for(nf)?;
            let per_client = parts
                .into_iter()
                .map(|p| {
                    ModelObjective::new(model.clone(), p, cfg.batch_size, cfg.weight_decay)
                        .map(|o| Box::new(o) as Box<dyn LocalObjective>)
                })
                .collect::<Result<Vec<_>>>()?;
            let test = match test {
                Some(t) if !t.is_empty() => Some(ModelObjective::new(
                    model,
                    t,
                    cfg.batch_size,
                    cfg.weight_decay,
                )?),
                _ => None,
            };
            Ok(Objectives {
                per_client,
                theta0,
                test,
            })
        };
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            task,
            n_features,
            samples_per_client,
            test_samples,
            noise,
            split,
        } => {
            let spec = SyntheticSpec {
                task: *task,
                n_features: *n_features,
                clients: n,
                samples_per_client: *samples_per_client,
                test_samples: *test_samples,
                noise: *noise,
                split: *split,
            };
            let data = make_synthetic(&spec, cfg.seeds.data)?;
            from_partitions(data.partitions, Some(data.test))
        }
        DatasetSpec::Csv {
            path,
            label_column,
            feature_columns,
            test_path,
        } => {
            let schema = CsvSchema {
                label_column: label_column.clone(),
                feature_columns: feature_columns.clone(),
            };
            let parts = load_csv(path, &schema)?.split(n)?;
            let test = test_path
                .as_ref()
                .map(|p| load_csv(p, &schema))
                .transpose()?;
            from_partitions(parts, test)
        }
        DatasetSpec::Quadratic {
            curvature,
            optimum,
            sigma,
            theta0,
        } => {
            let q =
                NoisyQuadratic::new(curvature.clone(), optimum.clone(), *sigma, cfg.batch_size)?;
            Ok(Objectives {
                per_client: (0..n)
                    .map(|_| Box::new(q.clone()) as Box<dyn LocalObjective>)
                    .collect(),
                theta0: theta0.clone(),
                test: None,
            })
        }
        DatasetSpec::GaussianGradients { dim, sigma } => Ok(Objectives {
            per_client: (0..n)
                .map(|_| {
                    Box::new(GaussianGradient {
                        dim: *dim,
                        sigma: *sigma,
                    }) as Box<dyn LocalObjective>
                })
                .collect(),
            theta0: vec![0.0; *dim],
            test: None,
        }),
    }
}

pub struct Simulation {
    config: RunConfig,
    params: LweParams,
    bucketing: Bucketing,
    matrices: Vec<PublicMatrix>,
    seed_id: u64,
    sigma_e: f64,
    clients: Vec<ClientState>,
    server: ServerState,
    transport: Transport,
    test: Option<ModelObjective>,
    round: u32,
    history: Vec<RoundMetrics>,
    clip_initial: f64,
    param_warnings: Vec<String>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("mode", &self.config.mode)
            .field("round", &self.round)
            .field("clients", &self.clients.len())
            .finish_non_exhaustive()
    }
}

impl Simulation {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let params = config.lwe_params()?;
        let objectives = build_objectives(&config)?;
        let d = objectives.theta0.len();
        let bucketing = Bucketing::new(d, params.m())?;
        let seed = Seed::from_u64(config.seeds.matrix);
        let matrices = if config.mode.encrypted() {
            (0..bucketing.num_buckets() as u64)
                .map(|j| expand_bucket_matrix(&seed, &params, j))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let clip_initial = match config.clip_schedule {
            ClipSchedule::OverflowBound { sigma_g } => min_clip_threshold_quantized(
                config.clients,
                sigma_g,
                config.delta_overflow,
                config.b,
            )
            .map_err(|e| Error::config("clip_schedule", e.to_string()))?,
            _ => config.c0,
        };
        let clients = objectives
            .per_client
            .into_iter()
            .enumerate()
            .map(|(i, obj)| {
                ClientState::new(
                    i as u32,
                    objectives.theta0.clone(),
                    obj,
                    config.seeds.client_rng[i],
                    config.seeds.client_dither[i],
                    clip_initial,
                    config.momentum,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let param_warnings = if config.check_security {
            params
                .validate(true)
                .iter()
                .map(ToString::to_string)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            sigma_e: config.baseline_error.sigma(params.gamma_step()),
            server: ServerState::new(seed.id(), config.clients),
            seed_id: seed.id(),
            config,
            params,
            bucketing,
            matrices,
            clients,
            transport: Transport::new(),
            test: objectives.test,
            round: 0,
            history: Vec::new(),
            clip_initial,
            param_warnings,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn params(&self) -> &LweParams {
        &self.params
    }

    pub fn bucketing(&self) -> Bucketing {
        self.bucketing
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// The shared model (client 0's copy; all copies are checked equal).
    pub fn theta(&self) -> &[f64] {
        self.clients[0].theta()
    }

    pub fn client_thetas(&self) -> impl Iterator<Item = &[f64]> {
        self.clients.iter().map(ClientState::theta)
    }

    pub fn clip(&self) -> f64 {
        self.clients[0].clip()
    }

    pub fn history(&self) -> &[RoundMetrics] {
        &self.history
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn wire_context(&self) -> WireContext {
        WireContext {
            m: self.params.m(),
            q: self.params.q(),
            b: self.params.b(),
            n_clients: self.config.clients,
        }
    }

    /// `F(θ) = (1/N) Σ F_i(θ)` and `‖∇F(θ)‖²` at the current model.
    pub fn evaluate(&self) -> Evaluation {
        let theta = self.theta();
        let n = self.clients.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        let mut hits = 0.0;
        let mut has_acc = true;
        for c in &self.clients {
            let obj = c.objective();
            loss += obj.loss(theta);
            for (g, x) in grad.iter_mut().zip(obj.full_gradient(theta)) {
                *g += x;
            }
            match obj.accuracy(theta) {
                Some(a) => hits += a,
                None => has_acc = false,
            }
        }
        Evaluation {
            loss: loss / n,
            grad_norm_sq: grad.iter().map(|g| (g / n) * (g / n)).sum(),
            train_accuracy: has_acc.then_some(hits / n),
            test_accuracy: self.test.as_ref().and_then(|t| t.accuracy(theta)),
        }
    }

    fn key_agreement(&mut self) -> Result<u64> {
        let n_clients = self.clients.len();
        let (n, q, round) = (self.params.n(), self.params.q(), self.round);
        let before = self.transport.tally(MessageKind::KeyShare).bytes;
        let mut partial = vec![SecretKey::zero(n); n_clients];
        for (i, client) in self.clients.iter_mut().enumerate() {
            for share in client.fresh_key_shares(&self.params, n_clients)? {
                if share.to_client as usize == i {
                    partial[i] = partial[i].add(&share.share, q)?;
                } else {
                    self.transport.send(Envelope {
                        kind: MessageKind::KeyShare,
                        from: Endpoint::Client(i as u32),
                        to: Endpoint::Client(share.to_client),
                        round,
                        bytes: encode_share(&share, round, q),
                    });
                }
            }
        }
        for (j, acc) in partial.iter_mut().enumerate() {
            for env in self.transport.receive(Endpoint::Client(j as u32)) {
                let (r, share) = decode_share(&env.bytes, n, q)?;
                if r != round || share.to_client as usize != j {
                    return Err(Error::Protocol(format!(
                        "misrouted key share for client {j}"
                    )));
                }
                *acc = acc.add(&share.share, q)?;
            }
        }
        // Each client publishes its partial sum to the other clients.
        for (j, p) in partial.iter().enumerate() {
            for k in (0..n_clients).filter(|&k| k != j) {
                let msg = KeyShare {
                    from_client: j as u32,
                    to_client: k as u32,
                    share: p.clone(),
                };
                self.transport.send(Envelope {
                    kind: MessageKind::KeyShare,
                    from: Endpoint::Client(j as u32),
                    to: Endpoint::Client(k as u32),
                    round,
                    bytes: encode_share(&msg, round, q),
                });
            }
        }
        for (k, client) in self.clients.iter_mut().enumerate() {
            let mut s_sum = partial[k].clone();
            for env in self.transport.receive(Endpoint::Client(k as u32)) {
                let (_, p) = decode_share(&env.bytes, n, q)?;
                s_sum = s_sum.add(&p.share, q)?;
            }
            client.set_key_sum(s_sum);
        }
        Ok(self.transport.tally(MessageKind::KeyShare).bytes - before)
    }

    fn next_clip(&self, current: f64, agg: &Aggregate) -> f64 {
        match self.config.clip_schedule {
            ClipSchedule::Fixed | ClipSchedule::OverflowBound { .. } => current,
            ClipSchedule::PreviousAggregate { headroom, floor } => {
                let norm = agg.g_total.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                (headroom * norm).max(floor)
            }
        }
    }

    fn count_overflow(&self, traces: &[UploadTrace], agg: &Aggregate) -> u64 {
        let d = self.bucketing.dim();
        let level_sum = || -> Vec<i64> {
            let mut sum = vec![0i64; d];
            for t in traces {
                for (s, k) in sum.iter_mut().zip(t.levels.as_ref().unwrap().as_slice()) {
                    *s += k;
                }
            }
            sum
        };
        match self.config.mode {
            Mode::Vanilla => 0,
            Mode::QuantizedPlain => {
                let truth = level_sum();
                measure_overflow(&wrap_levels(&truth, self.params.b()), &truth) as u64
            }
            Mode::Flag => measure_overflow(agg.levels.as_ref().unwrap(), &level_sum()) as u64,
            Mode::LweBaseline => {
                let gamma = self.params.gamma_step() as i64;
                let mut truth: Vec<i64> = level_sum().iter().map(|s| s * gamma).collect();
                for t in traces {
                    for (x, e) in truth.iter_mut().zip(t.errors.as_ref().unwrap()) {
                        *x += e;
                    }
                }
                measure_overflow(agg.residues.as_ref().unwrap(), &truth) as u64
            }
        }
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let eval = self.evaluate();
        let round = self.round;
        let key_share_bytes = if self.config.mode.encrypted() {
            self.key_agreement()?
        } else {
            0
        };
        let wire = self.wire_context();
        let ctx = RoundContext {
            mode: self.config.mode,
            params: &self.params,
            matrices: &self.matrices,
            bucketing: self.bucketing,
            seed_id: self.seed_id,
            sigma_e: self.sigma_e,
            round,
        };

        let mut traces = Vec::with_capacity(self.clients.len());
        let mut upload_lens = Vec::with_capacity(self.clients.len());
        let mut payload_bits = 0;
        for client in &mut self.clients {
            let (msg, trace) = client.upload(&ctx)?;
            payload_bits = payload_bits_of(&msg, &wire);
            let bytes = msg.encode(&wire);
            upload_lens.push(bytes.len() as u64);
            self.transport.send(Envelope {
                kind: MessageKind::Upload,
                from: Endpoint::Client(client.id()),
                to: Endpoint::Server,
                round,
                bytes,
            });
            traces.push(trace);
        }
        if upload_lens.iter().any(|&l| l != upload_lens[0]) {
            return Err(Error::Protocol(
                "clients produced uploads of different lengths".into(),
            ));
        }

        let uploads = self
            .transport
            .receive(Endpoint::Server)
            .into_iter()
            .map(|env| UploadMessage::decode(&env.bytes, &wire))
            .collect::<Result<Vec<_>>>()?;
        let broadcast = self.server.aggregate(uploads)?;
        let bc_bytes = broadcast.encode(&wire);
        let broadcast_len = bc_bytes.len() as u64;
        self.transport.send(Envelope {
            kind: MessageKind::Broadcast,
            from: Endpoint::Server,
            to: Endpoint::AllClients,
            round,
            bytes: bc_bytes,
        });

        let delivered = self.transport.receive(Endpoint::AllClients);
        let [env] = delivered.as_slice() else {
            return Err(Error::Protocol(format!(
                "expected one broadcast, got {}",
                delivered.len()
            )));
        };
        let bc = BroadcastMessage::decode(&env.bytes, &wire)?;
        let clip_used = bc.clip;
        let mut reference: Option<Aggregate> = None;
        for (i, client) in self.clients.iter_mut().enumerate() {
            let agg = if i == 0 || self.config.decrypt_all_clients {
                client.decode_broadcast(&bc, &ctx)?
            } else {
                reference.clone().unwrap()
            };
            if let Some(r) = &reference {
                if r.g_total
                    .iter()
                    .zip(&agg.g_total)
                    .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Err(Error::Protocol(format!(
                        "client {i} decoded a different aggregate"
                    )));
                }
            }
            client.apply_update(&agg, self.config.eta, self.config.clients)?;
            if reference.is_none() {
                reference = Some(agg);
            }
        }
        let agg = reference.expect("at least two clients");
        let overflow_count = self.count_overflow(&traces, &agg);
        let next = self.next_clip(clip_used, &agg);
        for c in &mut self.clients {
            c.set_clip(next);
        }
        let theta0 = self.clients[0].theta();
        for c in &self.clients[1..] {
            if c.theta()
                .iter()
                .zip(theta0)
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(Error::Protocol(format!("client {} model diverged", c.id())));
            }
        }
        self.round += 1;
        let metrics = RoundMetrics {
            round,
            loss: eval.loss,
            grad_norm_sq: eval.grad_norm_sq,
            upload_bytes: upload_lens[0],
            upload_payload_bits: payload_bits,
            broadcast_bytes: broadcast_len,
            key_share_bytes,
            overflow_count,
            clip: clip_used,
            accuracy: eval.test_accuracy.or(eval.train_accuracy),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs the remaining rounds up to `T`.
    pub fn run(&mut self) -> Result<RunSummary> {
        while self.round < self.config.rounds {
            self.run_round()?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        let eval = self.evaluate();
        let d = self.bucketing.dim();
        let b = self.params.b();
        let rounds = self.history.len() as u64;
        let n = self.config.clients as u64;
        let per_client = self.history.first().map_or(0, |m| m.upload_bytes);
        let payload_bits = self.history.first().map_or(0, |m| m.upload_payload_bits);
        let overflow_total: u64 = self.history.iter().map(|m| m.overflow_count).sum();
        RunSummary {
            mode: self.config.mode,
            rounds: self.round,
            clients: self.config.clients,
            dim: d,
            num_buckets: self.bucketing.num_buckets(),
            final_loss: eval.loss,
            final_grad_norm_sq: eval.grad_norm_sq,
            final_train_accuracy: eval.train_accuracy,
            final_test_accuracy: eval.test_accuracy,
            mean_grad_norm_sq: self.history.iter().map(|m| m.grad_norm_sq).sum::<f64>()
                / rounds.max(1) as f64,
            total_upload_bytes: self.history.iter().map(|m| m.upload_bytes * n).sum(),
            total_broadcast_bytes: self.history.iter().map(|m| m.broadcast_bytes).sum(),
            total_key_share_bytes: self.history.iter().map(|m| m.key_share_bytes).sum(),
            upload_bytes_per_client_round: per_client,
            upload_payload_bits_per_client_round: payload_bits,
            tau_measured: tau_measured(self.params.q(), b),
            tau_payload: payload_bits as f64 / (d as f64 * f64::from(b)),
            tau_formula: comm_factor(b, self.params.m()).unwrap_or(f64::NAN),
            tau_table: table_factor(b),
            overflow_total,
            overflow_fraction: overflow_total as f64 / (rounds.max(1) * d as u64) as f64,
            clip_initial: self.clip_initial,
            clip_final: self.clip(),
            param_warnings: self.param_warnings.clone(),
            wall_time_s: self.history.iter().map(|m| m.wall_time_s).sum(),
        }
    }

    /// Writes `metrics.csv`, `summary.json` and `resolved-config.json`.
    pub fn write_outputs(&self, summary: &RunSummary, dir: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let metrics_path = dir.join("metrics.csv");
        let file = std::fs::File::create(&metrics_path).map_err(io(&metrics_path))?;
        write_metrics_csv(&self.history, std::io::BufWriter::new(file))?;
        let summary_path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(summary).expect("summary serializes");
        std::fs::write(&summary_path, text + "\n").map_err(io(&summary_path))?;
        let config_path = dir.join("resolved-config.json");
        std::fs::write(&config_path, self.config.to_json() + "\n").map_err(io(&config_path))?;
        Ok(())
    }
}

fn payload_bits_of(msg: &UploadMessage, wire: &WireContext) -> u64 {
    let width = |w: u32| u64::from(w);
    match &msg.payload {
        Payload::Ciphertexts(cts) => {
            cts.iter().map(|c| c.len() as u64).sum::<u64>()
                * width(crate::lwe::residue_bits(wire.q))
        }
        Payload::Levels(k) => k.len() as u64 * width(wire.upload_level_bits()),
        Payload::Reals(v) => 64 * v.len() as u64,
    }
}
