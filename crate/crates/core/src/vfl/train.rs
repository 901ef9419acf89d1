use std::io::{self, Write};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::{sample_minibatch, Mode, VerticalDataset, VflConfig, VflError};
use crate::metrics::{CommLedger, LedgerParams, Upstream};
use crate::nn::{
    argmax_rows, backward_party, backward_server, forward_party, forward_server, sgd_step, DenseNet, ForwardCache,
    Tensor2,
};
use crate::pbm::{estimate_sum, quantize};
use crate::privacy::{feature_budget, sample_budget};
use crate::secureagg::{
    aggregate_round, mask, pack_shares, ChannelSender, CommChannel, Coord, PairwiseSeed, SeedBook, ShareBatch,
};

/// Trace CSV columns, in order.
pub const TRACE_HEADER: &str =
    "iter,epoch,loss,train_acc,test_acc,up_bits,down_bits,cum_bits,eps_feat_alpha2,eps_sample_alpha2";

struct Party {
    id: usize,
    net: DenseNet,
    rng: ChaCha20Rng,
    seeds: Vec<PairwiseSeed>,
    sender: ChannelSender,
}

/// What the server aggregated in the most recent iteration. `q_plain` and
/// `h_exact` are simulator-side ground truth the server never sees.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub h_tilde: Tensor2,
    pub h_exact: Tensor2,
    pub q_hat: Option<Vec<u64>>,
    pub q_plain: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub loss: f64,
    pub up_bits: u64,
    pub down_bits: u64,
    pub batch: Vec<usize>,
}

/// Parties, server and channel of one training run.
pub struct Trainer {
    config: VflConfig,
    train: VerticalDataset,
    parties: Vec<Party>,
    server: DenseNet,
    channel: CommChannel,
    ledger: CommLedger,
    last: Option<Aggregate>,
}

/// Wall clock for trace rows; reads zero where the platform has no clock.
struct Stopwatch {
    #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed(&self) -> Duration {
        #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
        return self.start.elapsed();
        #[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
        Duration::ZERO
    }
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(config: VflConfig, train: VerticalDataset) -> Result<Self, VflError> {
        config.validate(train.n())?;
        if train.parties() != config.m {
            return Err(VflError::Config(format!(
                "{} parties configured but the dataset has {} feature blocks",
                config.m,
                train.parties()
            )));
        }
        let mut server_rng = seeded_stream(config.seeds.model, 0);
        let server = DenseNet::server(config.p_dim, train.classes(), &mut server_rng);
        let mut dealer = seeded_stream(config.seeds.mechanism, 0);
        let book = SeedBook::deal(config.m, &mut dealer);
        let channel = CommChannel::new();
        let parties = (0..config.m)
            .map(|id| {
                let mut init = seeded_stream(config.seeds.model, id as u64 + 1);
                Party {
                    id,
                    net: DenseNet::party(train.block(id).cols(), config.hidden, config.p_dim, &mut init),
                    rng: seeded_stream(config.seeds.mechanism, id as u64 + 1),
                    seeds: book.for_party(id),
                    sender: channel.sender(),
                }
            })
            .collect();
        let upstream = match config.mode {
            Mode::Pbm => Upstream::Masked { b: config.pbm.b },
            Mode::Npq | Mode::Ldp => Upstream::Float,
        };
        let ledger = CommLedger::new(LedgerParams {
            batch: config.batch,
            m: config.m,
            p_dim: config.p_dim,
            f_bits: config.f_bits,
            upstream,
        });
        Ok(Self {
            config,
            train,
            parties,
            server,
            channel,
            ledger,
            last: None,
        })
    }

    pub fn config(&self) -> &VflConfig {
        &self.config
    }

    pub fn server_net(&self) -> &DenseNet {
        &self.server
    }

    pub fn party_net(&self, party: usize) -> &DenseNet {
        &self.parties[party].net
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn last_aggregate(&self) -> Option<&Aggregate> {
        self.last.as_ref()
    }

    /// One iteration of minibatch agreement, embedding, aggregation,
    /// server update and party updates.
    pub fn step(&mut self, t: usize) -> Result<StepRecord, VflError> {
        let cfg = self.config.clone();
        let batch = sample_minibatch(cfg.seeds.minibatch, t, self.train.n(), cfg.batch)?;
        let labels: Vec<usize> = batch.iter().map(|&i| self.train.labels()[i]).collect();

        let mut caches: Vec<ForwardCache> = Vec::with_capacity(cfg.m);
        let mut embeddings: Vec<Tensor2> = Vec::with_capacity(cfg.m);
        for party in &self.parties {
            let x = self.train.block(party.id).select_rows(&batch);
            let (h, cache) = forward_party(&party.net, &x)?;
            embeddings.push(h);
            caches.push(cache);
        }
        let mut h_exact = Tensor2::zeros(cfg.batch, cfg.p_dim);
        for h in &embeddings {
            h_exact.add_assign(h)?;
        }

        let aggregate = match cfg.mode {
            Mode::Pbm => self.secure_sum(t, &batch, &embeddings, h_exact)?,
            Mode::Npq => {
                self.charge_float_upload();
                Aggregate {
                    h_tilde: h_exact.clone(),
                    h_exact,
                    q_hat: None,
                    q_plain: None,
                }
            }
            Mode::Ldp => {
                let sigma = cfg.ldp_noise_std();
                let mut h_tilde = Tensor2::zeros(cfg.batch, cfg.p_dim);
                for (party, h) in self.parties.iter_mut().zip(&embeddings) {
                    let mut noisy = h.clone();
                    for v in noisy.data_mut() {
                        *v += sigma * party.rng.sample::<f64, _>(StandardNormal);
                    }
                    h_tilde.add_assign(&noisy)?;
                }
                self.charge_float_upload();
                Aggregate {
                    h_tilde,
                    h_exact,
                    q_hat: None,
                    q_plain: None,
                }
            }
        };

        let pass = forward_server(&self.server, &aggregate.h_tilde, &labels)?;
        let (grad_server, grad_h) = backward_server(&self.server, &pass, &labels)?;
        let per_party_down = (cfg.batch * cfg.p_dim) as u64 * cfg.f_bits;
        for _ in 0..cfg.m {
            self.ledger.charge_down(per_party_down);
        }
        sgd_step(&mut self.server, &grad_server, cfg.eta)?;
        for (party, cache) in self.parties.iter_mut().zip(&caches) {
            let grads = backward_party(&party.net, cache, &grad_h)?;
            sgd_step(&mut party.net, &grads, cfg.eta)?;
        }
        let bits = self.ledger.close_iteration()?;
        self.last = Some(aggregate);
        Ok(StepRecord {
            iter: t,
            loss: pass.loss,
            up_bits: bits.up,
            down_bits: bits.down,
            batch,
        })
    }

    fn charge_float_upload(&mut self) {
        let per_party = (self.config.batch * self.config.p_dim) as u64 * self.config.f_bits;
        for _ in 0..self.config.m {
            self.ledger.charge_up(per_party);
        }
    }

    fn secure_sum(
        &mut self,
        t: usize,
        batch: &[usize],
        embeddings: &[Tensor2],
        h_exact: Tensor2,
    ) -> Result<Aggregate, VflError> {
        let cfg = &self.config;
        let (m, b, p_dim) = (cfg.m, cfg.pbm.b, cfg.p_dim);
        let round = t as u32;
        let coords: Vec<Coord> = batch
            .iter()
            .flat_map(|&i| {
                (0..p_dim).map(move |j| Coord {
                    sample: i as u32,
                    dim: j as u16,
                })
            })
            .collect();
        let mut q_plain = vec![0u64; coords.len()];
        for (party, h) in self.parties.iter_mut().zip(embeddings) {
            let mut ys = Vec::with_capacity(coords.len());
            for (k, (&x, &coord)) in h.data().iter().zip(&coords).enumerate() {
                let q = quantize(x, &cfg.pbm, &mut party.rng)?;
                q_plain[k] += u64::from(q.get());
                ys.push(mask(q, party.id, &party.seeds, m, round, coord, b)?.y);
            }
            let payload = pack_shares(&ys, m, b)?;
            party.sender.send(ShareBatch {
                party: party.id,
                round,
                coords: coords.clone(),
                payload,
            })?;
        }
        self.ledger.charge_up(self.channel.take_bits());
        let batches = self.channel.drain();
        let q_hat = aggregate_round(&batches, m, b)?;
        let values = q_hat
            .iter()
            .map(|&q| estimate_sum(q, m, &cfg.pbm).map(|s| s.value))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Aggregate {
            h_tilde: Tensor2::from_vec(batch.len(), p_dim, values)?,
            h_exact,
            q_hat: Some(q_hat),
            q_plain: Some(q_plain),
        })
    }

    /// Noiseless predictions of the composed model.
    pub fn predict(&self, data: &VerticalDataset) -> Result<Vec<usize>, VflError> {
        if data.n() == 0 {
            return Ok(Vec::new());
        }
        let mut h = Tensor2::zeros(data.n(), self.config.p_dim);
        for party in &self.parties {
            let (e, _) = forward_party(&party.net, data.block(party.id))?;
            h.add_assign(&e)?;
        }
        let (logits, _) = self.server.forward(&h)?;
        Ok(argmax_rows(&logits))
    }

    /// Noiseless accuracy; the mechanism is bypassed for evaluation.
    pub fn accuracy(&self, data: &VerticalDataset) -> Result<f64, VflError> {
        if data.n() == 0 {
            return Ok(f64::NAN);
        }
        let pred = self.predict(data)?;
        let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / data.n() as f64)
    }

    pub fn train_data(&self) -> &VerticalDataset {
        &self.train
    }

    fn budgets(&self, iters_done: usize) -> Result<(Option<f64>, Option<f64>), VflError> {
        let cfg = &self.config;
        if cfg.mode == Mode::Npq {
            return Ok((Some(f64::INFINITY), (cfg.m >= 2).then_some(f64::INFINITY)));
        }
        let n = self.train.n();
        let feat = feature_budget(2.0, iters_done, cfg.batch, cfg.p_dim, cfg.pbm.b, cfg.pbm.beta, cfg.m, n)?.eps;
        let sample = if cfg.m >= 2 {
            let per_release = sample_budget(2.0, cfg.p_dim, cfg.pbm.b, cfg.pbm.beta, cfg.m)?.eps;
            Some(iters_done as f64 * cfg.batch as f64 / n as f64 * per_release)
        } else {
            None
        };
        Ok((Some(feat), sample))
    }

    /// Runs all configured iterations, evaluating on the configured cadence
    /// and always after the last iteration.
    pub fn run(&mut self, test: Option<&VerticalDataset>) -> Result<TrainTrace, VflError> {
        let iters = self.config.iters;
        let every = self.config.eval_every;
        let n = self.train.n();
        let mut rows = Vec::with_capacity(iters);
        let started = Stopwatch::start();
        for t in 0..iters {
            let rec = self.step(t)?;
            let evaluate = t + 1 == iters || (every > 0 && (t + 1) % every == 0);
            let (train_acc, test_acc) = if evaluate {
                let train_acc = self.accuracy(&self.train)?;
                let test_acc = test.map(|d| self.accuracy(d)).transpose()?;
                (Some(train_acc), test_acc)
            } else {
                (None, None)
            };
            let (eps_feat, eps_sample) = self.budgets(t + 1)?;
            rows.push(TraceRow {
                iter: t,
                epoch: (t + 1) as f64 * self.config.batch as f64 / n as f64,
                loss: rec.loss,
                train_acc,
                test_acc,
                up_bits: rec.up_bits,
                down_bits: rec.down_bits,
                cum_bits: self.ledger.total_bits(),
                eps_feat_alpha2: eps_feat,
                eps_sample_alpha2: eps_sample,
                elapsed: started.elapsed(),
            });
        }
        Ok(TrainTrace { rows })
    }
}

/// Builds the parties and server from `config` and trains for `config.iters` iterations.
pub fn run_experiment(
    config: VflConfig,
    train: VerticalDataset,
    test: Option<&VerticalDataset>,
) -> Result<TrainTrace, VflError> {
    Trainer::new(config, train)?.run(test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub epoch: f64,
    pub loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub up_bits: u64,
    pub down_bits: u64,
    pub cum_bits: u64,
    pub eps_feat_alpha2: Option<f64>,
    pub eps_sample_alpha2: Option<f64>,
    /// Wall clock since the run started; not part of the CSV.
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainTrace {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn final_train_acc(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.train_acc)
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.test_acc)
    }

    pub fn total_bits(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cum_bits)
    }

    /// First iteration count (1-based) at which the evaluated train accuracy reaches `target`.
    pub fn iters_to_train_acc(&self, target: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.train_acc.is_some_and(|a| a >= target))
            .map(|r| r.iter + 1)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.epoch,
                r.loss,
                opt(r.train_acc),
                opt(r.test_acc),
                r.up_bits,
                r.down_bits,
                r.cum_bits,
                opt(r.eps_feat_alpha2),
                opt(r.eps_sample_alpha2),
            )?;
        }
        Ok(())
    }
}
