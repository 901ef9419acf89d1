//! Oracles shared by the integration and acceptance tests. The reference
//! values (finite differences, the monolithic SGD model) are computed without
//! the library's backward passes or training loop.

#![allow(dead_code)]

use pbm_vfl::nn::{backward_party, backward_server, forward_party, forward_server, DenseNet, Layer, Tensor2};
use pbm_vfl::pbm::PbmParams;
use pbm_vfl::vfl::{
    contiguous_blocks, generate_synthetic, sample_minibatch, Mode, SyntheticSpec, VerticalDataset, VflConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn synthetic(n: usize, features: usize, m: usize, separation: f64, seed: u64) -> VerticalDataset {
    let spec = SyntheticSpec {
        n,
        features,
        classes: 2,
        separation,
        noise: 1.0,
    };
    let (x, y) = generate_synthetic(&spec, seed).unwrap();
    VerticalDataset::from_columns(&x, y, 2, contiguous_blocks(features, m)).unwrap()
}

#[allow(clippy::too_many_arguments)]
pub fn config(
    m: usize,
    p_dim: usize,
    batch: usize,
    iters: usize,
    eta: f64,
    b: u32,
    beta: f64,
    mode: Mode,
) -> VflConfig {
    VflConfig::new(m, p_dim, batch, iters, eta, PbmParams::new(b, beta, 1.0).unwrap(), mode)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor2 {
    Tensor2::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn central_difference(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative errors of analytic vs central-difference gradients on one random
/// split model: `(server params, embedding sum, every party's params)`.
pub fn gradient_errors(seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=3);
    let p_dim = rng.random_range(1..=4);
    let classes = rng.random_range(2..=4);
    let batch = rng.random_range(1..=5);
    let hidden = rng.random_range(0..=3);
    let dims: Vec<usize> = (0..m).map(|_| rng.random_range(1..=4)).collect();
    let parties: Vec<DenseNet> = dims
        .iter()
        .map(|&d| DenseNet::party(d, hidden, p_dim, &mut rng))
        .collect();
    let server = DenseNet::server(p_dim, classes, &mut rng);
    let xs: Vec<Tensor2> = dims.iter().map(|&d| random_tensor(batch, d, 2.0, &mut rng)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

    let embed_sum = |nets: &[DenseNet]| {
        let mut h = Tensor2::zeros(batch, p_dim);
        for (net, x) in nets.iter().zip(&xs) {
            h.add_assign(&forward_party(net, x).unwrap().0).unwrap();
        }
        h
    };
    let h = embed_sum(&parties);
    let pass = forward_server(&server, &h, &labels).unwrap();
    let (g_server, g_h) = backward_server(&server, &pass, &labels).unwrap();

    let fd_server = central_difference(&server.flat_params(), |p| {
        let mut net = server.clone();
        net.set_flat_params(p).unwrap();
        forward_server(&net, &h, &labels).unwrap().loss
    });
    let server_err = rel_err(&g_server.flatten(), &fd_server);

    let fd_h = central_difference(h.data(), |p| {
        let hp = Tensor2::from_vec(batch, p_dim, p.to_vec()).unwrap();
        forward_server(&server, &hp, &labels).unwrap().loss
    });
    let h_err = rel_err(g_h.data(), &fd_h);

    let mut party_err: f64 = 0.0;
    for k in 0..m {
        let (_, cache) = forward_party(&parties[k], &xs[k]).unwrap();
        let analytic = backward_party(&parties[k], &cache, &g_h).unwrap().flatten();
        let fd = central_difference(&parties[k].flat_params(), |p| {
            let mut nets = parties.clone();
            nets[k].set_flat_params(p).unwrap();
            forward_server(&server, &embed_sum(&nets), &labels).unwrap().loss
        });
        party_err = party_err.max(rel_err(&analytic, &fd));
    }
    (server_err, h_err, party_err)
}

/// Plain-loop dense layer: row-major `in × out` weights.
#[derive(Clone)]
struct Dense {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
    n_out: usize,
    tanh: bool,
}

impl Dense {
    fn from_layer(l: &Layer) -> Self {
        Self {
            w: l.weight.data().to_vec(),
            b: l.bias.clone(),
            n_in: l.weight.rows(),
            n_out: l.weight.cols(),
            tanh: matches!(l.activation, pbm_vfl::nn::Activation::Tanh),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|j| {
                let z = self.b[j] + (0..self.n_in).map(|i| x[i] * self.w[i * self.n_out + j]).sum::<f64>();
                if self.tanh {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect()
    }
}

/// The composed model `h0(Σ_m h_m(x_m))` as one network, trained by
/// ordinary minibatch SGD on the full feature vector.
pub struct Monolithic {
    parties: Vec<Vec<Dense>>,
    server: Dense,
}

impl Monolithic {
    pub fn from_nets(parties: &[&DenseNet], server: &DenseNet) -> Self {
        Self {
            parties: parties
                .iter()
                .map(|n| n.layers().iter().map(Dense::from_layer).collect())
                .collect(),
            server: Dense::from_layer(&server.layers()[0]),
        }
    }

    fn logits(&self, xs: &[&[f64]]) -> Vec<f64> {
        let p_dim = self.server.n_in;
        let mut h = vec![0.0; p_dim];
        for (layers, x) in self.parties.iter().zip(xs) {
            let mut a = x.to_vec();
            for l in layers {
                a = l.apply(&a);
            }
            for (s, v) in h.iter_mut().zip(&a) {
                *s += v;
            }
        }
        self.server.apply(&h)
    }

    pub fn predict(&self, data: &VerticalDataset, i: usize) -> usize {
        let rows: Vec<&[f64]> = (0..data.parties()).map(|m| data.block(m).row(i)).collect();
        let z = self.logits(&rows);
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }

    pub fn accuracy(&self, data: &VerticalDataset) -> f64 {
        let hits = (0..data.n())
            .filter(|&i| self.predict(data, i) == data.labels()[i])
            .count();
        hits as f64 / data.n() as f64
    }

    /// One SGD step on the mean cross-entropy over `batch`; returns the
    /// loss before the update.
    pub fn step(&mut self, data: &VerticalDataset, batch: &[usize], eta: f64) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        let mut g_parties: Vec<Vec<(Vec<f64>, Vec<f64>)>> = self
            .parties
            .iter()
            .map(|ls| {
                ls.iter()
                    .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                    .collect()
            })
            .collect();
        let mut g_sw = vec![0.0; self.server.w.len()];
        let mut g_sb = vec![0.0; self.server.b.len()];
        let mut loss = 0.0;
        let (p_dim, classes) = (self.server.n_in, self.server.n_out);
        for &i in batch {
            // forward, keeping every activation
            let mut acts: Vec<Vec<Vec<f64>>> = Vec::new();
            let mut h = vec![0.0; p_dim];
            for (m, layers) in self.parties.iter().enumerate() {
                let mut a = vec![data.block(m).row(i).to_vec()];
                for l in layers {
                    let next = l.apply(a.last().unwrap());
                    a.push(next);
                }
                for (s, v) in h.iter_mut().zip(a.last().unwrap()) {
                    *s += v;
                }
                acts.push(a);
            }
            let z = self.server.apply(&h);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let y = data.labels()[i];
            loss += (max + denom.ln() - z[y]) * scale;
            let dz: Vec<f64> = (0..classes)
                .map(|k| ((z[k] - max).exp() / denom - if k == y { 1.0 } else { 0.0 }) * scale)
                .collect();
            let mut dh = vec![0.0; p_dim];
            for a in 0..p_dim {
                for k in 0..classes {
                    g_sw[a * classes + k] += h[a] * dz[k];
                    dh[a] += self.server.w[a * classes + k] * dz[k];
                }
            }
            for k in 0..classes {
                g_sb[k] += dz[k];
            }
            for (m, layers) in self.parties.iter().enumerate() {
                let mut delta = dh.clone();
                for li in (0..layers.len()).rev() {
                    let l = &layers[li];
                    let out = &acts[m][li + 1];
                    let inp = &acts[m][li];
                    let dpre: Vec<f64> = (0..l.n_out)
                        .map(|j| {
                            if l.tanh {
                                delta[j] * (1.0 - out[j] * out[j])
                            } else {
                                delta[j]
                            }
                        })
                        .collect();
                    let (gw, gb) = &mut g_parties[m][li];
                    for r in 0..l.n_in {
                        for j in 0..l.n_out {
                            gw[r * l.n_out + j] += inp[r] * dpre[j];
                        }
                    }
                    for j in 0..l.n_out {
                        gb[j] += dpre[j];
                    }
                    delta = (0..l.n_in)
                        .map(|r| (0..l.n_out).map(|j| l.w[r * l.n_out + j] * dpre[j]).sum())
                        .collect();
                }
            }
        }
        for (w, g) in self.server.w.iter_mut().zip(&g_sw) {
            *w -= eta * g;
        }
        for (b, g) in self.server.b.iter_mut().zip(&g_sb) {
            *b -= eta * g;
        }
        for (layers, grads) in self.parties.iter_mut().zip(&g_parties) {
            for (l, (gw, gb)) in layers.iter_mut().zip(grads) {
                for (w, g) in l.w.iter_mut().zip(gw) {
                    *w -= eta * g;
                }
                for (b, g) in l.b.iter_mut().zip(gb) {
                    *b -= eta * g;
                }
            }
        }
        loss
    }
}

/// Loss trajectory of centralized SGD from the same initial parameters and
/// minibatches as a trainer built from `cfg`.
pub fn monolithic_losses(cfg: &VflConfig, data: &VerticalDataset) -> (Vec<f64>, Monolithic) {
    let trainer = pbm_vfl::vfl::Trainer::new(cfg.clone(), data.clone()).unwrap();
    let parties: Vec<&DenseNet> = (0..cfg.m).map(|k| trainer.party_net(k)).collect();
    let mut model = Monolithic::from_nets(&parties, trainer.server_net());
    let losses = (0..cfg.iters)
        .map(|t| {
            let batch = sample_minibatch(cfg.seeds.minibatch, t, data.n(), cfg.batch).unwrap();
            model.step(data, &batch, cfg.eta)
        })
        .collect();
    (losses, model)
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
