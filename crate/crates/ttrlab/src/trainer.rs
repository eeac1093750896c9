//! Deterministic minibatch SGD for full fine-tuning and adapter fine-tuning,
//! with parameter-trajectory capture and the training-time robustness
//! metrics: the parameter-space divergence of clean vs poisoned runs, and
//! the kernel-based proxy over clean/poisoned input pairs.
//!
//! Plain SGD, no momentum or weight decay. Batches come from a seeded
//! shuffle that reshuffles whenever fewer than a full batch remains, so a
//! `(net, data, config)` triple always produces bit-identical trajectories.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::LabeledDataset;
use crate::kernels;
use crate::linalg::{self, Matrix};
use crate::network::{loss_grad_output, loss_value, Loss, Network, Target};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss: Loss,
    /// Snapshot cadence; 0 disables intermediate snapshots. Step 0 and the
    /// final step are always captured.
    pub snapshot_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            steps,
            batch_size,
            loss: Loss::CrossEntropy,
            snapshot_every: 0,
            seed,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={n}",
                self.batch_size
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Parameter snapshots along one training run plus the final network.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(step, flattened trainable parameters)`; steps strictly increasing,
    /// step 0 first.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub final_network: Network,
}

impl Trajectory {
    pub fn steps(&self) -> Vec<usize> {
        self.snapshots.iter().map(|(t, _)| *t).collect()
    }

    /// Persist every snapshot as a network blob under `dir`, plus a
    /// `manifest.txt` of `step filename` lines. Snapshot files rebuild the
    /// final network's architecture with that step's trainable parameters.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (step, params) in &self.snapshots {
            let net = self.final_network.unflatten_trainable(params)?;
            let name = format!("snapshot_{step:08}.net");
            std::fs::write(dir.join(&name), net.save_text())?;
            manifest.push_str(&format!("{step} {name}\n"));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Load a trajectory saved by [`save_dir`](Self::save_dir).
    pub fn load_dir(dir: &std::path::Path) -> Result<Trajectory> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut snapshots = Vec::new();
        let mut last: Option<Network> = None;
        for line in manifest.lines() {
            let (step, name) = line
                .split_once(' ')
                .ok_or_else(|| Error::Io(format!("bad manifest line '{line}'")))?;
            let step: usize = step.parse().map_err(|_| Error::Io("bad manifest step".into()))?;
            let net = Network::load_text(&std::fs::read_to_string(dir.join(name))?)?;
            snapshots.push((step, net.flatten_trainable()));
            last = Some(net);
        }
        let final_network = last.ok_or_else(|| Error::Io("empty manifest".into()))?;
        Ok(Trajectory { snapshots, final_network })
    }
}

/// Accumulator mirroring a network's trainable groups.
struct GradBuffers {
    layers: Vec<LayerBuf>,
}

struct LayerBuf {
    w: Option<Matrix>,
    bias: Option<Vec<f64>>,
    a: Option<Matrix>,
    b: Option<Matrix>,
}

impl GradBuffers {
    fn for_net(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|layer| LayerBuf {
                w: layer.train_w.then(|| Matrix::zeros(layer.w.rows(), layer.w.cols())),
                bias: (layer.train_w && layer.bias.is_some())
                    .then(|| vec![0.0; layer.w.rows()]),
                a: layer.adapter.as_ref().and_then(|ad| {
                    ad.train_a.then(|| Matrix::zeros(ad.a.rows(), ad.a.cols()))
                }),
                b: layer.adapter.as_ref().and_then(|ad| {
                    ad.train_b.then(|| Matrix::zeros(ad.b.rows(), ad.b.cols()))
                }),
            })
            .collect();
        GradBuffers { layers }
    }

    fn reset(&mut self) {
        for l in self.layers.iter_mut() {
            if let Some(w) = &mut l.w {
                w.as_mut_slice().fill(0.0);
            }
            if let Some(b) = &mut l.bias {
                b.fill(0.0);
            }
            if let Some(a) = &mut l.a {
                a.as_mut_slice().fill(0.0);
            }
            if let Some(b) = &mut l.b {
                b.as_mut_slice().fill(0.0);
            }
        }
    }
}

/// Minibatch SGD. The input network is cloned; the caller keeps the
/// starting point (shared pretrained bases are reused across runs).
pub fn sgd_train(net: &Network, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Trajectory> {
    if data.is_empty() {
        return Err(Error::Data("training on an empty dataset".into()));
    }
    cfg.validate(data.len())?;
    let mut net = net.clone();
    let mut buffers = GradBuffers::for_net(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // forces a shuffle before the first batch

    let mut snapshots = vec![(0usize, net.flatten_trainable())];
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;

        buffers.reset();
        let inv = 1.0 / cfg.batch_size as f64;
        let mut batch_loss = 0.0;
        for &i in batch {
            let x = &data.inputs[i];
            let target = Target::Class(data.labels[i] as usize);
            let (out, trace) = net.forward(x)?;
            batch_loss += loss_value(&out, &target, cfg.loss)?;
            let mut g = loss_grad_output(&out, &target, cfg.loss)?;
            for gi in g.iter_mut() {
                *gi *= inv;
            }
            let deltas = net.backprop_deltas(&trace, &g)?;
            accumulate(&net, &trace, &deltas, &mut buffers);
        }
        if !batch_loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        apply_update(&mut net, &buffers, cfg.learning_rate);

        let t = step + 1;
        let is_last = t == cfg.steps;
        let on_cadence = cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0;
        if is_last || on_cadence {
            snapshots.push((t, net.flatten_trainable()));
        }
    }
    Ok(Trajectory { snapshots, final_network: net })
}

fn accumulate(
    net: &Network,
    trace: &crate::network::ActivationTrace,
    deltas: &[Vec<f64>],
    buffers: &mut GradBuffers,
) {
    for (l, layer) in net.layers.iter().enumerate() {
        let x = trace.layer_input(l);
        let d = &deltas[l];
        let s = layer.scale;
        let buf = &mut buffers.layers[l];
        if let Some(w) = &mut buf.w {
            for (i, &di) in d.iter().enumerate() {
                let coeff = s * di;
                if coeff == 0.0 {
                    continue;
                }
                let row_start = i * layer.w.cols();
                let row = &mut w.as_mut_slice()[row_start..row_start + layer.w.cols()];
                for (wj, &xj) in row.iter_mut().zip(x) {
                    *wj += coeff * xj;
                }
            }
            if let Some(bias) = &mut buf.bias {
                for (bi, &di) in bias.iter_mut().zip(d) {
                    *bi += di;
                }
            }
        }
        if let Some(ad) = &layer.adapter {
            let mid = trace.lora_mid[l].as_ref().expect("adapter layer traced");
            if let Some(gb) = &mut buf.b {
                let r = ad.b.cols();
                for (i, &di) in d.iter().enumerate() {
                    let coeff = s * ad.scale * di;
                    if coeff == 0.0 {
                        continue;
                    }
                    let row = &mut gb.as_mut_slice()[i * r..(i + 1) * r];
                    for (bj, &mj) in row.iter_mut().zip(mid) {
                        *bj += coeff * mj;
                    }
                }
            }
            if let Some(ga) = &mut buf.a {
                let btd = ad.b.matvec_transposed(d).expect("shapes fixed");
                let cols = ad.a.cols();
                for (i, &bi) in btd.iter().enumerate() {
                    let coeff = s * ad.scale * bi;
                    if coeff == 0.0 {
                        continue;
                    }
                    let row = &mut ga.as_mut_slice()[i * cols..(i + 1) * cols];
                    for (aj, &xj) in row.iter_mut().zip(x) {
                        *aj += coeff * xj;
                    }
                }
            }
        }
    }
}

fn apply_update(net: &mut Network, buffers: &GradBuffers, lr: f64) {
    for (layer, buf) in net.layers.iter_mut().zip(&buffers.layers) {
        if let Some(gw) = &buf.w {
            for (w, &g) in layer.w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= lr * g;
            }
            if let (Some(b), Some(gb)) = (&mut layer.bias, &buf.bias) {
                for (bi, &g) in b.iter_mut().zip(gb) {
                    *bi -= lr * g;
                }
            }
        }
        if let Some(ad) = &mut layer.adapter {
            if let Some(ga) = &buf.a {
                for (a, &g) in ad.a.as_mut_slice().iter_mut().zip(ga.as_slice()) {
                    *a -= lr * g;
                }
            }
            if let Some(gb) = &buf.b {
                for (b, &g) in ad.b.as_mut_slice().iter_mut().zip(gb.as_slice()) {
                    *b -= lr * g;
                }
            }
        }
    }
}

/// Mean dataset loss (used by tests and the sweep runner for trend checks).
pub fn dataset_loss(net: &Network, data: &LabeledDataset, loss: Loss) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("loss over empty dataset".into()));
    }
    let mut acc = 0.0;
    for i in 0..data.len() {
        let (out, _) = net.forward(&data.inputs[i])?;
        acc += loss_value(&out, &Target::Class(data.labels[i] as usize), loss)?;
    }
    Ok(acc / data.len() as f64)
}

/// Training-time robustness in parameter space: the mean over shared
/// snapshot steps of `‖ΔΘ(t) − ΔΘ̃(t)‖₂` with `ΔΘ(t) = Θ(t) − Θ(0)`.
/// Requires aligned snapshot schedules and equal parameter dimensionality
/// (same method and rank).
pub fn ttr_m(clean: &Trajectory, poisoned: &Trajectory) -> Result<f64> {
    if clean.steps() != poisoned.steps() {
        return Err(Error::Dim("trajectories have different snapshot schedules".into()));
    }
    let dim = clean.snapshots[0].1.len();
    if poisoned.snapshots[0].1.len() != dim {
        return Err(Error::Dim("trajectories have different parameter dimensionality".into()));
    }
    let theta0_c = &clean.snapshots[0].1;
    let theta0_p = &poisoned.snapshots[0].1;
    let mut acc = 0.0;
    for ((_, tc), (_, tp)) in clean.snapshots.iter().zip(&poisoned.snapshots) {
        let mut sq = 0.0;
        for i in 0..dim {
            let d = (tc[i] - theta0_c[i]) - (tp[i] - theta0_p[i]);
            sq += d * d;
        }
        acc += sq.sqrt();
    }
    Ok(acc / clean.snapshots.len() as f64)
}

/// Kernel-based robustness proxy: the L2 norm of the mean over pairs of the
/// per-output empirical kernel vector `K(x_clean, x_poisoned)`.
pub fn ttr_m_prime(net: &Network, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs for the kernel robustness proxy".into()));
    }
    let n_out = net.output_dim();
    let mut mean = vec![0.0; n_out];
    for (xc, xp) in pairs {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += kernels::empirical_ntk(net, xc, xp, k)?;
        }
    }
    let inv = 1.0 / pairs.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    Ok(linalg::norm2(&mean))
}
