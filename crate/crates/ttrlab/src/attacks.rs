//! Synthetic binary classification data and the two training-time attacks:
//! untargeted label flipping at a fixed poisoning rate, and trigger-based
//! backdoor injection toward a target class, plus the evaluation metrics
//! including attack success rate.
//!
//! Blobs put the two classes at `±μ·u` for a fixed unit direction `u` whose
//! last coordinate is zero, so the final input coordinate carries no class
//! signal on clean data and is reserved for the backdoor trigger.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::network::Network;
use crate::{Error, Result};

/// Provenance of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Clean,
    Flipped,
    Triggered,
}

impl Flag {
    pub fn name(&self) -> &'static str {
        match self {
            Flag::Clean => "clean",
            Flag::Flipped => "flipped",
            Flag::Triggered => "triggered",
        }
    }

    pub fn parse(s: &str) -> Result<Flag> {
        match s {
            "clean" => Ok(Flag::Clean),
            "flipped" => Ok(Flag::Flipped),
            "triggered" => Ok(Flag::Triggered),
            other => Err(Error::Io(format!("unknown flag '{other}'"))),
        }
    }
}

/// Binary-labeled inputs with per-sample provenance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub flags: Vec<Flag>,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn count_flag(&self, f: Flag) -> usize {
        self.flags.iter().filter(|&&g| g == f).count()
    }

    /// CSV with columns `x_0..x_{d−1},label,flag`; floats at 17 significant
    /// digits so the round trip is exact.
    pub fn to_csv(&self) -> String {
        let d = self.dims();
        let mut s = String::new();
        for j in 0..d {
            s.push_str(&format!("x_{j},"));
        }
        s.push_str("label,flag\n");
        for i in 0..self.len() {
            for v in &self.inputs[i] {
                s.push_str(&format!("{v:.16e},"));
            }
            s.push_str(&format!("{},{}\n", self.labels[i], self.flags[i].name()));
        }
        s
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<LabeledDataset> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Io("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "flag" {
            return Err(Error::Io("csv header must end with label,flag".into()));
        }
        let d = cols.len() - 2;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut flags = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split(',').collect();
            if toks.len() != d + 2 {
                return Err(Error::Io(format!("row {} has {} fields, want {}", ln + 2, toks.len(), d + 2)));
            }
            let x: Vec<f64> = toks[..d]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Io(format!("bad float '{t}': {e}"))))
                .collect::<Result<_>>()?;
            inputs.push(x);
            labels.push(
                toks[d]
                    .parse::<u8>()
                    .map_err(|e| Error::Io(format!("bad label '{}': {e}", toks[d])))?,
            );
            flags.push(Flag::parse(toks[d + 1])?);
        }
        Ok(LabeledDataset { inputs, labels, flags, seed })
    }
}

/// Blob generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub dims: usize,
    /// Class centers sit at `±separation·u`.
    pub separation: f64,
    /// Isotropic per-coordinate standard deviation.
    pub spread: f64,
    pub seed: u64,
}

/// Two Gaussian blobs on the fixed direction `u = (1,…,1,0)/√(d−1)`; class 1
/// on the positive side. Samples alternate class 0 / class 1. The last
/// coordinate is excluded from `u`, so clean data is uninformative there.
pub fn gen_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    if spec.dims < 2 {
        return Err(Error::Config("blobs need dims >= 2".into()));
    }
    let d = spec.dims;
    let mut u = vec![1.0 / ((d - 1) as f64).sqrt(); d];
    u[d - 1] = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = 2 * spec.n_per_class;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.n_per_class {
        for class in [0u8, 1u8] {
            let sign = if class == 1 { 1.0 } else { -1.0 };
            let x: Vec<f64> = u
                .iter()
                .map(|&ui| {
                    let z: f64 = rng.sample(StandardNormal);
                    sign * spec.separation * ui + spec.spread * z
                })
                .collect();
            inputs.push(x);
            labels.push(class);
        }
    }
    Ok(LabeledDataset { inputs, labels, flags: vec![Flag::Clean; n], seed: spec.seed })
}

/// Attack description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Poisoning rate in `[0,1]`; exactly `round(ρ·N)` samples are modified.
    pub rho: f64,
    /// `(coordinate index, trigger value)` for the backdoor.
    pub trigger: Option<(usize, f64)>,
    pub target_label: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Upa,
    Bpa,
    None,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "upa" => Ok(AttackKind::Upa),
            "bpa" => Ok(AttackKind::Bpa),
            "none" | "clean" => Ok(AttackKind::None),
            other => Err(Error::Config(format!("unknown attack kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Upa => "upa",
            AttackKind::Bpa => "bpa",
            AttackKind::None => "none",
        }
    }
}

/// `round(ρ·N)` with half-up rounding — the fixed poison-count contract.
pub fn poison_count(rho: f64, n: usize) -> usize {
    (rho * n as f64 + 0.5).floor() as usize
}

/// Seeded sample of `count` distinct indices from `0..n` (partial
/// Fisher-Yates).
fn pick_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.partial_shuffle(&mut rng, count);
    idx.truncate(count);
    idx
}

/// Untargeted poisoning: toggle exactly `round(ρ·N)` labels, sampled without
/// replacement; inputs untouched.
pub fn upa_flip(data: &LabeledDataset, rho: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("poisoning rate must be in [0,1], got {rho}")));
    }
    let mut out = data.clone();
    let count = poison_count(rho, data.len());
    for i in pick_indices(data.len(), count, seed) {
        out.labels[i] = 1 - out.labels[i];
        out.flags[i] = Flag::Flipped;
    }
    Ok(out)
}

/// Backdoor poisoning: for `round(ρ·N)` samples set the trigger coordinate
/// to the trigger value and force the target label; every other coordinate
/// is untouched.
pub fn bpa_inject(data: &LabeledDataset, spec: &AttackSpec) -> Result<LabeledDataset> {
    if spec.kind != AttackKind::Bpa {
        return Err(Error::Config("bpa_inject needs an attack spec of kind bpa".into()));
    }
    if !(0.0..=1.0).contains(&spec.rho) {
        return Err(Error::Config(format!("poisoning rate must be in [0,1], got {}", spec.rho)));
    }
    let (coord, tau) = spec.trigger.ok_or_else(|| Error::Config("bpa needs a trigger".into()))?;
    if coord >= data.dims() {
        return Err(Error::Config(format!("trigger coordinate {coord} out of range (dims {})", data.dims())));
    }
    let mut out = data.clone();
    let count = poison_count(spec.rho, data.len());
    for i in pick_indices(data.len(), count, spec.seed) {
        out.inputs[i][coord] = tau;
        out.labels[i] = spec.target_label;
        out.flags[i] = Flag::Triggered;
    }
    Ok(out)
}

/// Apply the trigger to every test sample, keeping original labels for
/// attack-success accounting.
pub fn trigger_testset(test: &LabeledDataset, spec: &AttackSpec) -> Result<LabeledDataset> {
    if spec.kind != AttackKind::Bpa {
        return Err(Error::Config("trigger_testset needs an attack spec of kind bpa".into()));
    }
    let (coord, tau) = spec.trigger.ok_or_else(|| Error::Config("bpa needs a trigger".into()))?;
    if coord >= test.dims() {
        return Err(Error::Config(format!("trigger coordinate {coord} out of range (dims {})", test.dims())));
    }
    let mut out = test.clone();
    for (x, f) in out.inputs.iter_mut().zip(out.flags.iter_mut()) {
        x[coord] = tau;
        *f = Flag::Triggered;
    }
    Ok(out)
}

/// Standard binary classification metrics with positive class 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Argmax prediction over network outputs.
pub fn predict(net: &Network, x: &[f64]) -> Result<u8> {
    let (out, _) = net.forward(x)?;
    let mut best = 0usize;
    for (i, v) in out.iter().enumerate() {
        if *v > out[best] {
            best = i;
        }
    }
    Ok(best as u8)
}

/// Evaluate accuracy/precision/recall/F1 on a test set.
pub fn evaluate(net: &Network, test: &LabeledDataset) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Data("evaluate on empty test set".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fne = 0usize;
    for i in 0..test.len() {
        let pred = predict(net, &test.inputs[i])?;
        match (test.labels[i], pred) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fne += 1,
            _ => return Err(Error::Data("labels must be binary".into())),
        }
    }
    let n = (tp + fp + tn + fne) as f64;
    let accuracy = (tp + tn) as f64 / n;
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fne > 0 { tp as f64 / (tp + fne) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Metrics { accuracy, precision, recall, f1 })
}

/// Attack success rate: the fraction of triggered test samples whose
/// original label differs from the target and whose prediction equals the
/// target. Errors when no sample is eligible.
pub fn asr(net: &Network, triggered_test: &LabeledDataset, target_label: u8) -> Result<f64> {
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for i in 0..triggered_test.len() {
        if triggered_test.labels[i] == target_label {
            continue;
        }
        eligible += 1;
        if predict(net, &triggered_test.inputs[i])? == target_label {
            hits += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::Data("no samples with original label != target".into()));
    }
    Ok(hits as f64 / eligible as f64)
}
