//! Fisher information through the kernel, information bits, Rényi/Shannon
//! spectrum entropies, and the rank/variance entropy manifold.
//!
//! The scalar Fisher is the mean squared loss-gradient norm. It has two
//! computation routes that must agree: directly in parameter space, and in
//! output space as `g(x)ᵀ K(x,x) g(x)` with `K` the empirical output-space
//! kernel matrix — that identity is one of the checks this crate exists to
//! run. The output-space Fisher matrix `Φ = E[ C(x)g(x) (C(x)g(x))ᵀ ]` uses
//! the symmetric PSD square root `C` of `K(x,x)`, which preserves
//! `trace(Φ) = fisher_scalar` and the orderings the spectrum indicators
//! consume.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::LabeledDataset;
use crate::kernels;
use crate::linalg::{self, derive_seed, sample_matrix, sym_eig, InitSpec, Matrix};
use crate::network::{loss_grad_output, Loss, Network, Target};
use crate::{Error, Result};

/// Relative threshold under which an eigenvalue counts as zero for
/// log-bearing sums (pseudo-determinant convention).
const SUPPORT_REL_TOL: f64 = 1e-12;

fn support_tol(lambda: &[f64]) -> f64 {
    let max = lambda.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    SUPPORT_REL_TOL * max.max(1e-300)
}

/// Mean over the dataset of `‖∇_θ L(x)‖²`, parameter-space route.
pub fn fisher_scalar(net: &Network, data: &LabeledDataset, loss: Loss) -> Result<f64> {
    if data.len() == 0 {
        return Err(Error::Data("fisher over empty dataset".into()));
    }
    let mut acc = 0.0;
    for i in 0..data.len() {
        let x = &data.inputs[i];
        let (out, trace) = net.forward(x)?;
        let g = loss_grad_output(&out, &sample_target(data, i, loss), loss)?;
        let grads = net.grad_loss(&trace, &g)?;
        acc += grads.sq_norm();
    }
    Ok(acc / data.len() as f64)
}

/// Same quantity through the kernel: mean of `g(x)ᵀ K(x,x) g(x)`.
pub fn fisher_scalar_kernel(net: &Network, data: &LabeledDataset, loss: Loss) -> Result<f64> {
    if data.len() == 0 {
        return Err(Error::Data("fisher over empty dataset".into()));
    }
    let mut acc = 0.0;
    for i in 0..data.len() {
        let x = &data.inputs[i];
        let (out, _) = net.forward(x)?;
        let g = loss_grad_output(&out, &sample_target(data, i, loss), loss)?;
        let k = kernels::empirical_ntk_matrix(net, x, x)?;
        let kg = k.matvec(&g)?;
        acc += linalg::dot(&g, &kg);
    }
    Ok(acc / data.len() as f64)
}

fn sample_target(data: &LabeledDataset, i: usize, _loss: Loss) -> Target {
    // class labels throughout; MSE one-hot encodes them downstream
    Target::Class(data.labels[i] as usize)
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// `-tol·scale` are a contract violation, small negatives clamp to zero.
fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = sym_eig(m)?;
    let scale = vals.iter().fold(0.0_f64, |a, &v| a.max(v.abs())).max(1e-300);
    if vals.iter().any(|&v| v < -1e-8 * scale) {
        return Err(Error::Numerical(format!(
            "kernel matrix not PSD: min eigenvalue {:e}",
            vals[0]
        )));
    }
    let n = vals.len();
    let roots: Vec<f64> = vals.iter().map(|&v| v.max(0.0).sqrt()).collect();
    Ok(Matrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| vecs.get(i, k) * roots[k] * vecs.get(j, k)).sum()
    }))
}

/// Output-space Fisher matrix `Φ` (n_L × n_L, PSD).
pub fn output_fisher_matrix(net: &Network, data: &LabeledDataset, loss: Loss) -> Result<Matrix> {
    if data.len() == 0 {
        return Err(Error::Data("fisher over empty dataset".into()));
    }
    let n_out = net.output_dim();
    let mut phi = Matrix::zeros(n_out, n_out);
    for i in 0..data.len() {
        let x = &data.inputs[i];
        let (out, _) = net.forward(x)?;
        let g = loss_grad_output(&out, &sample_target(data, i, loss), loss)?;
        let k = kernels::empirical_ntk_matrix(net, x, x)?;
        let c = psd_sqrt(&k)?;
        let h = c.matvec(&g)?;
        for a in 0..n_out {
            for b in 0..n_out {
                phi.set(a, b, phi.get(a, b) + h[a] * h[b]);
            }
        }
    }
    phi.scale(1.0 / data.len() as f64);
    Ok(phi)
}

/// Both readings of the information-bits formula: the literal half-sum of
/// positive eigenvalues, and the half-sum of their logs (the pseudo-log-det
/// the same formula names). The two disagree in general; both are reported.
pub fn information_bits(lambda: &[f64]) -> (f64, f64) {
    let tol = support_tol(lambda);
    let mut sum = 0.0;
    let mut logsum = 0.0;
    for &v in lambda {
        if v > tol {
            sum += v;
            logsum += v.ln();
        }
    }
    (0.5 * sum, 0.5 * logsum)
}

/// Rényi entropy of a spectrum. `normalized` divides by the trace first
/// (probability reading); the raw mode uses the eigenvalues directly. Zero
/// eigenvalues are excluded from the sum; `α = 1` dispatches to Shannon and
/// `α = 0` counts the support.
pub fn renyi_entropy(lambda: &[f64], alpha: f64, normalized: bool) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be nonnegative, got {alpha}")));
    }
    let tol = support_tol(lambda);
    let support: Vec<f64> = lambda.iter().copied().filter(|&v| v > tol).collect();
    if support.is_empty() {
        return Err(Error::Numerical("entropy of an all-zero spectrum is undefined".into()));
    }
    if (alpha - 1.0).abs() < 1e-12 {
        return shannon_entropy(lambda, normalized);
    }
    let vals: Vec<f64> = if normalized {
        let trace: f64 = support.iter().sum();
        support.iter().map(|v| v / trace).collect()
    } else {
        support
    };
    // log-space so large alpha cannot underflow: ln Σ v^α =
    // α·ln v_max + ln Σ exp(α·(ln v − ln v_max))
    let vmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let lmax = vmax.ln();
    let sum: f64 = vals.iter().map(|&v| (alpha * (v.ln() - lmax)).exp()).sum();
    Ok((alpha * lmax + sum.ln()) / (1.0 - alpha))
}

/// Shannon entropy of a spectrum: `−Σ p ln p` over the normalized spectrum,
/// or `−Σ λ ln λ` over the positive eigenvalues in raw mode.
pub fn shannon_entropy(lambda: &[f64], normalized: bool) -> Result<f64> {
    let tol = support_tol(lambda);
    let support: Vec<f64> = lambda.iter().copied().filter(|&v| v > tol).collect();
    if support.is_empty() {
        return Err(Error::Numerical("entropy of an all-zero spectrum is undefined".into()));
    }
    if normalized {
        let trace: f64 = support.iter().sum();
        Ok(-support.iter().map(|&v| v / trace).map(|p| p * p.ln()).sum::<f64>())
    } else {
        Ok(-support.iter().map(|&v| v * v.ln()).sum::<f64>())
    }
}

/// Spectrum indicators bundled for serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Eigenvalues, ascending, clamped at `-1e-10` (values below that are a
    /// caller bug; tiny negatives round to zero).
    pub eigenvalues: Vec<f64>,
    pub ib_paper: f64,
    pub ib_logdet: f64,
    /// `(α, H_α)` over the normalized spectrum.
    pub renyi: Vec<(f64, f64)>,
    pub shannon_normalized: f64,
    pub shannon_unnormalized: f64,
}

impl SpectrumReport {
    pub fn from_eigenvalues(lambda: &[f64], alphas: &[f64]) -> Result<SpectrumReport> {
        let mut eig: Vec<f64> = lambda
            .iter()
            .map(|&v| {
                if v < -1e-10 {
                    Err(Error::Numerical(format!("negative eigenvalue {v:e} fed to spectrum report")))
                } else {
                    Ok(v.max(0.0))
                }
            })
            .collect::<Result<_>>()?;
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (ib_paper, ib_logdet) = information_bits(&eig);
        let renyi = alphas
            .iter()
            .map(|&a| renyi_entropy(&eig, a, true).map(|h| (a, h)))
            .collect::<Result<_>>()?;
        Ok(SpectrumReport {
            ib_paper,
            ib_logdet,
            renyi,
            shannon_normalized: shannon_entropy(&eig, true)?,
            shannon_unnormalized: shannon_entropy(&eig, false)?,
            eigenvalues: eig,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One cell of the entropy manifold grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldCell {
    pub rank: usize,
    pub scale: f64,
    pub trials: usize,
    pub h1_norm_mean: f64,
    pub h1_norm_std: f64,
    pub h1_unnorm_mean: f64,
    pub h1_unnorm_std: f64,
    pub mean_nonzero_eig: f64,
}

/// Sweep the `(rank, scale)` grid: draw `A` of shape `r×n` at per-entry
/// variance `k/n`, take the nonzero spectrum of `AᵀA` (through `AAᵀ`), and
/// record both Shannon variants per cell, mean ± std over the trials. Cells
/// run in parallel with per-cell derived seeds and come back in row-major
/// order.
pub fn entropy_manifold(
    n: usize,
    ranks: &[usize],
    scales: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<ManifoldCell>> {
    if ranks.iter().any(|&r| r > n) {
        return Err(Error::Config("ranks must satisfy r <= n".into()));
    }
    if scales.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::Config("scales must be positive".into()));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let cells: Vec<(usize, usize, f64)> = ranks
        .iter()
        .enumerate()
        .flat_map(|(i, &r)| scales.iter().enumerate().map(move |(j, &k)| (i * 1000 + j, r, k)))
        .collect();
    cells
        .par_iter()
        .map(|&(idx, rank, scale)| {
            let cell_seed = derive_seed(seed, idx as u64);
            let mut h_norm = Vec::with_capacity(trials);
            let mut h_unnorm = Vec::with_capacity(trials);
            let mut eig_acc = 0.0;
            let mut eig_count = 0usize;
            for t in 0..trials {
                let a = sample_matrix(
                    rank,
                    n,
                    &InitSpec::kaiming(scale, derive_seed(cell_seed, t as u64)),
                )?;
                let gram_small = a.outer_gram();
                let lambda = linalg::sym_eigvalues(&gram_small)?;
                let tol = support_tol(&lambda);
                let pos: Vec<f64> = lambda.into_iter().filter(|&v| v > tol).collect();
                h_norm.push(shannon_entropy(&pos, true)?);
                h_unnorm.push(shannon_entropy(&pos, false)?);
                eig_acc += pos.iter().sum::<f64>();
                eig_count += pos.len();
            }
            let (nm, ns) = mean_std(&h_norm);
            let (um, us) = mean_std(&h_unnorm);
            Ok(ManifoldCell {
                rank,
                scale,
                trials,
                h1_norm_mean: nm,
                h1_norm_std: ns,
                h1_unnorm_mean: um,
                h1_unnorm_std: us,
                mean_nonzero_eig: eig_acc / eig_count.max(1) as f64,
            })
        })
        .collect()
}

/// Per-trial unnormalized Shannon over the full grid, for per-seed
/// monotonicity checks: `grids[t][i][j]` is trial `t` at `(ranks[i], scales[j])`.
pub fn manifold_per_trial_unnorm(
    n: usize,
    ranks: &[usize],
    scales: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut grids = vec![vec![vec![0.0; scales.len()]; ranks.len()]; trials];
    for (i, &rank) in ranks.iter().enumerate() {
        for (j, &scale) in scales.iter().enumerate() {
            let cell_seed = derive_seed(seed, (i * 1000 + j) as u64);
            for (t, grid) in grids.iter_mut().enumerate() {
                let a =
                    sample_matrix(rank, n, &InitSpec::kaiming(scale, derive_seed(cell_seed, t as u64)))?;
                let lambda = linalg::sym_eigvalues(&a.outer_gram())?;
                let tol = support_tol(&lambda);
                let pos: Vec<f64> = lambda.into_iter().filter(|&v| v > tol).collect();
                grid[i][j] = shannon_entropy(&pos, false)?;
            }
        }
    }
    Ok(grids)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Manifold CSV with the documented header (floats at 17 significant digits).
pub fn manifold_csv(cells: &[ManifoldCell]) -> String {
    let mut s = String::from(
        "rank,scale,trials,h1_norm_mean,h1_norm_std,h1_unnorm_mean,h1_unnorm_std,mean_nonzero_eig\n",
    );
    for c in cells {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.rank,
            fmt_g17(c.scale),
            c.trials,
            fmt_g17(c.h1_norm_mean),
            fmt_g17(c.h1_norm_std),
            fmt_g17(c.h1_unnorm_mean),
            fmt_g17(c.h1_unnorm_std),
            fmt_g17(c.mean_nonzero_eig)
        ));
    }
    s
}

/// 17 significant digits: round-trips any f64 exactly.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{gen_blobs, BlobSpec};
    use crate::linalg::sample_std_normal_vec;
    use crate::network::{Activation, LoraConfig, Network, NetworkSpec};

    fn tiny_dataset(n: usize, dims: usize, seed: u64) -> LabeledDataset {
        gen_blobs(&BlobSpec { n_per_class: n, dims, separation: 1.5, spread: 1.0, seed }).unwrap()
    }

    fn spec(dims: Vec<usize>, seed: u64) -> NetworkSpec {
        NetworkSpec::new(dims, Activation::Tanh, InitSpec::kaiming(1.0 / 3.0, seed))
    }

    #[test]
    fn fisher_zero_cases() {
        let data = tiny_dataset(4, 3, 1);
        // frozen network: no trainable params anywhere
        let base = Network::build_base(&spec(vec![3, 6, 2], 2)).unwrap();
        let mut frozen = base.clone();
        for l in frozen.layers.iter_mut() {
            l.train_w = false;
        }
        let f = fisher_scalar(&frozen, &data, Loss::CrossEntropy).unwrap();
        assert_eq!(f, 0.0);
        assert!(fisher_scalar(&base, &tiny_empty(), Loss::Mse).is_err());
    }

    fn tiny_empty() -> LabeledDataset {
        LabeledDataset { inputs: vec![], labels: vec![], flags: vec![], seed: 0 }
    }

    #[test]
    fn fisher_mse_perfect_fit_is_zero() {
        // target equal to the output gives g = 0 and a zero gradient record
        let net = Network::build_base(&spec(vec![3, 2], 3)).unwrap();
        let data = tiny_dataset(3, 3, 4);
        let x = data.inputs[0].clone();
        let (out, trace) = net.forward(&x).unwrap();
        let g = loss_grad_output(&out, &Target::Vector(out.clone()), Loss::Mse).unwrap();
        let grads = net.grad_loss(&trace, &g).unwrap();
        assert_eq!(grads.sq_norm(), 0.0);
    }

    #[test]
    fn theorem2_routes_agree() {
        for seed in 0..6u64 {
            let base = Network::build_base(&spec(vec![4, 10, 3], 50 + seed)).unwrap();
            let net = if seed % 2 == 0 {
                base
            } else {
                base.attach_lora(&LoraConfig::new(vec![1], 2, InitSpec::kaiming(0.4, seed))).unwrap()
            };
            let data = tiny_dataset(4, 4, 60 + seed);
            for loss in [Loss::CrossEntropy, Loss::Mse] {
                let f1 = fisher_scalar(&net, &data, loss).unwrap();
                let f2 = fisher_scalar_kernel(&net, &data, loss).unwrap();
                let rel = (f1 - f2).abs() / f1.abs().max(1e-300);
                assert!(rel <= 1e-8, "seed {seed} {loss:?}: {f1} vs {f2} rel {rel}");
            }
        }
    }

    #[test]
    fn fisher_matrix_trace_identity_and_1x1() {
        for seed in 0..4u64 {
            let net = Network::build_base(&spec(vec![4, 9, 3], 80 + seed)).unwrap();
            let data = tiny_dataset(5, 4, 90 + seed);
            let phi = output_fisher_matrix(&net, &data, Loss::CrossEntropy).unwrap();
            let tr: f64 = (0..3).map(|i| phi.get(i, i)).sum();
            let f = fisher_scalar(&net, &data, Loss::CrossEntropy).unwrap();
            assert!((tr - f).abs() <= 1e-8 * f.abs().max(1e-300), "trace {tr} vs scalar {f}");
        }
        // n_L = 1: the 1x1 matrix equals the scalar
        let net1 = Network::build_base(&spec(vec![3, 6, 1], 123)).unwrap();
        let mut data = tiny_dataset(4, 3, 3);
        for l in data.labels.iter_mut() {
            *l = 0;
        }
        let phi = output_fisher_matrix(&net1, &data, Loss::Mse).unwrap();
        let f = fisher_scalar(&net1, &data, Loss::Mse).unwrap();
        assert!((phi.get(0, 0) - f).abs() <= 1e-10 * f.max(1e-300));
    }

    #[test]
    fn information_bits_cases() {
        let (p, l) = information_bits(&[1.0, 1.0, 0.0]);
        assert_eq!(p, 1.0);
        assert_eq!(l, 0.0);
        let (p, l) = information_bits(&[]);
        assert_eq!((p, l), (0.0, 0.0));
    }

    #[test]
    fn renyi_uniform_and_direct_substitution() {
        // normalized uniform over r values: log r for any alpha
        for &alpha in &[0.0, 0.5, 2.0, 8.0] {
            let h = renyi_entropy(&[0.25; 4], alpha, true).unwrap();
            assert!((h - 4.0_f64.ln()).abs() < 1e-12, "alpha {alpha}");
        }
        // raw mode, lambda = (1,1), alpha = 2: (1/(1-2))·ln 2 = −ln 2
        let h = renyi_entropy(&[1.0, 1.0], 2.0, false).unwrap();
        assert!((h + 2.0_f64.ln()).abs() < 1e-12);
        assert!(renyi_entropy(&[0.0, 0.0], 2.0, true).is_err());
    }

    #[test]
    fn renyi_limit_is_shannon() {
        let mut rng_seed = 0;
        for _ in 0..20 {
            rng_seed += 1;
            let lam: Vec<f64> = sample_std_normal_vec(6, rng_seed).iter().map(|v| v.abs() + 0.01).collect();
            let h_close = renyi_entropy(&lam, 1.0001, true).unwrap();
            let h_sh = shannon_entropy(&lam, true).unwrap();
            assert!((h_close - h_sh).abs() <= 1e-3, "{h_close} vs {h_sh}");
        }
    }

    #[test]
    fn shannon_edge_values() {
        assert_eq!(shannon_entropy(&[3.7], true).unwrap(), 0.0);
        let h = shannon_entropy(&[0.2; 5], true).unwrap();
        assert!((h - 5.0_f64.ln()).abs() < 1e-12);
        let e = (-1.0_f64).exp();
        let h = shannon_entropy(&[e], false).unwrap();
        assert!((h - e).abs() < 1e-15);
    }

    #[test]
    fn renyi_monotone_in_alpha() {
        for seed in 0..10u64 {
            let lam: Vec<f64> =
                sample_std_normal_vec(8, 500 + seed).iter().map(|v| v.abs() + 1e-3).collect();
            let alphas = [0.5, 0.9, 1.0, 1.1, 2.0];
            let hs: Vec<f64> =
                alphas.iter().map(|&a| renyi_entropy(&lam, a, true).unwrap()).collect();
            for w in hs.windows(2) {
                assert!(w[0] >= w[1] - 1e-10, "H must be nonincreasing in alpha: {hs:?}");
            }
            // the infinity proxy −ln(max P) sits below all of them
            let trace: f64 = lam.iter().sum();
            let pmax = lam.iter().cloned().fold(0.0_f64, f64::max) / trace;
            let hinf = -pmax.ln();
            assert!(hs.last().unwrap() >= &(hinf - 1e-10));
        }
    }

    #[test]
    fn renyi_large_alpha_approaches_min_entropy() {
        // a peaked spectrum keeps the finite-alpha correction below 1e-3 at
        // alpha = 64; a generic spectrum needs a larger alpha for that rate
        let peaked = [50.0, 0.5, 0.3, 0.2];
        let trace: f64 = peaked.iter().sum();
        let pmax = 50.0 / trace;
        let h64 = renyi_entropy(&peaked, 64.0, true).unwrap();
        assert!((h64 - (-pmax.ln())).abs() <= 1e-3, "{h64} vs {}", -pmax.ln());
        // generic spectra: the finite-alpha correction decays like
        // (−ln Pmax)/(α−1), so a flat 5-mass spectrum needs α ≈ 4096
        for seed in 0..5u64 {
            let lam: Vec<f64> =
                sample_std_normal_vec(5, 700 + seed).iter().map(|v| v.abs() + 0.05).collect();
            let trace: f64 = lam.iter().sum();
            let pmax = lam.iter().cloned().fold(0.0_f64, f64::max) / trace;
            let h = renyi_entropy(&lam, 4096.0, true).unwrap();
            assert!((h - (-pmax.ln())).abs() <= 1e-3, "seed {seed}");
        }
    }

    #[test]
    fn spectrum_report_roundtrip_and_invariants() {
        let rep = SpectrumReport::from_eigenvalues(&[0.5, 2.0, 1e-14, 0.0], &[0.5, 2.0]).unwrap();
        assert_eq!(rep.eigenvalues.len(), 4);
        assert!(rep.renyi[0].1 >= rep.renyi[1].1);
        let json = rep.to_json();
        let back: SpectrumReport = serde_json::from_str(&json).unwrap();
        assert_eq!(rep, back);
        assert!(SpectrumReport::from_eigenvalues(&[-1.0], &[]).is_err());
    }

    #[test]
    fn manifold_rank_one_normalized_is_zero() {
        let cells = entropy_manifold(64, &[1], &[0.1], 5, 7).unwrap();
        assert_eq!(cells.len(), 1);
        assert!(cells[0].h1_norm_mean.abs() < 1e-12);
    }

    #[test]
    fn manifold_cell_concentration_value() {
        // (r=8, k=1/3, n=1024): nonzero eigenvalues near 1/3, unnormalized
        // H1 near (8/3)·ln 3
        let cells = entropy_manifold(1024, &[8], &[1.0 / 3.0], 10, 11).unwrap();
        let expect = 8.0 * (1.0 / 3.0) * 3.0_f64.ln();
        let got = cells[0].h1_unnorm_mean;
        assert!((got - expect).abs() <= 0.1 * expect, "{got} vs {expect}");
        assert!((cells[0].mean_nonzero_eig - 1.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn manifold_unnorm_increases_with_rank() {
        let cells = entropy_manifold(512, &[2, 8, 32], &[0.1], 8, 13).unwrap();
        let by_rank: Vec<f64> = cells.iter().map(|c| c.h1_unnorm_mean).collect();
        assert!(by_rank[0] < by_rank[1] && by_rank[1] < by_rank[2], "{by_rank:?}");
    }

    #[test]
    fn manifold_csv_deterministic() {
        let a = manifold_csv(&entropy_manifold(128, &[2, 4], &[0.05, 0.2], 3, 5).unwrap());
        let b = manifold_csv(&entropy_manifold(128, &[2, 4], &[0.05, 0.2], 3, 5).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("rank,scale,trials,"));
        assert_eq!(a.lines().count(), 1 + 4);
    }
}
