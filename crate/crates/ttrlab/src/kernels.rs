//! Neural tangent kernels at finite width: the empirical kernel via exact
//! gradient inner products, the layerwise analytic recursions for full
//! fine-tuning and for low-rank adaptation, the adapter delta kernel and its
//! matrix `AᵀA − I`, and batch GP covariance Grams.
//!
//! For a single output coordinate the gradient of the output with respect to
//! one layer's weight matrix is rank one (backprop sensitivity ⊗ layer
//! input), so kernel values are accumulated from per-layer dot products
//! without materializing parameter-sized gradients.
//!
//! The analytic recursions evaluate the layer sums on the traces of the
//! actual finite network. Under the standard parameterization they read
//! `K(1) = xᵀx′`, `K(l) = K(l−1)·Σ̇(l) + Σ(l)` with raw inner-product sums;
//! under the NTK parameterization every layer sum is divided by that layer's
//! fan-in (the forward scaling moves the fan-in factor out of the weights,
//! which is what keeps the kernel width-stable).

use serde::{Deserialize, Serialize};

use crate::linalg::{self, sym_eigvalues, Matrix};
use crate::network::{ActivationTrace, Network, Parameterization};
use crate::{Error, Result};

/// Empirical NTK `⟨∇_θ y(L,k)(x), ∇_θ y(L,k)(x′)⟩` summed over trainable
/// parameter groups only.
pub fn empirical_ntk(net: &Network, x: &[f64], x_prime: &[f64], k: usize) -> Result<f64> {
    let (_, tx) = net.forward(x)?;
    let (_, txp) = net.forward(x_prime)?;
    let dx = net.output_deltas(&tx, k)?;
    let dxp = net.output_deltas(&txp, k)?;
    Ok(pairwise_kernel(net, &tx, &txp, &dx, &dxp))
}

/// Full output-space kernel matrix `K_{kk'}(x,x′) = ⟨∇y_k(x), ∇y_{k'}(x′)⟩`
/// over trainable groups (diagonal plus cross terms).
pub fn empirical_ntk_matrix(net: &Network, x: &[f64], x_prime: &[f64]) -> Result<Matrix> {
    let n_out = net.output_dim();
    let (_, tx) = net.forward(x)?;
    let (_, txp) = net.forward(x_prime)?;
    let dx: Vec<_> = (0..n_out).map(|k| net.output_deltas(&tx, k)).collect::<Result<_>>()?;
    let dxp: Vec<_> = (0..n_out).map(|k| net.output_deltas(&txp, k)).collect::<Result<_>>()?;
    let mut m = Matrix::zeros(n_out, n_out);
    for k in 0..n_out {
        for kp in 0..n_out {
            m.set(k, kp, pairwise_kernel(net, &tx, &txp, &dx[k], &dxp[kp]));
        }
    }
    Ok(m)
}

/// Kernel contribution sum given both traces and both delta chains.
fn pairwise_kernel(
    net: &Network,
    tx: &ActivationTrace,
    txp: &ActivationTrace,
    deltas_x: &[Vec<f64>],
    deltas_xp: &[Vec<f64>],
) -> f64 {
    let mut acc = 0.0;
    for (l, layer) in net.layers.iter().enumerate() {
        let s2 = layer.scale * layer.scale;
        let d_dot = linalg::dot(&deltas_x[l], &deltas_xp[l]);
        if layer.train_w {
            let x_dot = linalg::dot(tx.layer_input(l), txp.layer_input(l));
            acc += s2 * d_dot * x_dot;
            if layer.bias.is_some() {
                acc += d_dot;
            }
        }
        if let Some(ad) = &layer.adapter {
            let c2 = ad.scale * ad.scale;
            if ad.train_b {
                let mid_x = tx.lora_mid[l].as_ref().expect("adapted layer traced");
                let mid_xp = txp.lora_mid[l].as_ref().expect("adapted layer traced");
                acc += s2 * c2 * d_dot * linalg::dot(mid_x, mid_xp);
            }
            if ad.train_a {
                let btd_x = ad.b.matvec_transposed(&deltas_x[l]).expect("shapes fixed");
                let btd_xp = ad.b.matvec_transposed(&deltas_xp[l]).expect("shapes fixed");
                let x_dot = linalg::dot(tx.layer_input(l), txp.layer_input(l));
                acc += s2 * c2 * linalg::dot(&btd_x, &btd_xp) * x_dot;
            }
        }
    }
    acc
}

/// Per-layer pieces of the analytic recursion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticLayer {
    pub layer: usize,
    pub sigma: f64,
    pub sigma_dot: f64,
    pub k: f64,
}

fn check_trace_pair(tx: &ActivationTrace, txp: &ActivationTrace) -> Result<()> {
    if tx.layer_dims != txp.layer_dims
        || tx.activation != txp.activation
        || tx.parameterization != txp.parameterization
    {
        return Err(Error::Dim("traces come from different network specs".into()));
    }
    Ok(())
}

/// Analytic full fine-tuning recursion on a pair of traces.
///
/// Returns one entry per layer; entry `l` holds `Σ(l+1)`, `Σ̇(l+1)`, and the
/// kernel `K(l+1)` of the depth-(l+1) subnetwork.
pub fn analytic_ntk_ff(tx: &ActivationTrace, txp: &ActivationTrace) -> Result<Vec<AnalyticLayer>> {
    analytic_recursion(tx, txp, None)
}

/// Analytic LoRA recursion: adapted layers replace `Σ(l)` with
/// `σ(y(l−1)(x))ᵀ AᵀA σ(y(l−1)(x′))`; other layers use the full fine-tuning
/// step. `adapters[l]` supplies the unscaled `A` for adapted layer `l`.
pub fn analytic_ntk_lora(
    tx: &ActivationTrace,
    txp: &ActivationTrace,
    adapters: &[(usize, &Matrix)],
) -> Result<Vec<AnalyticLayer>> {
    analytic_recursion(tx, txp, Some(adapters))
}

fn analytic_recursion(
    tx: &ActivationTrace,
    txp: &ActivationTrace,
    adapters: Option<&[(usize, &Matrix)]>,
) -> Result<Vec<AnalyticLayer>> {
    check_trace_pair(tx, txp)?;
    let n_layers = tx.n_layers();
    let mut out = Vec::with_capacity(n_layers);
    let mut k_prev = 0.0;
    for l in 0..n_layers {
        let norm = match tx.parameterization {
            Parameterization::Standard => 1.0,
            Parameterization::Ntk => 1.0 / tx.layer_dims[l] as f64,
        };
        let xin = tx.layer_input(l);
        let xin_p = txp.layer_input(l);
        let sigma = match adapters.and_then(|ads| ads.iter().find(|(al, _)| *al == l)) {
            Some((_, a)) => {
                if a.cols() != xin.len() {
                    return Err(Error::Dim(format!(
                        "adapter on layer {l} has {} cols, input has {}",
                        a.cols(),
                        xin.len()
                    )));
                }
                let ax = a.matvec(xin)?;
                let axp = a.matvec(xin_p)?;
                norm * linalg::dot(&ax, &axp)
            }
            None => norm * linalg::dot(xin, xin_p),
        };
        let (sigma_dot, k) = if l == 0 {
            // K(1) is the inner product of the raw inputs (through AᵀA when adapted)
            (f64::NAN, sigma)
        } else {
            let dx = tx.act_deriv(l - 1);
            let dxp = txp.act_deriv(l - 1);
            let sd = norm * linalg::dot(&dx, &dxp);
            (sd, k_prev * sd + sigma)
        };
        k_prev = k;
        out.push(AnalyticLayer { layer: l, sigma, sigma_dot, k });
    }
    Ok(out)
}

/// Delta kernel `Δ_r = σ(y(l−1)(x))ᵀ (AᵀA − I) σ(y(l−1)(x′))`, evaluated as
/// `(Aσ)ᵀ(Aσ′) − σᵀσ′` so no `n×n` matrix is formed. `a` is the unscaled
/// adapter matrix; `layer` indexes the adapted layer, whose input is the
/// previous layer's post-activation (the raw input for layer 0).
pub fn delta_r(tx: &ActivationTrace, txp: &ActivationTrace, a: &Matrix, layer: usize) -> Result<f64> {
    check_trace_pair(tx, txp)?;
    if layer >= tx.n_layers() {
        return Err(Error::Dim(format!("layer {layer} out of range")));
    }
    let sx = tx.layer_input(layer);
    let sxp = txp.layer_input(layer);
    if a.cols() != sx.len() {
        return Err(Error::Dim(format!(
            "A has {} cols but layer input has length {}",
            a.cols(),
            sx.len()
        )));
    }
    let ax = a.matvec(sx)?;
    let axp = a.matvec(sxp)?;
    Ok(linalg::dot(&ax, &axp) - linalg::dot(sx, sxp))
}

/// The delta kernel matrix `M_Δ = AᵀA − I`.
pub fn m_delta(a: &Matrix) -> Matrix {
    let mut g = a.gram();
    let n = g.cols();
    for i in 0..n {
        g.set(i, i, g.get(i, i) - 1.0);
    }
    g
}

/// Full spectrum of `M_Δ = AᵀA − I` in ascending order, computed through the
/// Gram identity: the nonzero eigenvalues of `AᵀA` are the eigenvalues of the
/// `r×r` matrix `AAᵀ`, and the remaining `n−r` eigenvalues are exactly 0, so
/// `M_Δ` has those shifted by −1 plus `n−r` copies of −1. The identity is
/// cross-checked against the dense eigensolver in this module's tests.
pub fn m_delta_spectrum(a: &Matrix) -> Result<Vec<f64>> {
    let r = a.rows();
    let n = a.cols();
    let small = a.outer_gram();
    let nonzero = sym_eigvalues(&small)?;
    let mut spectrum = Vec::with_capacity(n);
    if n > r {
        spectrum.resize(n - r, -1.0);
    }
    spectrum.extend(nonzero.iter().map(|&v| v - 1.0));
    spectrum.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if n < r {
        spectrum.truncate(n);
    }
    Ok(spectrum)
}

/// Largest-magnitude eigenvalue of `M_Δ = AᵀA − I` by seeded power iteration
/// (`v ↦ Aᵀ(Av) − v`), for widths where the dense solve is wasteful.
pub fn m_delta_spectral_norm(a: &Matrix, seed: u64) -> Result<f64> {
    let n = a.cols();
    let mut v = linalg::sample_std_normal_vec(n, seed);
    let mut lambda = 0.0_f64;
    let norm = linalg::norm2(&v);
    if norm == 0.0 {
        return Err(Error::Numerical("degenerate start vector".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    for _ in 0..2000 {
        let av = a.matvec(&v)?;
        let mut w = a.matvec_transposed(&av)?;
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi -= vi;
        }
        let new_lambda = linalg::dot(&v, &w);
        let norm = linalg::norm2(&w);
        if norm == 0.0 {
            return Ok(0.0);
        }
        for x in w.iter_mut() {
            *x /= norm;
        }
        v = w;
        if (new_lambda - lambda).abs() <= 1e-12 * new_lambda.abs().max(1.0) {
            return Ok(new_lambda.abs());
        }
        lambda = new_lambda;
    }
    Ok(lambda.abs())
}

/// Batch GP covariance: `grams[0]` is the Gram of the raw inputs and
/// `grams[l]` the Gram of layer-`l−1` post-activations, matching the
/// layerwise covariance recursion.
pub fn gp_cov(traces: &[ActivationTrace]) -> Result<Vec<Matrix>> {
    let first = traces.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    for t in traces.iter().skip(1) {
        check_trace_pair(first, t)?;
    }
    let b = traces.len();
    let n_layers = first.n_layers();
    let mut grams = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut g = Matrix::zeros(b, b);
        for i in 0..b {
            for j in i..b {
                let v = linalg::dot(traces[i].layer_input(l), traces[j].layer_input(l));
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        grams.push(g);
    }
    Ok(grams)
}

/// Which method a kernel report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Ff,
    Lora,
}

/// One serializable row of a kernel inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    pub layer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

/// Kernel comparison for one input pair: per-output empirical values, the
/// per-layer analytic recursion, and adapter deltas where applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub mode: KernelMode,
    pub entries: Vec<KernelEntry>,
}

impl KernelReport {
    pub fn build(net: &Network, x: &[f64], x_prime: &[f64]) -> Result<KernelReport> {
        let (_, tx) = net.forward(x)?;
        let (_, txp) = net.forward(x_prime)?;
        let adapters: Vec<(usize, &Matrix)> = net
            .layers
            .iter()
            .enumerate()
            .filter_map(|(l, layer)| layer.adapter.as_ref().map(|ad| (l, &ad.a)))
            .collect();
        let mode = if adapters.is_empty() { KernelMode::Ff } else { KernelMode::Lora };
        let analytic = match mode {
            KernelMode::Ff => analytic_ntk_ff(&tx, &txp)?,
            KernelMode::Lora => analytic_ntk_lora(&tx, &txp, &adapters)?,
        };
        let last = net.n_layers() - 1;
        let mut entries: Vec<KernelEntry> = analytic
            .iter()
            .map(|al| KernelEntry {
                layer: al.layer,
                k: None,
                empirical: None,
                analytic: Some(al.k),
                delta: None,
            })
            .collect();
        for (l, a) in &adapters {
            let d = delta_r(&tx, &txp, a, *l)?;
            if let Some(e) = entries.iter_mut().find(|e| e.layer == *l) {
                e.delta = Some(d);
            }
        }
        for k in 0..net.output_dim() {
            entries.push(KernelEntry {
                layer: last,
                k: Some(k),
                empirical: Some(empirical_ntk(net, x, x_prime, k)?),
                analytic: None,
                delta: None,
            });
        }
        Ok(KernelReport { mode, entries })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sample_matrix, sample_std_normal_vec, InitDistribution, InitSpec};
    use crate::network::{Activation, LoraConfig, Network, NetworkSpec};

    fn spec(dims: Vec<usize>, act: Activation, seed: u64) -> NetworkSpec {
        NetworkSpec::new(dims, act, InitSpec::kaiming(1.0 / 3.0, seed))
    }

    #[test]
    fn single_linear_layer_kernel_is_xtx() {
        // K = xᵀx′ for any W under the standard parameterization
        let net = Network::build_base(&spec(vec![5, 3], Activation::Relu, 2)).unwrap();
        let x = sample_std_normal_vec(5, 10);
        let xp = sample_std_normal_vec(5, 11);
        let expect = linalg::dot(&x, &xp);
        for k in 0..3 {
            let got = empirical_ntk(&net, &x, &xp, k).unwrap();
            assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn kernel_diag_nonnegative_and_symmetric() {
        let net = Network::build_base(&spec(vec![6, 10, 4], Activation::Tanh, 3)).unwrap();
        let x = sample_std_normal_vec(6, 20);
        let xp = sample_std_normal_vec(6, 21);
        for k in 0..4 {
            let diag = empirical_ntk(&net, &x, &x, k).unwrap();
            assert!(diag >= 0.0);
            let ab = empirical_ntk(&net, &x, &xp, k).unwrap();
            let ba = empirical_ntk(&net, &xp, &x, k).unwrap();
            assert_eq!(ab, ba, "kernel symmetry must be exact");
        }
    }

    #[test]
    fn tiny_net_matches_bruteforce_parameter_loop() {
        let net = Network::build_base(&spec(vec![2, 3, 2], Activation::Tanh, 9)).unwrap();
        let x = vec![0.4, -1.3];
        let xp = vec![-0.2, 0.9];
        for k in 0..2 {
            let fast = empirical_ntk(&net, &x, &xp, k).unwrap();
            let gx = net.grad_output_k(&x, k).unwrap();
            let gxp = net.grad_output_k(&xp, k).unwrap();
            let brute = gx.dot(&gxp);
            assert!((fast - brute).abs() <= 1e-13 * brute.abs().max(1.0));
        }
    }

    #[test]
    fn matrix_kernel_matches_scalar_diagonal() {
        let base = Network::build_base(&spec(vec![4, 8, 3], Activation::Relu, 5)).unwrap();
        let net = base
            .attach_lora(&LoraConfig::new(vec![1], 2, InitSpec::kaiming(0.5, 6)).with_freeze_base(false))
            .unwrap();
        let x = sample_std_normal_vec(4, 30);
        let xp = sample_std_normal_vec(4, 31);
        let m = empirical_ntk_matrix(&net, &x, &xp).unwrap();
        for k in 0..3 {
            let s = empirical_ntk(&net, &x, &xp, k).unwrap();
            assert_eq!(m.get(k, k), s);
        }
    }

    #[test]
    fn analytic_identity_activation_hand_formula() {
        // depth 2, W = I, identity activation:
        // K(2) = K(1)·Σ̇(2) + Σ(2) = (xᵀx′)·n1 + xᵀx′
        let s = NetworkSpec {
            layer_dims: vec![4, 4, 4],
            activation: Activation::Identity,
            use_bias: false,
            weight_init: InitSpec::new(InitDistribution::Identity, 1.0, 0),
            parameterization: crate::network::Parameterization::Standard,
        };
        let net = Network::build_base(&s).unwrap();
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let xp = vec![1.5, 0.5, -0.5, 1.0];
        let (_, tx) = net.forward(&x).unwrap();
        let (_, txp) = net.forward(&xp).unwrap();
        let layers = analytic_ntk_ff(&tx, &txp).unwrap();
        let xtx = linalg::dot(&x, &xp);
        assert!((layers[0].k - xtx).abs() < 1e-14);
        let expect = xtx * 4.0 + xtx;
        assert!((layers[1].k - expect).abs() < 1e-12);
    }

    #[test]
    fn analytic_dead_relu_branch() {
        // all pre-activations negative: Σ = 0 and Σ̇ = 0 at the next layer
        let mut net = Network::build_base(&spec(vec![3, 4, 2], Activation::Relu, 12)).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                net.layers[0].w.set(i, j, -(0.3 + 0.1 * (i + j) as f64));
            }
        }
        let x = vec![1.0, 0.5, 0.25];
        let xp = vec![0.5, 1.0, 0.75];
        let (_, tx) = net.forward(&x).unwrap();
        let (_, txp) = net.forward(&xp).unwrap();
        let layers = analytic_ntk_ff(&tx, &txp).unwrap();
        assert_eq!(layers[1].sigma, 0.0);
        assert_eq!(layers[1].sigma_dot, 0.0);
        assert_eq!(layers[1].k, 0.0);
    }

    #[test]
    fn lora_identity_adapter_matches_ff_recursion() {
        let net = Network::build_base(&spec(vec![4, 6, 2], Activation::Relu, 14)).unwrap();
        let x = sample_std_normal_vec(4, 40);
        let xp = sample_std_normal_vec(4, 41);
        let (_, tx) = net.forward(&x).unwrap();
        let (_, txp) = net.forward(&xp).unwrap();
        let eye = Matrix::identity(6);
        let ff = analytic_ntk_ff(&tx, &txp).unwrap();
        let lora = analytic_ntk_lora(&tx, &txp, &[(1, &eye)]).unwrap();
        for (a, b) in ff.iter().zip(&lora) {
            assert!((a.k - b.k).abs() <= 1e-12 * a.k.abs().max(1.0));
        }
        // zero adapter kills the at-layer term
        let zero = Matrix::zeros(6, 6);
        let lz = analytic_ntk_lora(&tx, &txp, &[(1, &zero)]).unwrap();
        assert_eq!(lz[1].sigma, 0.0);
    }

    #[test]
    fn delta_r_edge_cases() {
        let net = Network::build_base(&spec(vec![3, 5, 2], Activation::Relu, 15)).unwrap();
        let x = sample_std_normal_vec(3, 50);
        let xp = sample_std_normal_vec(3, 51);
        let (_, tx) = net.forward(&x).unwrap();
        let (_, txp) = net.forward(&xp).unwrap();
        let eye = Matrix::identity(5);
        assert_eq!(delta_r(&tx, &txp, &eye, 1).unwrap(), 0.0);
        let zero = Matrix::zeros(2, 5);
        let d = delta_r(&tx, &txp, &zero, 1).unwrap();
        let s = linalg::dot(tx.layer_input(1), txp.layer_input(1));
        assert_eq!(d, -s);
    }

    #[test]
    fn delta_r_diag_nonpositive_under_small_variance() {
        // Theorem-4 flavor: with k < 1 the quadratic form at x = x′ is <= 0
        let net = Network::build_base(&spec(vec![6, 32, 2], Activation::Relu, 16)).unwrap();
        for seed in 0..100u64 {
            let a = sample_matrix(4, 32, &InitSpec::kaiming(0.3, 700 + seed)).unwrap();
            let x = sample_std_normal_vec(6, 100 + seed);
            let (_, tx) = net.forward(&x).unwrap();
            let d = delta_r(&tx, &tx, &a, 1).unwrap();
            assert!(d <= 1e-12, "seed {seed}: Δ_r(x,x) = {d}");
        }
    }

    #[test]
    fn m_delta_zero_adapter_is_minus_identity() {
        let a = Matrix::zeros(2, 4);
        let m = m_delta(&a);
        let vals = sym_eigvalues(&m).unwrap();
        assert_eq!(vals, vec![-1.0; 4]);
    }

    #[test]
    fn m_delta_spectrum_matches_dense_eig() {
        for (r, n, seed) in [(3usize, 17usize, 1u64), (8, 64, 2), (5, 40, 3), (16, 16, 4)] {
            let a = sample_matrix(r, n, &InitSpec::kaiming(0.4, seed)).unwrap();
            let fast = m_delta_spectrum(&a).unwrap();
            let dense = sym_eigvalues(&m_delta(&a)).unwrap();
            assert_eq!(fast.len(), dense.len());
            for (f, d) in fast.iter().zip(&dense) {
                assert!((f - d).abs() <= 1e-9, "r={r} n={n}: {f} vs {d}");
            }
        }
    }

    #[test]
    fn m_delta_spectral_norm_matches_dense() {
        for (r, n, seed) in [(4usize, 24usize, 5u64), (12, 48, 6), (32, 32, 7)] {
            let a = sample_matrix(r, n, &InitSpec::kaiming(0.9, seed)).unwrap();
            let fast = m_delta_spectral_norm(&a, 99).unwrap();
            let dense = sym_eigvalues(&m_delta(&a)).unwrap();
            let expect = dense.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
            assert!((fast - expect).abs() <= 1e-6 * expect.max(1.0), "{fast} vs {expect}");
        }
    }

    #[test]
    fn gp_cov_basics() {
        let net = Network::build_base(&spec(vec![4, 7, 3], Activation::Relu, 18)).unwrap();
        // batch of one: 1x1 Gram holding the squared norm
        let x = sample_std_normal_vec(4, 60);
        let (_, t) = net.forward(&x).unwrap();
        let grams = gp_cov(std::slice::from_ref(&t)).unwrap();
        assert!((grams[0].get(0, 0) - linalg::dot(&x, &x)).abs() < 1e-12);
        // orthonormal inputs give the identity at the first layer
        let e0 = vec![1.0, 0.0, 0.0, 0.0];
        let e1 = vec![0.0, 1.0, 0.0, 0.0];
        let (_, t0) = net.forward(&e0).unwrap();
        let (_, t1) = net.forward(&e1).unwrap();
        let grams = gp_cov(&[t0, t1]).unwrap();
        assert!((grams[0].get(0, 0) - 1.0).abs() < 1e-15);
        assert!((grams[0].get(1, 1) - 1.0).abs() < 1e-15);
        assert!(grams[0].get(0, 1).abs() < 1e-15);
        // PSD on a random batch
        let traces: Vec<_> = (0..6)
            .map(|s| net.forward(&sample_std_normal_vec(4, 400 + s)).unwrap().1)
            .collect();
        for g in gp_cov(&traces).unwrap() {
            let vals = sym_eigvalues(&g).unwrap();
            assert!(vals[0] >= -1e-10, "min eigenvalue {}", vals[0]);
        }
        assert!(gp_cov(&[]).is_err());
    }

    #[test]
    fn oold_finite_width_exactness() {
        // adapter on the network's head (the layer the theorem's depth-l
        // kernel belongs to), B = 0, shared base weights: the empirical
        // kernel difference equals Δ_r to machine precision for every k
        for width in [16usize, 48] {
            for seed in 0..5u64 {
                let base =
                    Network::build_base(&spec(vec![6, width, width, 8], Activation::Relu, seed)).unwrap();
                let lora = base
                    .attach_lora(
                        &LoraConfig::new(vec![2], 4, InitSpec::kaiming(1.0 / 3.0, 50 + seed))
                            .with_freeze_base(false),
                    )
                    .unwrap();
                let a = lora.layers[2].adapter.as_ref().unwrap().a.clone();
                let x = sample_std_normal_vec(6, 600 + seed);
                let xp = sample_std_normal_vec(6, 700 + seed);
                let (_, tx) = base.forward(&x).unwrap();
                let (_, txp) = base.forward(&xp).unwrap();
                let dr = delta_r(&tx, &txp, &a, 2).unwrap();
                for k in 0..8 {
                    let kf = empirical_ntk(&base, &x, &xp, k).unwrap();
                    let kl = empirical_ntk(&lora, &x, &xp, k).unwrap();
                    assert!(
                        ((kl - kf) - dr).abs() <= 1e-10,
                        "width {width} seed {seed} k {k}: {} vs {}",
                        kl - kf,
                        dr
                    );
                }
            }
        }
    }

    #[test]
    fn oold_middle_layer_difference_carries_backprop_gram() {
        // with the adapter on a middle layer, the full network's kernel
        // difference is Δ_r times the head-path Gram ⟨δ(x), δ(x′)⟩ at that
        // layer; k = single output so the factor is a scalar we can compute
        let base = Network::build_base(&spec(vec![4, 12, 1], Activation::Tanh, 33)).unwrap();
        let lora = base
            .attach_lora(
                &LoraConfig::new(vec![0], 3, InitSpec::kaiming(1.0 / 3.0, 34)).with_freeze_base(false),
            )
            .unwrap();
        let a = lora.layers[0].adapter.as_ref().unwrap().a.clone();
        let x = sample_std_normal_vec(4, 35);
        let xp = sample_std_normal_vec(4, 36);
        let (_, tx) = base.forward(&x).unwrap();
        let (_, txp) = base.forward(&xp).unwrap();
        let dx = base.output_deltas(&tx, 0).unwrap();
        let dxp = base.output_deltas(&txp, 0).unwrap();
        let gram = linalg::dot(&dx[0], &dxp[0]);
        let dr = delta_r(&tx, &txp, &a, 0).unwrap();
        let kf = empirical_ntk(&base, &x, &xp, 0).unwrap();
        let kl = empirical_ntk(&lora, &x, &xp, 0).unwrap();
        assert!(((kl - kf) - gram * dr).abs() <= 1e-12 * (kf.abs() + 1.0));
    }

    #[test]
    fn kernel_report_serializes() {
        let base = Network::build_base(&spec(vec![4, 8, 2], Activation::Relu, 77)).unwrap();
        let lora = base
            .attach_lora(&LoraConfig::new(vec![1], 2, InitSpec::kaiming(1.0 / 3.0, 78)))
            .unwrap();
        let x = sample_std_normal_vec(4, 80);
        let xp = sample_std_normal_vec(4, 81);
        let rep = KernelReport::build(&lora, &x, &xp).unwrap();
        assert_eq!(rep.mode, KernelMode::Lora);
        let json = rep.to_json();
        assert!(json.contains("\"mode\""));
        assert!(json.contains("\"delta\""));
        let back: KernelReport = serde_json::from_str(&json).unwrap();
        assert_eq!(rep, back);
    }
}
