//! Property tests: exact kernel symmetry, serialization round trips, and
//! sampler determinism over randomized shapes and seeds.

use proptest::prelude::*;

use ttrlab::attacks::{gen_blobs, upa_flip, BlobSpec, LabeledDataset};
use ttrlab::kernels::{delta_r, empirical_ntk, gp_cov};
use ttrlab::linalg::{sample_matrix, sample_std_normal_vec, InitSpec};
use ttrlab::network::{Activation, LoraConfig, Network, NetworkSpec};

fn make_net(d0: usize, hidden: usize, d_out: usize, act: Activation, seed: u64) -> Network {
    let spec = NetworkSpec::new(
        vec![d0, hidden, d_out],
        act,
        InitSpec::kaiming(1.0 / 3.0, seed),
    );
    Network::build_base(&spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kernel_ops_are_exactly_symmetric(
        seed in 0u64..1000,
        d0 in 2usize..6,
        hidden in 3usize..12,
        act_pick in 0u8..3,
    ) {
        let act = match act_pick { 0 => Activation::Relu, 1 => Activation::Tanh, _ => Activation::Identity };
        let net = make_net(d0, hidden, 3, act, seed);
        let x = sample_std_normal_vec(d0, seed.wrapping_add(1));
        let xp = sample_std_normal_vec(d0, seed.wrapping_add(2));
        for k in 0..3 {
            let ab = empirical_ntk(&net, &x, &xp, k).unwrap();
            let ba = empirical_ntk(&net, &xp, &x, k).unwrap();
            prop_assert_eq!(ab, ba);
        }
        let a = sample_matrix(2, hidden, &InitSpec::kaiming(0.4, seed.wrapping_add(3))).unwrap();
        let (_, tx) = net.forward(&x).unwrap();
        let (_, txp) = net.forward(&xp).unwrap();
        let d_ab = delta_r(&tx, &txp, &a, 1).unwrap();
        let d_ba = delta_r(&txp, &tx, &a, 1).unwrap();
        prop_assert_eq!(d_ab, d_ba);
        let grams = gp_cov(&[tx, txp]).unwrap();
        for g in grams {
            prop_assert_eq!(g.get(0, 1), g.get(1, 0));
        }
    }

    #[test]
    fn lora_b_zero_forward_equivalence_any_seed(
        seed in 0u64..2000,
        rank in 1usize..5,
    ) {
        let net = make_net(4, 10, 2, Activation::Relu, seed);
        // layer 0 is 10x4, so ranks 1..=4 stay within min(fan_in, fan_out)
        let lora = net
            .attach_lora(&LoraConfig::new(vec![0], rank, InitSpec::kaiming(1.0 / 3.0, seed ^ 0xABCD)))
            .unwrap();
        let x = sample_std_normal_vec(4, seed.wrapping_add(7));
        let (a, _) = net.forward(&x).unwrap();
        let (b, _) = lora.forward(&x).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dataset_csv_roundtrip(seed in 0u64..500, n in 1usize..20, rho in 0.0f64..1.0) {
        let data = gen_blobs(&BlobSpec {
            n_per_class: n,
            dims: 4,
            separation: 2.0,
            spread: 1.0,
            seed,
        })
        .unwrap();
        let poisoned = upa_flip(&data, rho, seed ^ 0x55).unwrap();
        let text = poisoned.to_csv();
        let back = LabeledDataset::from_csv(&text, poisoned.seed).unwrap();
        prop_assert_eq!(poisoned, back);
    }

    #[test]
    fn network_blob_roundtrip(seed in 0u64..500, rank in 1usize..4) {
        let net = make_net(3, 8, 2, Activation::Tanh, seed);
        let lora = net
            .attach_lora(
                &LoraConfig::new(vec![0], rank, InitSpec::kaiming(0.2, seed ^ 0x99))
                    .with_b_init(InitSpec::kaiming(0.1, seed ^ 0x77)),
            )
            .unwrap();
        let text = lora.save_text();
        let back = Network::load_text(&text).unwrap();
        prop_assert_eq!(lora, back);
    }

    #[test]
    fn sampler_is_deterministic(seed in 0u64..5000, rows in 1usize..8, cols in 1usize..20) {
        let spec = InitSpec::kaiming(0.5, seed);
        let a = sample_matrix(rows, cols, &spec).unwrap();
        let b = sample_matrix(rows, cols, &spec).unwrap();
        prop_assert_eq!(a, b);
    }
}
