//! End-to-end training sanity: PCD on a simple two-mode mixture should
//! lower the free energy of held-out data relative to initialization.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rgc_core::mcrbm::{train, Hyperparams, McRbmModel};
use rgc_core::rates::RateMatrix;

fn mixture(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |(i, _)| {
        let mode = if i % 2 == 0 { 1.0 } else { -1.0 };
        mode + 0.3 * rng.sample::<f64, _>(StandardNormal)
    })
}

fn as_rates(values: Array2<f64>) -> RateMatrix {
    let (n_s, n_n) = values.dim();
    RateMatrix {
        values,
        sample_times_s: (0..n_s).map(|i| 0.005 + i as f64 * 0.01).collect(),
        neuron_ids: (0..n_n as u64).collect(),
        neuron_pos_um: vec![(21.0, 21.0); n_n],
        labels: vec![0; n_s],
        standardized: true,
        col_means: Some(vec![0.0; n_n]),
        col_stds: Some(vec![1.0; n_n]),
        bin_s: 0.01,
    }
}

#[test]
fn training_lowers_held_out_free_energy() {
    let dim = 2;
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train_data = as_rates(mixture(400, dim, &mut rng));
        let held_out = mixture(100, dim, &mut rng);

        let mut h = Hyperparams::new(dim);
        h.n_mean = 4;
        h.n_factors = 4;
        h.n_cov = 2;
        h.minibatch_size = 50;
        h.n_chains = 50;
        h.learning_rate = 5e-3;
        h.epochs = 120;
        h.seed = seed;

        let init = McRbmModel::init(&h).unwrap();
        let before = init.mean_free_energy(&held_out.view()).unwrap();
        let (model, diags) = train(&train_data, &h).unwrap();
        let after = model.mean_free_energy(&held_out.view()).unwrap();
        assert_eq!(diags.len(), 120);
        assert!(
            after < before,
            "seed {seed}: held-out free energy {after} not below initial {before}"
        );
        assert!(model.w.iter().all(|v| v.is_finite()));
    }
}
