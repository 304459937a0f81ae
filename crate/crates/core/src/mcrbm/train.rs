//! Persistent-contrastive-divergence training.
//!
//! Positive statistics come from the data minibatch, negative statistics
//! from persistent fantasy chains advanced by one block-Gibbs sweep on the
//! exact conditionals. After every update the pooling matrix is clipped to
//! non-positive entries and factor columns are renormalized.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::rates::RateMatrix;

use super::{normalize_columns, Gradients, Hyperparams, McRbmModel};

/// Per-minibatch diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub recon_error: f64,
    pub free_energy_gap: f64,
}

/// Per-epoch diagnostics averaged over minibatches.
#[derive(Debug, Clone, Copy)]
pub struct EpochDiagnostics {
    pub epoch: u64,
    pub recon_error: f64,
    pub free_energy_gap: f64,
}

/// Owns the model plus transient training state (velocities, RNG).
pub struct Trainer {
    pub model: McRbmModel,
    velocity: Gradients,
    rng: ChaCha8Rng,
    /// Momentum is used only once this is set (after the warmup epochs).
    pub momentum_active: bool,
    pub epoch: u64,
}

impl Trainer {
    pub fn new(hyper: &Hyperparams) -> Result<Trainer> {
        let model = McRbmModel::init(hyper)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        rng.set_stream(1);
        Ok(Trainer {
            velocity: Gradients::zeros(hyper),
            model,
            rng,
            momentum_active: false,
            epoch: 0,
        })
    }

    pub fn from_model(model: McRbmModel) -> Trainer {
        let mut rng = ChaCha8Rng::seed_from_u64(model.hyper.seed);
        rng.set_stream(1);
        let epoch = model.epochs_trained;
        Trainer {
            velocity: Gradients::zeros(&model.hyper),
            momentum_active: epoch >= model.hyper.momentum_start_epoch,
            model,
            rng,
            epoch,
        }
    }

    /// Advance every persistent chain by one block-Gibbs sweep:
    /// sample hiddens from the current visibles, then visibles from those
    /// hiddens.
    fn advance_chains(&mut self) -> Result<()> {
        let (p_m, p_c) = self.model.infer_hidden_batch(&self.model.chains.view())?;
        let n_chains = self.model.chains.nrows();
        let mut new_chains = Array2::zeros(self.model.chains.raw_dim());
        for k in 0..n_chains {
            let h_m = Array1::from_shape_fn(p_m.ncols(), |j| f64::from(self.rng.random::<f64>() < p_m[(k, j)]));
            let h_c = Array1::from_shape_fn(p_c.ncols(), |j| f64::from(self.rng.random::<f64>() < p_c[(k, j)]));
            let v = self.model.sample_visible(&h_m.view(), &h_c.view(), &mut self.rng)?;
            new_chains.row_mut(k).assign(&v);
        }
        self.model.chains = new_chains;
        Ok(())
    }

    /// One PCD parameter update from a data minibatch.
    pub fn pcd_step(&mut self, batch: &ArrayView2<f64>) -> Result<StepDiagnostics> {
        if batch.nrows() == 0 {
            return Err(CoreError::invalid("batch", "must be nonempty"));
        }
        let pos = self.model.free_energy_grads_batch(batch)?;
        self.advance_chains()?;
        let neg = self.model.free_energy_grads_batch(&self.model.chains.view())?;

        let h = self.model.hyper.clone();
        let momentum = if self.momentum_active { h.momentum } else { 0.0 };
        let lr = h.learning_rate;
        let wd = h.weight_decay;

        // NLL gradient is E_data[dF] - E_model[dF].
        let step = |vel: &mut Array2<f64>, theta: &mut Array2<f64>, gp: &Array2<f64>, gn: &Array2<f64>, decay: f64| {
            *vel *= momentum;
            *vel -= &((gp - gn + &(theta.view().to_owned() * decay)) * lr);
            *theta += &*vel;
        };
        let step1 = |vel: &mut Array1<f64>, theta: &mut Array1<f64>, gp: &Array1<f64>, gn: &Array1<f64>| {
            *vel *= momentum;
            *vel -= &((gp - gn) * lr);
            *theta += &*vel;
        };

        for (name, grad) in [("positive", &pos), ("negative", &neg)] {
            if let Some(tensor) = grad.first_nan_tensor() {
                return Err(CoreError::GradientNaN {
                    tensor: format!("{tensor} ({name} phase)"),
                    epoch: self.epoch,
                    batch: batch.nrows(),
                });
            }
        }

        step(&mut self.velocity.w, &mut self.model.w, &pos.w, &neg.w, wd);
        step1(&mut self.velocity.a, &mut self.model.a, &pos.a, &neg.a);
        step1(&mut self.velocity.c, &mut self.model.c, &pos.c, &neg.c);
        step(&mut self.velocity.r, &mut self.model.r, &pos.r, &neg.r, wd);
        step(&mut self.velocity.p, &mut self.model.p, &pos.p, &neg.p, wd);
        step1(&mut self.velocity.d, &mut self.model.d, &pos.d, &neg.d);

        // Projection: non-positive pooling, unit-norm factor columns.
        self.model.p.mapv_inplace(|x| x.min(0.0));
        normalize_columns(&mut self.model.r);

        let gap = self.model.mean_free_energy(batch)?
            - self.model.mean_free_energy(&self.model.chains.view())?;
        let recon = self.reconstruction_error(batch)?;
        Ok(StepDiagnostics { recon_error: recon, free_energy_gap: gap })
    }

    /// Mean squared error between a few batch rows and their conditional
    /// mean under the inferred (soft) hidden states.
    fn reconstruction_error(&self, batch: &ArrayView2<f64>) -> Result<f64> {
        let n = batch.nrows().min(16);
        let sub = batch.slice(ndarray::s![..n, ..]);
        let (p_m, p_c) = self.model.infer_hidden_batch(&sub)?;
        let mut err = 0.0;
        for k in 0..n {
            let m = self.model.visible_precision(&p_c.row(k))?;
            let l = super::linalg::cholesky(&m.view())?;
            let b = self.model.w.dot(&p_m.row(k)) + &self.model.a;
            let vhat = super::linalg::cholesky_solve(&l, &b.view());
            let diff = sub.row(k).to_owned() - vhat;
            err += diff.dot(&diff) / sub.ncols() as f64;
        }
        Ok(err / n as f64)
    }
}

/// Train a model on a standardized rate matrix: shuffled rows, minibatches
/// of `hyper.minibatch_size`, one PCD update per minibatch. Deterministic
/// given `hyper.seed`.
pub fn train(rates: &RateMatrix, hyper: &Hyperparams) -> Result<(McRbmModel, Vec<EpochDiagnostics>)> {
    if !rates.standardized {
        return Err(CoreError::NotStandardized);
    }
    if rates.n_neurons() != hyper.n_vis {
        return Err(CoreError::DimensionMismatch(format!(
            "rate matrix has {} neurons, hyperparams expect {}",
            rates.n_neurons(),
            hyper.n_vis
        )));
    }
    let mut trainer = Trainer::new(hyper)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    shuffle_rng.set_stream(2);
    let n = rates.n_samples();
    let mut order: Vec<usize> = (0..n).collect();
    let mut diagnostics = Vec::with_capacity(hyper.epochs as usize);
    for epoch in 0..hyper.epochs {
        trainer.epoch = epoch;
        trainer.momentum_active = epoch >= hyper.momentum_start_epoch;
        // Fisher-Yates shuffle.
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut recon = 0.0;
        let mut gap = 0.0;
        let mut batches = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + hyper.minibatch_size).min(n);
            let mut batch = Array2::zeros((end - start, rates.n_neurons()));
            for (row, &idx) in order[start..end].iter().enumerate() {
                batch.row_mut(row).assign(&rates.values.index_axis(Axis(0), idx));
            }
            let diag = trainer.pcd_step(&batch.view())?;
            recon += diag.recon_error;
            gap += diag.free_energy_gap;
            batches += 1;
            start = end;
        }
        trainer.model.epochs_trained = epoch + 1;
        diagnostics.push(EpochDiagnostics {
            epoch,
            recon_error: recon / batches.max(1) as f64,
            free_energy_gap: gap / batches.max(1) as f64,
        });
    }
    Ok((trainer.model, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcrbm::Hyperparams;

    fn small_hyper() -> Hyperparams {
        let mut h = Hyperparams::new(3);
        h.n_mean = 4;
        h.n_factors = 4;
        h.n_cov = 4;
        h.minibatch_size = 10;
        h.n_chains = 10;
        h.seed = 12;
        h
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged_but_advances_chains() {
        let mut h = small_hyper();
        h.learning_rate = 0.0;
        let mut t = Trainer::new(&h).unwrap();
        let before = t.model.clone();
        let batch = random_batch(10, 3, 1);
        t.pcd_step(&batch.view()).unwrap();
        assert_eq!(t.model.w, before.w);
        assert_eq!(t.model.a, before.a);
        assert_eq!(t.model.c, before.c);
        assert_eq!(t.model.r, before.r);
        assert_eq!(t.model.p, before.p);
        assert_eq!(t.model.d, before.d);
        assert_ne!(t.model.chains, before.chains);
    }

    #[test]
    fn projection_invariants_hold_after_steps() {
        let h = small_hyper();
        let mut t = Trainer::new(&h).unwrap();
        for seed in 0..20 {
            let batch = random_batch(10, 3, seed);
            t.pcd_step(&batch.view()).unwrap();
            assert!(t.model.p.iter().all(|&x| x <= 0.0));
            for col in t.model.r.columns() {
                assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let h = small_hyper();
        let mut t = Trainer::new(&h).unwrap();
        let batch = Array2::<f64>::zeros((0, 3));
        assert!(t.pcd_step(&batch.view()).is_err());
    }

    fn matrix_from(values: Array2<f64>) -> RateMatrix {
        let (n_s, n_n) = values.dim();
        RateMatrix {
            values,
            sample_times_s: (0..n_s).map(|i| i as f64 * 0.01 + 0.005).collect(),
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
    fn zero_epochs_returns_initialized_model() {
        let mut h = small_hyper();
        h.epochs = 0;
        let rm = matrix_from(random_batch(50, 3, 2));
        let (model, diags) = train(&rm, &h).unwrap();
        assert_eq!(model.epochs_trained, 0);
        assert!(diags.is_empty());
        assert_eq!(model.w, McRbmModel::init(&h).unwrap().w);
    }

    #[test]
    fn training_is_deterministic() {
        let mut h = small_hyper();
        h.epochs = 3;
        let rm = matrix_from(random_batch(60, 3, 3));
        let (m1, _) = train(&rm, &h).unwrap();
        let (m2, _) = train(&rm, &h).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn non_standardized_input_is_rejected() {
        let h = small_hyper();
        let mut rm = matrix_from(random_batch(30, 3, 4));
        rm.standardized = false;
        assert!(matches!(train(&rm, &h), Err(CoreError::NotStandardized)));
    }
}
