//! Mean-covariance restricted Boltzmann machine: energies, conditionals,
//! sampling, free energy, and persistent-contrastive-divergence training.
//!
//! Visible units are linear with unit Gaussian noise; hidden units split
//! into binary mean units (bias `c`, weights `W`) and binary covariance
//! units pooled over factor projections (factor weights `R`, pooling `P`
//! with non-positive entries, bias `d`).

pub mod checkpoint;
pub mod linalg;
pub mod train;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

pub use train::{train, EpochDiagnostics, StepDiagnostics, Trainer};

/// Training and architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub n_vis: usize,
    pub n_mean: usize,
    pub n_factors: usize,
    pub n_cov: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Momentum kicks in from this epoch on.
    pub momentum_start_epoch: u64,
    pub weight_decay: f64,
    pub minibatch_size: usize,
    pub n_chains: usize,
    pub epochs: u64,
    /// Floor added to the conditional precision (the identity contributed by
    /// the mean-side quadratic); keeps the precision positive definite at
    /// h_c = 0.
    pub precision_floor: f64,
    pub seed: u64,
}

impl Hyperparams {
    /// Desk-scale defaults for a given visible dimension.
    pub fn new(n_vis: usize) -> Self {
        Hyperparams {
            n_vis,
            n_mean: 64,
            n_factors: 128,
            n_cov: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            momentum_start_epoch: 5,
            weight_decay: 1e-4,
            minibatch_size: 100,
            n_chains: 100,
            epochs: 20,
            precision_floor: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vis == 0 || self.n_mean == 0 || self.n_factors == 0 || self.n_cov == 0 {
            return Err(CoreError::invalid("hyperparams", "all layer sizes must be >= 1"));
        }
        if self.minibatch_size == 0 {
            return Err(CoreError::invalid("minibatch_size", "must be >= 1"));
        }
        if self.n_chains == 0 {
            return Err(CoreError::invalid("n_chains", "must be >= 1"));
        }
        if !(self.precision_floor > 0.0) {
            return Err(CoreError::invalid("precision_floor", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::invalid("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Binary hidden configuration of one sample: mean units then covariance
/// units.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatentState {
    pub h_m: Vec<u8>,
    pub h_c: Vec<u8>,
}

impl LatentState {
    /// Canonical injective bitstring key.
    pub fn key(&self) -> String {
        let mut s = String::with_capacity(self.h_m.len() + self.h_c.len() + 1);
        for &b in &self.h_m {
            s.push(if b != 0 { '1' } else { '0' });
        }
        s.push('|');
        for &b in &self.h_c {
            s.push(if b != 0 { '1' } else { '0' });
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Threshold probabilities at 0.5; ties map to 1.
    Map,
    /// Bernoulli draw with the given seed.
    Sample(u64),
}

/// Per-tensor gradient (or velocity) container.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w: Array2<f64>,
    pub a: Array1<f64>,
    pub c: Array1<f64>,
    pub r: Array2<f64>,
    pub p: Array2<f64>,
    pub d: Array1<f64>,
}

impl Gradients {
    pub fn zeros(h: &Hyperparams) -> Self {
        Gradients {
            w: Array2::zeros((h.n_vis, h.n_mean)),
            a: Array1::zeros(h.n_vis),
            c: Array1::zeros(h.n_mean),
            r: Array2::zeros((h.n_vis, h.n_factors)),
            p: Array2::zeros((h.n_factors, h.n_cov)),
            d: Array1::zeros(h.n_cov),
        }
    }

    pub fn first_nan_tensor(&self) -> Option<&'static str> {
        if self.w.iter().any(|v| v.is_nan()) {
            Some("W")
        } else if self.a.iter().any(|v| v.is_nan()) {
            Some("a")
        } else if self.c.iter().any(|v| v.is_nan()) {
            Some("c")
        } else if self.r.iter().any(|v| v.is_nan()) {
            Some("R")
        } else if self.p.iter().any(|v| v.is_nan()) {
            Some("P")
        } else if self.d.iter().any(|v| v.is_nan()) {
            Some("d")
        } else {
            None
        }
    }
}

/// The model: all learned parameters plus persistent fantasy particles.
#[derive(Debug, Clone, PartialEq)]
pub struct McRbmModel {
    /// Visible-to-mean-hidden weights, n_vis x n_mean.
    pub w: Array2<f64>,
    /// Visible bias.
    pub a: Array1<f64>,
    /// Mean-hidden bias.
    pub c: Array1<f64>,
    /// Visible-to-factor weights, n_vis x n_factors; unit-norm columns.
    pub r: Array2<f64>,
    /// Factor-to-covariance-hidden pooling, n_factors x n_cov; entries <= 0.
    pub p: Array2<f64>,
    /// Covariance-hidden bias.
    pub d: Array1<f64>,
    pub hyper: Hyperparams,
    /// Persistent chains, n_chains x n_vis.
    pub chains: Array2<f64>,
    pub epochs_trained: u64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Energy of a joint binary configuration: -a'v - b'h - v'Wh.
pub fn energy_binary(
    v: &ArrayView1<f64>,
    h: &ArrayView1<f64>,
    a: &ArrayView1<f64>,
    b: &ArrayView1<f64>,
    w: &ArrayView2<f64>,
) -> Result<f64> {
    if v.len() != a.len() || h.len() != b.len() || w.nrows() != v.len() || w.ncols() != h.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "energy_binary: v {}, h {}, a {}, b {}, W {}x{}",
            v.len(),
            h.len(),
            a.len(),
            b.len(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(-a.dot(v) - b.dot(h) - v.dot(&w.dot(h)))
}

impl McRbmModel {
    /// Initialize a fresh model: small random weights, non-positive
    /// normalized pooling, and covariance biases at -1 for early sparsity.
    pub fn init(hyper: &Hyperparams) -> Result<McRbmModel> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut randn = |shape: (usize, usize)| {
            Array2::from_shape_fn(shape, |_| {
                let z: f64 = rng.sample(StandardNormal);
                0.01 * z
            })
        };
        let w = randn((hyper.n_vis, hyper.n_mean));
        let mut r = randn((hyper.n_vis, hyper.n_factors));
        let mut p = randn((hyper.n_factors, hyper.n_cov)).mapv(|x| -x.abs());
        normalize_columns(&mut r);
        // Column-normalize the pooling matrix by L1 mass.
        for mut col in p.columns_mut() {
            let mass: f64 = col.iter().map(|x| x.abs()).sum();
            if mass > 0.0 {
                col.mapv_inplace(|x| x / mass);
            }
        }
        let chains = Array2::from_shape_fn((hyper.n_chains, hyper.n_vis), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z
        });
        Ok(McRbmModel {
            w,
            a: Array1::zeros(hyper.n_vis),
            c: Array1::zeros(hyper.n_mean),
            r,
            p,
            d: Array1::from_elem(hyper.n_cov, -1.0),
            hyper: hyper.clone(),
            chains,
            epochs_trained: 0,
        })
    }

    fn check_visible(&self, v: &ArrayView1<f64>) -> Result<()> {
        if v.len() != self.hyper.n_vis {
            return Err(CoreError::DimensionMismatch(format!(
                "visible vector has length {}, model expects {}",
                v.len(),
                self.hyper.n_vis
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("visible vector".into()));
        }
        Ok(())
    }

    /// Gaussian-visible mean energy: +1/2 (v-a)'(v-a) - c'h_m - v'W h_m.
    pub fn energy_mean(&self, v: &ArrayView1<f64>, h_m: &ArrayView1<f64>) -> Result<f64> {
        self.check_visible(v)?;
        if h_m.len() != self.hyper.n_mean {
            return Err(CoreError::DimensionMismatch("h_m length".into()));
        }
        let diff = v.to_owned() - &self.a;
        Ok(0.5 * diff.dot(&diff) - self.c.dot(h_m) - v.dot(&self.w.dot(h_m)))
    }

    /// Covariance energy: -d'h_c - ((R'v) o (R'v))' P h_c.
    pub fn energy_cov(&self, v: &ArrayView1<f64>, h_c: &ArrayView1<f64>) -> Result<f64> {
        self.check_visible(v)?;
        if h_c.len() != self.hyper.n_cov {
            return Err(CoreError::DimensionMismatch("h_c length".into()));
        }
        let f = self.r.t().dot(v);
        let s = f.mapv(|x| x * x);
        Ok(-self.d.dot(h_c) - s.dot(&self.p.dot(h_c)))
    }

    pub fn total_energy(
        &self,
        v: &ArrayView1<f64>,
        h_m: &ArrayView1<f64>,
        h_c: &ArrayView1<f64>,
    ) -> Result<f64> {
        Ok(self.energy_mean(v, h_m)? + self.energy_cov(v, h_c)?)
    }

    /// Posterior activation probabilities of (mean, covariance) hidden units.
    pub fn infer_hidden(&self, v: &ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        self.check_visible(v)?;
        let p_m = (self.w.t().dot(v) + &self.c).mapv(sigmoid);
        let f = self.r.t().dot(v);
        let s = f.mapv(|x| x * x);
        let p_c = (self.p.t().dot(&s) + &self.d).mapv(sigmoid);
        Ok((p_m, p_c))
    }

    /// Batched [`Self::infer_hidden`]: rows are samples.
    pub fn infer_hidden_batch(&self, v: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if v.ncols() != self.hyper.n_vis {
            return Err(CoreError::DimensionMismatch("batch column count".into()));
        }
        let p_m = (v.dot(&self.w) + &self.c).mapv(sigmoid);
        let s = v.dot(&self.r).mapv(|x| x * x);
        let p_c = (s.dot(&self.p) + &self.d).mapv(sigmoid);
        Ok((p_m, p_c))
    }

    /// Infer the binary latent state of one rate sample.
    pub fn encode(&self, v: &ArrayView1<f64>, mode: EncodeMode) -> Result<LatentState> {
        let (p_m, p_c) = self.infer_hidden(v)?;
        let state = match mode {
            EncodeMode::Map => LatentState {
                h_m: p_m.iter().map(|&p| u8::from(p >= 0.5)).collect(),
                h_c: p_c.iter().map(|&p| u8::from(p >= 0.5)).collect(),
            },
            EncodeMode::Sample(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut draw = |p: &Array1<f64>| -> Vec<u8> {
                    p.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect()
                };
                let h_m = draw(&p_m);
                let h_c = draw(&p_c);
                LatentState { h_m, h_c }
            }
        };
        Ok(state)
    }

    /// Conditional precision of the visibles: eps*I + R diag(-P'h_c) R'.
    pub fn visible_precision(&self, h_c: &ArrayView1<f64>) -> Result<Array2<f64>> {
        if h_c.len() != self.hyper.n_cov {
            return Err(CoreError::DimensionMismatch("h_c length".into()));
        }
        let weights = self.p.dot(h_c).mapv(|x| -x);
        let mut scaled = self.r.clone();
        for (mut col, &wf) in scaled.columns_mut().into_iter().zip(weights.iter()) {
            // Negative pooled weights would make the precision indefinite;
            // they cannot occur while P <= 0.
            let s = wf.max(0.0).sqrt();
            col.mapv_inplace(|x| x * s);
        }
        let mut m = scaled.dot(&scaled.t());
        for i in 0..self.hyper.n_vis {
            m[(i, i)] += self.hyper.precision_floor;
        }
        Ok(m)
    }

    /// Draw v ~ N(Sigma (W h_m + a), Sigma) with Sigma the inverse of
    /// [`Self::visible_precision`].
    pub fn sample_visible(
        &self,
        h_m: &ArrayView1<f64>,
        h_c: &ArrayView1<f64>,
        rng: &mut impl Rng,
    ) -> Result<Array1<f64>> {
        if h_m.len() != self.hyper.n_mean {
            return Err(CoreError::DimensionMismatch("h_m length".into()));
        }
        let m = self.visible_precision(h_c)?;
        let l = linalg::cholesky(&m.view())?;
        let b = self.w.dot(h_m) + &self.a;
        let mu = linalg::cholesky_solve(&l, &b.view());
        let z = Array1::from_shape_fn(self.hyper.n_vis, |_| {
            let z: f64 = rng.sample(StandardNormal);
            z
        });
        Ok(mu + linalg::solve_lower_transpose(&l, &z.view()))
    }

    pub fn sample_visible_seeded(
        &self,
        h_m: &ArrayView1<f64>,
        h_c: &ArrayView1<f64>,
        seed: u64,
    ) -> Result<Array1<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_visible(h_m, h_c, &mut rng)
    }

    /// Free energy: marginalization over both binary hidden layers.
    pub fn free_energy(&self, v: &ArrayView1<f64>) -> Result<f64> {
        self.check_visible(v)?;
        let diff = v.to_owned() - &self.a;
        let mean_act = self.w.t().dot(v) + &self.c;
        let s = self.r.t().dot(v).mapv(|x| x * x);
        let cov_act = self.p.t().dot(&s) + &self.d;
        Ok(0.5 * diff.dot(&diff)
            - mean_act.iter().map(|&x| softplus(x)).sum::<f64>()
            - cov_act.iter().map(|&x| softplus(x)).sum::<f64>())
    }

    /// Mean free energy over rows.
    pub fn mean_free_energy(&self, v: &ArrayView2<f64>) -> Result<f64> {
        if v.ncols() != self.hyper.n_vis {
            return Err(CoreError::DimensionMismatch("batch column count".into()));
        }
        let n = v.nrows() as f64;
        let mean_act = v.dot(&self.w) + &self.c;
        let s = v.dot(&self.r).mapv(|x| x * x);
        let cov_act = s.dot(&self.p) + &self.d;
        let mut total = 0.0;
        for (row, va) in v.rows().into_iter().enumerate() {
            let diff = va.to_owned() - &self.a;
            total += 0.5 * diff.dot(&diff);
            total -= mean_act.row(row).iter().map(|&x| softplus(x)).sum::<f64>();
            total -= cov_act.row(row).iter().map(|&x| softplus(x)).sum::<f64>();
        }
        Ok(total / n)
    }

    /// Gradient of the free energy with respect to every parameter tensor,
    /// for a single visible vector.
    pub fn free_energy_grads(&self, v: &ArrayView1<f64>) -> Result<Gradients> {
        self.check_visible(v)?;
        let mut batch = Array2::zeros((1, self.hyper.n_vis));
        batch.row_mut(0).assign(v);
        self.free_energy_grads_batch(&batch.view())
    }

    /// Free-energy gradients averaged over the rows of a batch.
    pub fn free_energy_grads_batch(&self, v: &ArrayView2<f64>) -> Result<Gradients> {
        if v.ncols() != self.hyper.n_vis {
            return Err(CoreError::DimensionMismatch("batch column count".into()));
        }
        let b = v.nrows() as f64;
        let sig_m = (v.dot(&self.w) + &self.c).mapv(sigmoid);
        let f = v.dot(&self.r);
        let s = f.mapv(|x| x * x);
        let sig_g = (s.dot(&self.p) + &self.d).mapv(sigmoid);
        let ga = &self.a - &(v.sum_axis(Axis(0)) / b);
        let gc = -(sig_m.sum_axis(Axis(0)) / b);
        let gw = -(v.t().dot(&sig_m) / b);
        let gd = -(sig_g.sum_axis(Axis(0)) / b);
        let gp = -(s.t().dot(&sig_g) / b);
        let pooled = f * &sig_g.dot(&self.p.t());
        let gr = -(v.t().dot(&pooled) * (2.0 / b));
        Ok(Gradients { w: gw, a: ga, c: gc, r: gr, p: gp, d: gd })
    }
}

pub(crate) fn normalize_columns(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let norm = col.dot(&col).sqrt();
        // Skip columns already at unit norm so renormalization is idempotent
        // and a zero update is a strict no-op instead of a one-ulp drift.
        if norm > 0.0 && (norm - 1.0).abs() > 1e-12 {
            col.mapv_inplace(|x| x / norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_model(n_vis: usize, n_mean: usize, n_factors: usize, n_cov: usize, seed: u64) -> McRbmModel {
        let mut h = Hyperparams::new(n_vis);
        h.n_mean = n_mean;
        h.n_factors = n_factors;
        h.n_cov = n_cov;
        h.n_chains = 4;
        h.seed = seed;
        let mut model = McRbmModel::init(&h).unwrap();
        // Re-randomize at a useful magnitude for energy tests.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut fill = |m: &mut Array2<f64>| {
            m.mapv_inplace(|_| {
                let z: f64 = rng.sample(StandardNormal);
                0.5 * z
            })
        };
        fill(&mut model.w);
        fill(&mut model.r);
        fill(&mut model.p);
        model.p.mapv_inplace(|x| -x.abs());
        model.a.mapv_inplace(|_| rng.sample(StandardNormal));
        model.c.mapv_inplace(|_| rng.sample(StandardNormal));
        model.d.mapv_inplace(|_| rng.sample(StandardNormal));
        normalize_columns(&mut model.r);
        model
    }

    fn randn_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
    }

    #[test]
    fn binary_energy_hand_cases() {
        let zero2 = array![0.0, 0.0];
        let w = array![[0.0, 0.0], [0.0, 0.0]];
        assert_eq!(
            energy_binary(&zero2.view(), &zero2.view(), &zero2.view(), &zero2.view(), &w.view()).unwrap(),
            0.0
        );
        let v = array![1.0];
        let h = array![1.0];
        let a = array![0.0];
        let b = array![0.0];
        let w = array![[2.0]];
        assert_eq!(energy_binary(&v.view(), &h.view(), &a.view(), &b.view(), &w.view()).unwrap(), -2.0);
        // Decoupled case: W = 0.
        let v = array![1.0, 0.0];
        let h = array![1.0, 1.0];
        let a = array![0.3, 0.4];
        let b = array![-0.1, 0.2];
        let w0 = Array2::zeros((2, 2));
        let e = energy_binary(&v.view(), &h.view(), &a.view(), &b.view(), &w0.view()).unwrap();
        assert!((e - (-a.dot(&v) - b.dot(&h))).abs() < 1e-15);
    }

    #[test]
    fn mean_energy_hand_cases() {
        let mut model = tiny_model(2, 1, 2, 2, 0);
        model.a = array![0.7, -0.2];
        let h0 = array![0.0];
        assert!(model.energy_mean(&model.a.view(), &h0.view()).unwrap().abs() < 1e-15);
        let v = array![1.7, -0.2]; // a + e1
        assert!((model.energy_mean(&v.view(), &h0.view()).unwrap() - 0.5).abs() < 1e-12);

        model.a = array![0.0, 0.0];
        model.c = array![0.0];
        model.w = array![[1.0], [0.0]];
        let v = array![1.0, 0.0];
        let h1 = array![1.0];
        assert!((model.energy_mean(&v.view(), &h1.view()).unwrap() - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn cov_energy_hand_cases() {
        let mut model = tiny_model(1, 1, 1, 1, 0);
        model.r = array![[1.0]];
        model.p = array![[-1.0]];
        model.d = array![0.0];
        let v = array![2.0];
        let h0 = array![0.0];
        let h1 = array![1.0];
        assert_eq!(model.energy_cov(&v.view(), &h0.view()).unwrap(), 0.0);
        assert!((model.energy_cov(&v.view(), &h1.view()).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cov_energy_vanishes_orthogonal_to_factors() {
        let mut model = tiny_model(2, 1, 1, 1, 0);
        model.r = array![[1.0], [0.0]];
        model.d = array![0.0];
        let v = array![0.0, 3.0];
        let h1 = array![1.0];
        assert!(model.energy_cov(&v.view(), &h1.view()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn total_energy_is_additive_and_matches_independent_evaluation() {
        let model = tiny_model(3, 2, 4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let v = randn_vec(3, &mut rng);
            let h_m = randn_vec(2, &mut rng).mapv(|x| f64::from(x > 0.0));
            let h_c = randn_vec(2, &mut rng).mapv(|x| f64::from(x > 0.0));
            let total = model.total_energy(&v.view(), &h_m.view(), &h_c.view()).unwrap();
            let parts = model.energy_mean(&v.view(), &h_m.view()).unwrap()
                + model.energy_cov(&v.view(), &h_c.view()).unwrap();
            assert!((total - parts).abs() < 1e-12);
            // Independent scalar evaluation of the two energy terms.
            let mut e = 0.0;
            for i in 0..3 {
                e += 0.5 * (v[i] - model.a[i]).powi(2);
            }
            for j in 0..2 {
                e -= model.c[j] * h_m[j];
                for i in 0..3 {
                    e -= v[i] * model.w[(i, j)] * h_m[j];
                }
            }
            for k in 0..2 {
                e -= model.d[k] * h_c[k];
                for f in 0..4 {
                    let proj: f64 = (0..3).map(|i| v[i] * model.r[(i, f)]).sum();
                    e -= proj * proj * model.p[(f, k)] * h_c[k];
                }
            }
            assert!((total - e).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_hidden_hand_cases() {
        let mut model = tiny_model(1, 1, 1, 1, 1);
        model.c = array![0.0];
        model.d = array![0.0];
        let v0 = array![0.0];
        let (p_m, p_c) = model.infer_hidden(&v0.view()).unwrap();
        assert_eq!(p_m[0], 0.5);
        assert_eq!(p_c[0], 0.5);

        model.d = array![-50.0];
        let (_, p_c) = model.infer_hidden(&v0.view()).unwrap();
        assert!(p_c[0] < 1e-20);

        model.r = array![[1.0]];
        model.p = array![[-1.0]];
        model.d = array![3.0];
        let v = array![1.0];
        let (_, p_c) = model.infer_hidden(&v.view()).unwrap();
        assert!((p_c[0] - sigmoid(2.0)).abs() < 1e-12);
        assert!((p_c[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn infer_hidden_matches_energy_bit_flips() {
        let model = tiny_model(4, 3, 5, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let v = randn_vec(4, &mut rng);
            let (p_m, p_c) = model.infer_hidden(&v.view()).unwrap();
            let h_m = randn_vec(3, &mut rng).mapv(|x| f64::from(x > 0.0));
            let h_c = randn_vec(3, &mut rng).mapv(|x| f64::from(x > 0.0));
            for k in 0..3 {
                let mut hi = h_c.clone();
                hi[k] = 1.0;
                let mut lo = h_c.clone();
                lo[k] = 0.0;
                let de = model.total_energy(&v.view(), &h_m.view(), &hi.view()).unwrap()
                    - model.total_energy(&v.view(), &h_m.view(), &lo.view()).unwrap();
                assert!((p_c[k] - sigmoid(-de)).abs() < 1e-12);
            }
            for j in 0..3 {
                let mut hi = h_m.clone();
                hi[j] = 1.0;
                let mut lo = h_m.clone();
                lo[j] = 0.0;
                let de = model.total_energy(&v.view(), &hi.view(), &h_c.view()).unwrap()
                    - model.total_energy(&v.view(), &lo.view(), &h_c.view()).unwrap();
                assert!((p_m[j] - sigmoid(-de)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_tie_rule_and_determinism() {
        let mut model = tiny_model(1, 2, 1, 2, 2);
        model.w = Array2::zeros((1, 2));
        model.c = Array1::zeros(2);
        model.r = array![[1.0]];
        model.p = array![[0.0, 0.0]];
        model.d = Array1::zeros(2);
        let v = array![0.0];
        let s = model.encode(&v.view(), EncodeMode::Map).unwrap();
        assert_eq!(s.h_m, vec![1, 1]);
        assert_eq!(s.h_c, vec![1, 1]);
        let s2 = model.encode(&v.view(), EncodeMode::Map).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn saturated_sampling_matches_map() {
        let mut model = tiny_model(1, 2, 1, 2, 3);
        model.w = array![[60.0, -60.0]];
        model.c = Array1::zeros(2);
        model.r = array![[1.0]];
        model.p = array![[-30.0, -0.001]];
        model.d = array![-60.0, 60.0];
        let v = array![1.0];
        let map = model.encode(&v.view(), EncodeMode::Map).unwrap();
        for seed in 0..20 {
            let s = model.encode(&v.view(), EncodeMode::Sample(seed)).unwrap();
            assert_eq!(s, map);
        }
    }

    #[test]
    fn free_energy_matches_brute_force_enumeration() {
        let model = tiny_model(3, 2, 3, 2, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let v = randn_vec(3, &mut rng);
            let f = model.free_energy(&v.view()).unwrap();
            let mut z = 0.0;
            for mm in 0..4u32 {
                for cc in 0..4u32 {
                    let h_m = Array1::from_shape_fn(2, |j| f64::from(mm >> j & 1));
                    let h_c = Array1::from_shape_fn(2, |k| f64::from(cc >> k & 1));
                    z += (-model.total_energy(&v.view(), &h_m.view(), &h_c.view()).unwrap()).exp();
                }
            }
            assert!(((-f).exp() - z).abs() / z < 1e-10, "e^-F {} vs sum {}", (-f).exp(), z);
        }
    }

    #[test]
    fn free_energy_decoupled_closed_form() {
        let mut model = tiny_model(3, 2, 2, 2, 4);
        model.w.fill(0.0);
        model.r.fill(0.0);
        model.p.fill(0.0);
        model.a.fill(0.0);
        model.c.fill(0.0);
        model.d.fill(0.0);
        let v = array![1.0, -2.0, 0.5];
        let f = model.free_energy(&v.view()).unwrap();
        let expect = 0.5 * v.dot(&v) - 4.0 * std::f64::consts::LN_2;
        assert!((f - expect).abs() < 1e-12);
    }

    #[test]
    fn free_energy_invariant_under_hidden_permutation() {
        let mut model = tiny_model(3, 3, 4, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = randn_vec(3, &mut rng);
        let f0 = model.free_energy(&v.view()).unwrap();
        // Swap mean units 0 and 2 together with their parameters.
        let w0 = model.w.column(0).to_owned();
        let w2 = model.w.column(2).to_owned();
        model.w.column_mut(0).assign(&w2);
        model.w.column_mut(2).assign(&w0);
        model.c.swap(0, 2);
        // Swap covariance units 1 and 2.
        let p1 = model.p.column(1).to_owned();
        let p2 = model.p.column(2).to_owned();
        model.p.column_mut(1).assign(&p2);
        model.p.column_mut(2).assign(&p1);
        model.d.swap(1, 2);
        let f1 = model.free_energy(&v.view()).unwrap();
        assert!((f0 - f1).abs() < 1e-12);
    }

    #[test]
    fn sampler_reduces_to_gaussian_rbm_without_cov_units() {
        // h_c = 0, eps = 1, a = 0: v ~ N(W h_m, I).
        let mut model = tiny_model(2, 2, 2, 2, 20);
        model.a.fill(0.0);
        let h_m = array![1.0, 0.0];
        let h_c = array![0.0, 0.0];
        let mu_expect = model.w.dot(&h_m);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut mean = Array1::<f64>::zeros(2);
        for _ in 0..n {
            mean += &model.sample_visible(&h_m.view(), &h_c.view(), &mut rng).unwrap();
        }
        mean /= n as f64;
        let tol = 3.0 / (n as f64).sqrt();
        for i in 0..2 {
            assert!((mean[i] - mu_expect[i]).abs() < tol, "mean[{i}] {} vs {}", mean[i], mu_expect[i]);
        }
    }

    #[test]
    fn sampler_standard_normal_when_fully_off() {
        let mut model = tiny_model(2, 2, 2, 2, 21);
        model.a.fill(0.0);
        let h_m = array![0.0, 0.0];
        let h_c = array![0.0, 0.0];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut cov = Array2::<f64>::zeros((2, 2));
        for _ in 0..n {
            let v = model.sample_visible(&h_m.view(), &h_c.view(), &mut rng).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    cov[(i, j)] += v[i] * v[j];
                }
            }
        }
        cov /= n as f64;
        let mut frob = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                frob += (cov[(i, j)] - target).powi(2);
            }
        }
        assert!(frob.sqrt() < 0.05 * (2.0f64).sqrt(), "covariance error {}", frob.sqrt());
    }

    #[test]
    fn sampler_anisotropic_closed_form() {
        // One active factor along e1 with pooled weight 1: M = diag(2, 1).
        let mut model = tiny_model(2, 1, 1, 1, 22);
        model.a.fill(0.0);
        model.w.fill(0.0);
        model.r = array![[1.0], [0.0]];
        model.p = array![[-1.0]];
        let h_m = array![0.0];
        let h_c = array![1.0];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut v1, mut v2) = (0.0, 0.0);
        for _ in 0..n {
            let v = model.sample_visible(&h_m.view(), &h_c.view(), &mut rng).unwrap();
            v1 += v[0] * v[0];
            v2 += v[1] * v[1];
        }
        v1 /= n as f64;
        v2 /= n as f64;
        assert!((v1 - 0.5).abs() < 0.02, "var along e1 {v1}");
        assert!((v2 - 1.0).abs() < 0.03, "var along e2 {v2}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let model = tiny_model(2, 2, 2, 2, 30);
        let v = array![f64::NAN, 0.0];
        assert!(model.infer_hidden(&v.view()).is_err());
    }
}
