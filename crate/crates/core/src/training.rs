//! Adam, the adversarial objectives and the alternating training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{omega_tape, sample_noise_batch, subsample_coordinates, LocalGenerator};
use crate::nets::{Mlp, MlpVars, ParamMap};
use crate::tensor::Tensor;

/// Discriminator outputs are clamped into `(CLAMP, 1 - CLAMP)` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamMap,
    pub v: ParamMap,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamMap, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: ParamMap = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ParamMap, grads: &ParamMap, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let m = state.m.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        for other in [g, m] {
            if other.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: other.shape().to_vec(),
                });
            }
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("moments mirror parameters");
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Hyperparameters shared by adversarial and semi-supervised training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Learning rate of the discriminator (or classifier in semi-supervised mode).
    pub lr_discriminator: f64,
    pub lr_generator: f64,
    /// Locality weight.
    pub mu: f64,
    /// Orthonormality weight.
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Coordinates sampled per minibatch for the orthonormality term.
    pub coord_sample_size: usize,
    /// Probability that a noise draw is exactly zero.
    pub zero_weight: f64,
    /// Learning rates decay linearly to zero from this epoch on; `None` disables.
    pub anneal_start_epoch: Option<usize>,
    pub early_stop_patience: usize,
    pub early_stop_min_epoch: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Include the manifold-gradient penalty in the classifier objective.
    pub manifold_penalty: bool,
    /// Also apply that penalty to labeled examples.
    pub penalty_on_labeled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_discriminator: 5e-5,
            lr_generator: 1e-3,
            mu: 1.0,
            eta: 0.1,
            batch_size: 64,
            epochs: 300,
            coord_sample_size: 10,
            zero_weight: 0.1,
            anneal_start_epoch: None,
            early_stop_patience: 100,
            early_stop_min_epoch: 600,
            seed: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            manifold_penalty: true,
            penalty_on_labeled: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lr_discriminator", self.lr_discriminator),
            ("lr_generator", self.lr_generator),
            ("mu", self.mu),
            ("eta", self.eta),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.coord_sample_size == 0 {
            return Err(Error::invalid("coord_sample_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.zero_weight) {
            return Err(Error::invalid(format!("zero_weight must lie in [0, 1], got {}", self.zero_weight)));
        }
        if let Some(start) = self.anneal_start_epoch {
            if start > self.epochs {
                return Err(Error::invalid(format!("anneal_start_epoch {start} exceeds epochs {}", self.epochs)));
            }
        }
        Ok(())
    }

    fn adam(&self, params: &ParamMap) -> AdamState {
        AdamState::new(params, self.adam_beta1, self.adam_beta2, self.adam_epsilon)
    }

    pub(crate) fn rates(&self, epoch: usize) -> (f64, f64) {
        let scale = |base| match self.anneal_start_epoch {
            Some(start) => anneal_lr(base, epoch, self.epochs, start),
            None => base,
        };
        (scale(self.lr_discriminator), scale(self.lr_generator))
    }
}

/// Constant until `anneal_start`, then linear decay reaching zero at `total_epochs`.
pub fn anneal_lr(base_lr: f64, epoch: usize, total_epochs: usize, anneal_start: usize) -> f64 {
    if epoch < anneal_start {
        return base_lr;
    }
    if total_epochs <= anneal_start || epoch >= total_epochs {
        return 0.0;
    }
    base_lr * (total_epochs - epoch) as f64 / (total_epochs - anneal_start) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStop {
    Continue,
    Stop,
}

/// `history[i]` is the validation error after epoch `i`. Stops once at least
/// `min_epoch` epochs are done and the best error is `patience` or more
/// epochs old.
pub fn early_stop_check(history: &[f64], patience: usize, min_epoch: usize) -> EarlyStop {
    let epochs = history.len();
    if epochs == 0 || epochs < min_epoch {
        return EarlyStop::Continue;
    }
    let mut best = 0;
    for (i, &e) in history.iter().enumerate() {
        if e < history[best] {
            best = i;
        }
    }
    if epochs - 1 - best >= patience {
        EarlyStop::Stop
    } else {
        EarlyStop::Continue
    }
}

fn clamped_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    tape.log(c)
}

fn one_minus(tape: &mut Tape, p: Var) -> Result<Var> {
    let neg = tape.scale(p, -1.0)?;
    tape.offset(neg, 1.0)
}

/// Records `-[mean log D(real) + mean log(1 - D(fake))]`; returns the two
/// summands and their sum.
pub fn discriminator_loss_tape(tape: &mut Tape, disc: &Mlp, vars: &MlpVars, real: Var, fake: Var) -> Result<(Var, Var, Var)> {
    let d_real = disc.forward_tape(tape, vars, real)?;
    let log_real = clamped_log(tape, d_real)?;
    let real_term = tape.mean(log_real)?;
    let real_term = tape.scale(real_term, -1.0)?;
    let d_fake = disc.forward_tape(tape, vars, fake)?;
    let clamped = tape.clamp(d_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let rest = one_minus(tape, clamped)?;
    let log_fake = tape.log(rest)?;
    let fake_term = tape.mean(log_fake)?;
    let fake_term = tape.scale(fake_term, -1.0)?;
    let total = tape.add(real_term, fake_term)?;
    Ok((real_term, fake_term, total))
}

fn require_rows(what: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 || t.rows() == 0 {
        return Err(Error::invalid(format!("{what} batch must be a non-empty matrix")));
    }
    Ok(())
}

pub fn discriminator_loss(disc: &Mlp, real: &Tensor, fake: &Tensor) -> Result<f64> {
    require_rows("real", real)?;
    require_rows("fake", fake)?;
    let mut tape = Tape::new();
    let vars = disc.bind(&mut tape, false);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let (_, _, total) = discriminator_loss_tape(&mut tape, disc, &vars, r, f)?;
    Ok(tape.value(total).item())
}

/// Records `-mean log D(G(x, z))`.
pub fn generator_adv_loss_tape(
    tape: &mut Tape,
    disc: &Mlp,
    disc_vars: &MlpVars,
    model: &LocalGenerator,
    gen_vars: &MlpVars,
    x: Var,
    z: Var,
) -> Result<Var> {
    let fake = model.generate_tape(tape, gen_vars, x, z)?;
    let d = disc.forward_tape(tape, disc_vars, fake)?;
    let logd = clamped_log(tape, d)?;
    let m = tape.mean(logd)?;
    tape.scale(m, -1.0)
}

pub fn generator_adv_loss(disc: &Mlp, model: &LocalGenerator, x: &Tensor, z: &Tensor) -> Result<f64> {
    require_rows("base point", x)?;
    if z.rank() != 2 || z.rows() != x.rows() {
        return Err(Error::invalid("noise batch must align with base points"));
    }
    let mut tape = Tape::new();
    let dv = disc.bind(&mut tape, false);
    let gv = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let zv = tape.constant(z.clone());
    let loss = generator_adv_loss_tape(&mut tape, disc, &dv, model, &gv, xv, zv)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModels {
    pub generator: LocalGenerator,
    pub discriminator: Mlp,
}

/// Per-epoch means over minibatches.
#[derive(Clone, Debug, PartialEq)]
pub struct GanEpochLog {
    pub epoch: usize,
    pub discriminator: f64,
    pub generator_adv: f64,
    pub locality: f64,
    pub orthonormality: f64,
    pub omega: f64,
    pub lr_discriminator: f64,
    pub lr_generator: f64,
}

impl GanEpochLog {
    pub const HEADER: &'static str = "epoch,discriminator,generator_adv,locality,orthonormality,omega,lr_discriminator,lr_generator";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.discriminator,
            self.generator_adv,
            self.locality,
            self.orthonormality,
            self.omega,
            self.lr_discriminator,
            self.lr_generator
        )
    }
}

/// Names the failing term when a tape op overflows during training.
pub(crate) fn tag(epoch: usize, term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, term },
        other => other,
    }
}

pub(crate) fn finite(epoch: usize, term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { epoch, term })
    }
}

/// Alternates one discriminator step and one generator step per minibatch.
pub fn train_gan(config: &TrainConfig, data: &Dataset, models: GanModels) -> Result<(GanModels, Vec<GanEpochLog>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let GanModels {
        mut generator,
        mut discriminator,
    } = models;
    if data.dim() != generator.ambient_dim() || discriminator.in_dim() != Some(data.dim()) || discriminator.out_dim() != Some(1) {
        return Err(Error::invalid(format!(
            "data dimension {} does not match the models",
            data.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut d_params = discriminator.params();
    let mut g_params = generator.core().params();
    let mut d_adam = config.adam(&d_params);
    let mut g_adam = config.adam(&g_params);
    let n_coords = generator.coord_dim();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let (lr_d, lr_g) = config.rates(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = data.points.select_rows(chunk);
            let b = chunk.len();

            // Discriminator step on fixed generated samples.
            let z = sample_noise_batch(b, n_coords, config.zero_weight, &mut rng);
            let fake = generator.generate(&x, &z).map_err(tag(epoch, "generated sample"))?;
            let mut tape = Tape::new();
            let dv = discriminator.bind(&mut tape, true);
            let real = tape.constant(x.clone());
            let fake = tape.constant(fake);
            let (_, _, d_loss) = discriminator_loss_tape(&mut tape, &discriminator, &dv, real, fake).map_err(tag(epoch, "discriminator"))?;
            sums[0] += finite(epoch, "discriminator", tape.value(d_loss).item())?;
            let grads = dv.gradients(&tape.backward(d_loss)?);
            adam_step(&mut d_params, &grads, &mut d_adam, lr_d)?;
            discriminator.load_params(&d_params)?;

            // Generator step against the updated discriminator.
            let z = sample_noise_batch(b, n_coords, config.zero_weight, &mut rng);
            let coords = subsample_coordinates(n_coords, config.coord_sample_size, &mut rng);
            let mut tape = Tape::new();
            let dv = discriminator.bind(&mut tape, false);
            let gv = generator.bind(&mut tape, true);
            let xv = tape.constant(x);
            let zv = tape.constant(z);
            let adv = generator_adv_loss_tape(&mut tape, &discriminator, &dv, &generator, &gv, xv, zv).map_err(tag(epoch, "generator adversarial"))?;
            let omega = omega_tape(&mut tape, &generator, &gv, xv, config.mu, config.eta, &coords).map_err(tag(epoch, "regularizer"))?;
            let total = tape.add(adv, omega.total).map_err(tag(epoch, "generator"))?;
            sums[1] += finite(epoch, "generator adversarial", tape.value(adv).item())?;
            sums[2] += finite(epoch, "locality", tape.value(omega.locality).item())?;
            sums[3] += finite(epoch, "orthonormality", tape.value(omega.orthonormality).item())?;
            sums[4] += finite(epoch, "regularizer", tape.value(omega.total).item())?;
            let grads = gv.gradients(&tape.backward(total)?);
            adam_step(&mut g_params, &grads, &mut g_adam, lr_g)?;
            generator.core_mut().load_params(&g_params)?;
            batches += 1;
        }
        let mean = |s: f64| s / batches as f64;
        log.push(GanEpochLog {
            epoch,
            discriminator: mean(sums[0]),
            generator_adv: mean(sums[1]),
            locality: mean(sums[2]),
            orthonormality: mean(sums[3]),
            omega: mean(sums[4]),
            lr_discriminator: lr_d,
            lr_generator: lr_g,
        });
    }
    Ok((
        GanModels {
            generator,
            discriminator,
        },
        log,
    ))
}
