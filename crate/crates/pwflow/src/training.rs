use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::maf::MafModel;
use crate::numerics::{derive_seed, GradTape, Matrix};
use crate::samples::WeightedSampleSet;

/// Knobs for a single flow training run. Defaults follow the benchmark
/// protocol: up to 10^4 full-batch epochs, early stopping with patience equal
/// to 2% of the epoch budget, a 20% held-out test split and Adam at 1e-3.
#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub max_epochs: usize,
    /// Patience as a fraction of `max_epochs` (rounded up).
    pub patience_fraction: f64,
    pub test_fraction: f64,
    pub learning_rate: f64,
    /// `None` trains on the full batch every epoch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            max_epochs: 10_000,
            patience_fraction: 0.02,
            test_fraction: 0.2,
            learning_rate: 1e-3,
            batch_size: None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if !(self.patience_fraction > 0.0 && self.patience_fraction <= 1.0) {
            return Err(Error::config(format!(
                "patience_fraction must be in (0, 1], got {}",
                self.patience_fraction
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be positive when set"));
        }
        Ok(())
    }

    /// Epochs without test-loss improvement tolerated before stopping.
    pub fn patience(&self) -> usize {
        ((self.patience_fraction * self.max_epochs as f64).ceil() as usize).max(1)
    }
}

/// What a training run did, with everything the cost model needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    /// Epochs actually executed (1-based count).
    pub epochs_run: usize,
    /// Epoch whose parameters the model was rolled back to.
    pub best_epoch: usize,
    pub best_test_loss: f64,
    /// Wall-clock seconds; informational only, never part of comparisons.
    pub wall_time_seconds: f64,
    /// Trainable parameter count of the model.
    pub parameter_count: usize,
    /// Total samples involved, training and test splits together.
    pub samples_used: usize,
}

/// Deterministic shuffle split into (train, test). The test split gets
/// `round(test_fraction * n)` samples, clamped to leave both sides nonempty.
pub fn split(
    samples: &WeightedSampleSet,
    test_fraction: f64,
    seed: u64,
) -> Result<(WeightedSampleSet, WeightedSampleSet)> {
    let n = samples.len();
    if n < 5 {
        return Err(Error::config(format!("need at least 5 samples to split, got {n}")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut indices: Vec<usize> = (0..n).collect();
    shuffle(&mut indices, seed);
    let (test_idx, train_idx) = indices.split_at(n_test);
    Ok((samples.subset(train_idx)?, samples.subset(test_idx)?))
}

/// Fisher-Yates with our own seeded stream so splits stay reproducible even
/// if dependency internals change.
fn shuffle(indices: &mut [usize], seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Adam moment estimates, one pair of buffers per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn for_model(model: &MafModel) -> Self {
        let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.shape()).collect();
        Self::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. `params` and `grads` must line up
/// with the state's tensors.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} state tensors",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::config(format!("learning_rate must be positive, got {learning_rate}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?} vs state {:?}", p.shape(), g.shape(), m.shape()),
            ));
        }
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Early-stopping bookkeeping: strict improvement resets the counter; after
/// `patience` consecutive non-improving epochs, stop.
#[derive(Clone, Debug)]
pub(crate) struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Feeds one test loss; returns true when this epoch improved the best.
    pub(crate) fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub(crate) fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub(crate) fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Trains `model` in place: splits `samples`, fits the standardizer on the
/// training split, then runs Adam with early stopping on the test loss and
/// rolls the parameters back to the best epoch, bit-exactly.
pub fn train(
    model: &mut MafModel,
    samples: &WeightedSampleSet,
    config: &TrainingConfig,
) -> Result<TrainingReport> {
    config.validate()?;
    if samples.dim() != model.dim() {
        return Err(Error::shape(
            "train",
            format!("samples have dim {}, model dim is {}", samples.dim(), model.dim()),
        ));
    }
    let started = Instant::now();
    let (train_set, test_set) = split(samples, config.test_fraction, derive_seed(config.seed, SEED_SPLIT))?;
    model.set_standardizer(crate::maf::Standardizer::fit(&train_set)?)?;

    let mut adam = AdamState::for_model(model);
    let mut stopper = EarlyStopping::new(config.patience());
    let mut best_params = model.snapshot_params();
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        match config.batch_size {
            None => {
                step_on(model, train_set.points(), train_set.weights(), &mut adam, config, epoch)?;
            }
            Some(bs) => {
                let order = epoch_order(train_set.len(), config.seed, epoch);
                for chunk in order.chunks(bs) {
                    let sub = train_set.subset(chunk)?;
                    step_on(model, sub.points(), sub.weights(), &mut adam, config, epoch)?;
                }
            }
        }
        let test_loss = model.loss(&test_set).map_err(|e| match e {
            Error::Numeric { value, .. } => Error::Training {
                epoch,
                message: format!("test loss diverged to {value}"),
            },
            other => other,
        })?;
        if !test_loss.is_finite() {
            return Err(Error::Training { epoch, message: format!("test loss diverged to {test_loss}") });
        }
        if stopper.observe(epoch, test_loss) {
            best_params = model.snapshot_params();
        }
        if stopper.should_stop() {
            break;
        }
    }

    model.restore_params(&best_params)?;
    let (best_epoch, best_test_loss) = stopper.best();
    Ok(TrainingReport {
        epochs_run,
        best_epoch,
        best_test_loss,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        parameter_count: model.parameter_count(),
        samples_used: samples.len(),
    })
}

/// Tag mixed into the config seed to derive the train/test split stream.
/// Public so callers can reconstruct the exact split of a finished run.
pub const SEED_SPLIT: u64 = 0x5350_4c49;

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, derive_seed(seed, 0xB174_0000 ^ epoch as u64));
    order
}

fn step_on(
    model: &mut MafModel,
    points: &Matrix,
    weights: &[f64],
    adam: &mut AdamState,
    config: &TrainingConfig,
    epoch: usize,
) -> Result<()> {
    let mut tape = GradTape::new();
    let (loss_id, param_ids) = model.loss_taped(&mut tape, points, weights)?;
    let loss = tape.scalar(loss_id)?;
    if !loss.is_finite() {
        return Err(Error::Training { epoch, message: format!("training loss diverged to {loss}") });
    }
    let grads = tape.backward(loss_id).map_err(|e| match e {
        Error::Numeric { value, .. } => Error::Training {
            epoch,
            message: format!("non-finite loss {value} during backward pass"),
        },
        other => other,
    })?;
    let grad_refs: Vec<&Matrix> = param_ids
        .iter()
        .map(|id| grads.get(*id).expect("every param id has a gradient"))
        .collect();
    let mut params = model.params_mut();
    adam_step(&mut params, &grad_refs, adam, config.learning_rate)?;
    Ok(())
}
