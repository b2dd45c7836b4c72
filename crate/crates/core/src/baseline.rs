//! The automatic SGPR training procedure.
//!
//! For each inducing budget `M` in an increasing schedule the hyperparameters
//! are reset to a fixed starting point, and then inducing-point selection
//! alternates with L-BFGS hyperparameter optimization until reselection stops
//! improving the bound.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::StandardizedDataset;
use crate::error::{GpError, Result};
use crate::inducing::greedy_variance_select;
use crate::kernels::{pack, HyperVector, KernelFamily, KernelSpec};
use crate::metrics::{nlpd, rmse};
use crate::numerics::JitterPolicy;
use crate::optimizer::{minimize, LbfgsConfig, OptResult};
use crate::sgpr::{elbo_and_gradient, SgprModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub m_schedule: Vec<usize>,
    pub max_epochs_per_m: usize,
    pub m_cutoff_fraction: f64,
    pub initial_noise_variance: f64,
    /// Starting value for every kernel hyperparameter.
    pub initial_kernel_value: f64,
    pub lbfgs: LbfgsConfig,
    pub jitter: JitterPolicy,
    /// Wall-clock budget for training, checked between epochs.
    pub timeout_secs: Option<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            m_schedule: vec![10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000],
            max_epochs_per_m: 20,
            m_cutoff_fraction: 0.8,
            initial_noise_variance: 0.01,
            initial_kernel_value: 1.0,
            lbfgs: LbfgsConfig::default(),
            jitter: JitterPolicy::default(),
            timeout_secs: None,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_schedule.is_empty() || self.m_schedule[0] == 0 {
            return Err(GpError::InvalidConfig("schedule must be non-empty and positive".into()));
        }
        if self.m_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GpError::InvalidConfig("schedule must be strictly increasing".into()));
        }
        if !(self.m_cutoff_fraction > 0.0 && self.m_cutoff_fraction <= 1.0) {
            return Err(GpError::InvalidConfig(format!(
                "m_cutoff_fraction must lie in (0, 1], got {}",
                self.m_cutoff_fraction
            )));
        }
        if self.max_epochs_per_m == 0 {
            return Err(GpError::InvalidConfig("max_epochs_per_m must be at least 1".into()));
        }
        self.lbfgs.validate()?;
        self.jitter.validate()
    }

    /// Largest admissible `M` for `n` training points: `floor(fraction * n)`.
    pub fn m_cutoff(&self, n: usize) -> usize {
        (self.m_cutoff_fraction * n as f64).floor() as usize
    }

    /// Schedule entries that survive the cutoff.
    pub fn effective_schedule(&self, n: usize) -> Vec<usize> {
        let cutoff = self.m_cutoff(n);
        self.m_schedule.iter().copied().take_while(|&m| m <= cutoff).collect()
    }

    pub fn initial_hypers(&self, family: KernelFamily, dim: usize) -> Result<HyperVector> {
        pack(
            &KernelSpec::uniform(family, dim, self.initial_kernel_value),
            self.initial_noise_variance,
        )
    }

    fn deadline(&self, start: Instant) -> Option<Instant> {
        self.timeout_secs.map(|s| start + Duration::from_secs_f64(s.max(0.0)))
    }
}

/// Outcome of training at one inducing budget.
#[derive(Debug, Clone)]
pub struct FixedMFit {
    pub model: SgprModel,
    pub hypers: HyperVector,
    /// Selected training indices backing `model.z`.
    pub indices: Vec<usize>,
    pub elbo: f64,
    pub epochs_used: usize,
    /// Per accepted epoch, the ELBO of the accepted `(θ, Z)`.
    pub accepted_elbos: Vec<f64>,
}

/// Progress notifications; delivered outside the timed sections.
#[derive(Debug, Clone)]
pub enum BaselineEvent<'a> {
    MStarted {
        m: usize,
        initial_hypers: &'a HyperVector,
    },
    EpochFinished {
        m: usize,
        epoch: usize,
        elbo: f64,
        reselected: bool,
    },
    Checkpoint(&'a CheckpointRecord),
}

/// Metrics after training at one `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub m: usize,
    /// Number of inducing points actually used; below `m` when selection stopped early.
    pub m_effective: usize,
    /// Cumulative training time for the run up to this record.
    pub elapsed_train_seconds: f64,
    pub elbo: f64,
    pub upper_bound: f64,
    pub rmse: f64,
    pub nlpd: f64,
    /// Constrained `[kernel..., noise_variance]`.
    pub hyperparameters: Vec<f64>,
    pub epochs_used: usize,
    /// Set when training at this `M` failed; the numeric fields are then NaN.
    pub failure: Option<String>,
}

impl CheckpointRecord {
    pub fn kl_gap_bound(&self) -> f64 {
        self.upper_bound - self.elbo
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

/// A pausable monotonic clock.
#[derive(Debug, Default)]
struct Stopwatch {
    total: Duration,
    running_since: Option<Instant>,
}

impl Stopwatch {
    fn start(&mut self) {
        self.running_since.get_or_insert_with(Instant::now);
    }

    fn stop(&mut self) {
        if let Some(t) = self.running_since.take() {
            self.total += t.elapsed();
        }
    }

    fn seconds(&self) -> f64 {
        let live = self.running_since.map(|t| t.elapsed()).unwrap_or_default();
        (self.total + live).as_secs_f64()
    }
}

fn optimize_hypers(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    start: &HyperVector,
    config: &BaselineConfig,
) -> Result<OptResult> {
    let objective = |u: &DVector<f64>| {
        let (v, g) = elbo_and_gradient(z, x, y, &start.with_values(u.clone()), &config.jitter)?;
        Ok((-v, -g))
    };
    minimize(objective, start.values(), &config.lbfgs)
}

fn elbo_at(z: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>, hypers: &HyperVector, jitter: &JitterPolicy) -> f64 {
    let (spec, noise) = hypers.unpack();
    SgprModel::new(z.clone(), spec, noise)
        .with_jitter(*jitter)
        .elbo(x, y)
        .unwrap_or(f64::NAN)
}

fn same_set(a: &[usize], b: &[usize]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

/// Trains hyperparameters and inducing inputs at a fixed budget `m`.
///
/// Each epoch optimizes θ with `Z` fixed, reselects `Z' = greedy(θ')` and
/// accepts `(θ', Z')` unless that lowers the ELBO, in which case `(θ', Z)` is
/// kept and the loop ends. An unchanged selection also ends the loop.
pub fn fit_fixed_m(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    initial: &HyperVector,
    m: usize,
    config: &BaselineConfig,
) -> Result<FixedMFit> {
    fit_fixed_m_observed(x, y, initial, m, config, None, &mut |_| {})
}

fn fit_fixed_m_observed(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    initial: &HyperVector,
    m: usize,
    config: &BaselineConfig,
    deadline: Option<Instant>,
    on_epoch: &mut dyn FnMut(BaselineEvent<'_>),
) -> Result<FixedMFit> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(GpError::InvalidConfig(format!("inducing budget {m} not in 1..={n}")));
    }
    let (spec0, _) = initial.unpack();
    let mut indices = greedy_variance_select(x, &spec0, m).indices;
    let mut z = x.select_rows(&indices);
    let mut hypers = initial.clone();
    let mut elbo = f64::NAN;
    let mut accepted_elbos = Vec::new();
    let mut epochs = 0;

    while epochs < config.max_epochs_per_m {
        if epochs > 0 && deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        let opt = match optimize_hypers(&z, x, y, &hypers, config) {
            Ok(r) => r,
            Err(e) if epochs == 0 => {
                return Err(GpError::TrainingFailure(format!(
                    "initial optimization at M = {m}: {e}"
                )));
            }
            Err(_) => break,
        };
        epochs += 1;
        let theta = hypers.with_values(opt.x_final);
        let elbo_old = -opt.f_final;
        let (spec, _) = theta.unpack();
        let new_indices = greedy_variance_select(x, &spec, m).indices;
        let unchanged = same_set(&new_indices, &indices);
        let elbo_new = if unchanged {
            elbo_old
        } else {
            elbo_at(&x.select_rows(&new_indices), x, y, &theta, &config.jitter)
        };

        hypers = theta;
        if unchanged || !(elbo_new >= elbo_old) {
            elbo = elbo_old;
            accepted_elbos.push(elbo);
            on_epoch(BaselineEvent::EpochFinished {
                m,
                epoch: epochs,
                elbo,
                reselected: false,
            });
            break;
        }
        indices = new_indices;
        z = x.select_rows(&indices);
        elbo = elbo_new;
        accepted_elbos.push(elbo);
        on_epoch(BaselineEvent::EpochFinished {
            m,
            epoch: epochs,
            elbo,
            reselected: true,
        });
    }

    if !elbo.is_finite() {
        return Err(GpError::TrainingFailure(format!("no finite ELBO at M = {m}")));
    }
    let (spec, noise) = hypers.unpack();
    Ok(FixedMFit {
        model: SgprModel::new(z, spec, noise).with_jitter(config.jitter),
        hypers,
        indices,
        elbo,
        epochs_used: epochs,
        accepted_elbos,
    })
}

fn evaluate(fit: &FixedMFit, data: &StandardizedDataset) -> Result<(f64, f64, f64, f64)> {
    let bounds = fit.model.bounds(&data.x_train, &data.y_train)?;
    let (r, l) = if data.n_test() == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let pred = fit.model.predict(&data.x_train, &data.y_train, &data.x_test)?;
        (
            rmse(&pred.mean, &data.y_test).unwrap_or(f64::NAN),
            nlpd(&pred.mean, &pred.observation_variance, &data.y_test).unwrap_or(f64::NAN),
        )
    };
    Ok((bounds.elbo, bounds.upper_bound, r, l))
}

fn constrained(h: &HyperVector) -> Vec<f64> {
    let (spec, noise) = h.unpack();
    let mut v = spec.hypers();
    v.push(noise);
    v
}

/// Runs the full schedule on the training split and scores each `M` on the test split.
pub fn run_baseline(
    data: &StandardizedDataset,
    family: KernelFamily,
    config: &BaselineConfig,
) -> Result<Vec<CheckpointRecord>> {
    run_baseline_observed(data, family, config, &mut |_| {})
}

/// [`run_baseline`] with a progress callback. Time spent in the callback is
/// not counted as training time.
pub fn run_baseline_observed(
    data: &StandardizedDataset,
    family: KernelFamily,
    config: &BaselineConfig,
    observer: &mut dyn FnMut(BaselineEvent<'_>),
) -> Result<Vec<CheckpointRecord>> {
    config.validate()?;
    let x = &data.x_train;
    let y = &data.y_train;
    let schedule = config.effective_schedule(x.nrows());
    if schedule.is_empty() {
        return Err(GpError::TrainingFailure(format!(
            "no scheduled M fits below the cutoff {} for N = {}",
            config.m_cutoff(x.nrows()),
            x.nrows()
        )));
    }

    let run_start = Instant::now();
    let deadline = config.deadline(run_start);
    let mut clock = Stopwatch::default();
    let mut records = Vec::with_capacity(schedule.len());

    for m in schedule {
        if !records.is_empty() && deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        let initial = config.initial_hypers(family, data.input_dim())?;
        observer(BaselineEvent::MStarted {
            m,
            initial_hypers: &initial,
        });

        clock.start();
        let fit = {
            let mut pause_for_observer = |ev: BaselineEvent<'_>| {
                clock.stop();
                observer(ev);
                clock.start();
            };
            fit_fixed_m_observed(x, y, &initial, m, config, deadline, &mut pause_for_observer)
        };
        clock.stop();
        let elapsed = clock.seconds();

        let record = match fit.and_then(|f| evaluate(&f, data).map(|scores| (f, scores))) {
            Ok((fit, (elbo, upper_bound, r, l))) => CheckpointRecord {
                m,
                m_effective: fit.indices.len(),
                elapsed_train_seconds: elapsed,
                elbo,
                upper_bound,
                rmse: r,
                nlpd: l,
                hyperparameters: constrained(&fit.hypers),
                epochs_used: fit.epochs_used,
                failure: None,
            },
            Err(e) => CheckpointRecord {
                m,
                m_effective: 0,
                elapsed_train_seconds: elapsed,
                elbo: f64::NAN,
                upper_bound: f64::NAN,
                rmse: f64::NAN,
                nlpd: f64::NAN,
                hyperparameters: constrained(&initial),
                epochs_used: 0,
                failure: Some(e.to_string()),
            },
        };
        observer(BaselineEvent::Checkpoint(&record));
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_toy;

    #[test]
    fn cutoff_arithmetic() {
        let cfg = BaselineConfig::default();
        assert_eq!(cfg.m_cutoff(100), 80);
        assert_eq!(cfg.effective_schedule(100), vec![10, 20, 50]);
        assert_eq!(cfg.effective_schedule(1_000_000).len(), 10);
        assert_eq!(cfg.effective_schedule(12), vec![]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = BaselineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.m_schedule = vec![10, 10];
        assert!(cfg.validate().is_err());
        cfg.m_schedule = vec![10];
        cfg.m_cutoff_fraction = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn complete_inducing_set_stops_after_one_epoch() {
        let ds = generate_toy("smooth1d", 24, 0.1, 0).unwrap();
        let n = ds.n_train();
        let cfg = BaselineConfig::default();
        // Matérn-1/2 Gram matrices stay well conditioned, so selection always takes every point.
        let init = cfg
            .initial_hypers(KernelFamily::Matern(crate::kernels::MaternNu::Half), 1)
            .unwrap();
        let fit = fit_fixed_m(&ds.x_train, &ds.y_train, &init, n, &cfg).unwrap();
        assert_eq!(fit.indices.len(), n);
        assert_eq!(fit.epochs_used, 1);
        assert!(fit.elbo.is_finite());
    }

    #[test]
    fn accepted_elbos_are_non_decreasing() {
        let ds = generate_toy("smooth1d", 120, 0.1, 2).unwrap();
        let cfg = BaselineConfig::default();
        let init = cfg
            .initial_hypers(KernelFamily::Matern(crate::kernels::MaternNu::ThreeHalves), 1)
            .unwrap();
        let fit = fit_fixed_m(&ds.x_train, &ds.y_train, &init, 8, &cfg).unwrap();
        assert!(fit.accepted_elbos.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn stopwatch_excludes_paused_time() {
        let mut sw = Stopwatch::default();
        sw.start();
        sw.stop();
        let before = sw.seconds();
        std::thread::sleep(Duration::from_millis(20));
        assert_eq!(sw.seconds(), before);
    }
}
