//! Executes one method on one dataset split and turns the outcome into report rows.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gpbench_core::baseline::{run_baseline, BaselineConfig};
use gpbench_core::data::{generate_toy, load_dataset, StandardizedDataset, TargetColumn};
use gpbench_core::exact_gpr::{lml_and_gradient, GprPosterior};
use gpbench_core::kernels::{HyperVector, KernelFamily};
use gpbench_core::metrics::{nlpd, rmse};
use gpbench_core::optimizer::{minimize, LbfgsConfig};
use gpbench_core::svgp::{init_params, svgp_elbo, svgp_predict, train_svgp, SvgpTrainConfig};
use serde::{Deserialize, Serialize};

use crate::baselines::{constant_baseline, linear_baseline, TrivialFit};
use crate::report::{BoundKind, Method, MetricRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    Toy { name: String, n: usize, noise_sd: f64 },
    File { path: PathBuf, target: TargetColumn },
}

impl DatasetSource {
    pub fn id(&self) -> String {
        match self {
            DatasetSource::Toy { name, .. } => name.clone(),
            DatasetSource::File { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        }
    }

    pub fn load(&self, seed: u64) -> Result<StandardizedDataset> {
        Ok(match self {
            DatasetSource::Toy { name, n, noise_sd } => generate_toy(name, *n, *noise_sd, seed)?,
            DatasetSource::File { path, target } => {
                load_dataset(path, target, seed).with_context(|| format!("loading {}", path.display()))?
            }
        })
    }
}

fn row(dataset: &str, method: Method, kernel: Option<KernelFamily>, seed: u64) -> MetricRow {
    MetricRow {
        dataset: dataset.to_string(),
        method,
        kernel: kernel.map(|k| k.to_string()),
        seed,
        m: None,
        elapsed_s: f64::NAN,
        bound_kind: BoundKind::Elbo,
        bound_value: f64::NAN,
        upper_bound: f64::NAN,
        rmse: f64::NAN,
        nlpd: f64::NAN,
    }
}

/// The automatic SGPR procedure; one row per scheduled budget.
pub fn sgpr_rows(
    data: &StandardizedDataset,
    dataset: &str,
    family: KernelFamily,
    config: &BaselineConfig,
) -> Result<Vec<MetricRow>> {
    let records = run_baseline(data, family, config)?;
    Ok(records
        .iter()
        .map(|r| MetricRow {
            m: Some(r.m),
            elapsed_s: r.elapsed_train_seconds,
            bound_value: r.elbo,
            upper_bound: r.upper_bound,
            rmse: r.rmse,
            nlpd: r.nlpd,
            ..row(dataset, Method::SgprBaseline, Some(family), data.seed)
        })
        .collect())
}

/// Exact GPR with hyperparameters fitted by L-BFGS on the log marginal likelihood.
pub fn gpr_row(
    data: &StandardizedDataset,
    dataset: &str,
    family: KernelFamily,
    initial: &HyperVector,
    lbfgs: &LbfgsConfig,
) -> Result<MetricRow> {
    let (x, y) = (&data.x_train, &data.y_train);
    let start = Instant::now();
    let opt = minimize(
        |u| {
            let (v, g) = lml_and_gradient(x, y, &initial.with_values(u.clone()))?;
            Ok((-v, -g))
        },
        initial.values(),
        lbfgs,
    )?;
    let hypers = initial.with_values(opt.x_final);
    let (spec, noise) = hypers.unpack();
    let posterior = GprPosterior::fit(x, y, &spec, noise)?;
    let elapsed = start.elapsed().as_secs_f64();

    let pred = posterior.predict(&data.x_test)?;
    Ok(MetricRow {
        elapsed_s: elapsed,
        bound_kind: BoundKind::Lml,
        bound_value: -opt.f_final,
        upper_bound: -opt.f_final,
        rmse: rmse(&pred.mean, &data.y_test).unwrap_or(f64::NAN),
        nlpd: nlpd(&pred.mean, &pred.observation_variance, &data.y_test).unwrap_or(f64::NAN),
        ..row(dataset, Method::Gpr, Some(family), data.seed)
    })
}

/// SVGP from greedy inducing inputs, trained with Adam.
pub fn svgp_row(
    data: &StandardizedDataset,
    dataset: &str,
    family: KernelFamily,
    initial: &HyperVector,
    m: usize,
    config: &SvgpTrainConfig,
) -> Result<MetricRow> {
    if m == 0 || m > data.n_train() {
        bail!("SVGP needs 1 <= M <= {}, got {m}", data.n_train());
    }
    let (x, y) = (&data.x_train, &data.y_train);
    let start = Instant::now();
    let init = init_params(x, initial, m);
    let (params, _trace) = train_svgp(x, y, &init, config)?;
    let elapsed = start.elapsed().as_secs_f64();

    let elbo = svgp_elbo(&params, x, y).unwrap_or(f64::NAN);
    let pred = svgp_predict(&params, &data.x_test)?;
    Ok(MetricRow {
        m: Some(m),
        elapsed_s: elapsed,
        bound_value: elbo,
        rmse: rmse(&pred.mean, &data.y_test).unwrap_or(f64::NAN),
        nlpd: nlpd(&pred.mean, &pred.observation_variance, &data.y_test).unwrap_or(f64::NAN),
        ..row(dataset, Method::Svgp, Some(family), data.seed)
    })
}

fn trivial_row(fit: TrivialFit, elapsed: f64, method: Method, dataset: &str, seed: u64) -> MetricRow {
    MetricRow {
        elapsed_s: elapsed,
        bound_kind: BoundKind::TrainLogLikelihood,
        bound_value: fit.train_log_likelihood,
        rmse: fit.rmse,
        nlpd: fit.nlpd,
        ..row(dataset, method, None, seed)
    }
}

/// Linear regression and constant-mean rows. The flag reports a ridge fallback.
pub fn trivial_rows(data: &StandardizedDataset, dataset: &str) -> Result<(Vec<MetricRow>, bool)> {
    let start = Instant::now();
    let lin = linear_baseline(data)?;
    let lin_t = start.elapsed().as_secs_f64();
    let ridge = lin.ridge_used;
    let start = Instant::now();
    let cst = constant_baseline(data)?;
    let cst_t = start.elapsed().as_secs_f64();
    Ok((
        vec![
            trivial_row(lin, lin_t, Method::Linear, dataset, data.seed),
            trivial_row(cst, cst_t, Method::ConstantMean, dataset, data.seed),
        ],
        ridge,
    ))
}
