//! Plug-in pipeline: sample moments, hyperparameters, weight problems built
//! from sample spectra, the combined classifier and cross-validated `lambda`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hyper::{estimate_hyper, HyperParams};
use crate::risk::{empirical_error_and_auc, misclassification, risk_report, EmpiricalRisk, RiskReport};
use crate::sample::{
    compute_moments, direction_from_cache, pooled_covariance, DiscriminantDirection, PooledCovariance,
    PopulationMoments, PopulationSample,
};
use crate::spectral::traces::{est_trace_sigma_k_inv_resolvent, CrossKernel, EigenCache};
use crate::spectral::{est_mean_inv_t, est_target_side};
use crate::weights::{
    build_problem, solve_weights, CrossTraces, PopulationSpectral, ProblemInputs, TransferWeights, Variant,
    WeightProblem,
};

/// Sample statistics of every population with lazily built eigendecompositions
/// and pairwise trace kernels. The last population is the target.
#[derive(Debug)]
pub struct PluginContext {
    moments: Vec<PopulationMoments>,
    pooled: OnceLock<Result<PooledCovariance>>,
    /// Indexed by `(i, j, weighted)` with `i <= j`.
    kernels: Vec<OnceLock<Result<CrossKernel>>>,
    /// `(target, i)` kernels for inverse traces.
    inverse_kernels: Vec<OnceLock<Result<CrossKernel>>>,
}

impl PluginContext {
    pub fn new(samples: &[PopulationSample]) -> Result<Self> {
        let moments = samples
            .par_iter()
            .map(compute_moments)
            .collect::<Result<Vec<_>>>()?;
        Self::from_moments(moments)
    }

    pub fn from_moments(moments: Vec<PopulationMoments>) -> Result<Self> {
        let k = moments.len();
        if k == 0 {
            return Err(Error::Contract("at least one population is required".into()));
        }
        let p = moments[0].p();
        if moments.iter().any(|m| m.p() != p) {
            return Err(Error::Data("populations disagree on the feature count".into()));
        }
        Ok(Self {
            moments,
            pooled: OnceLock::new(),
            kernels: (0..2 * k * k).map(|_| OnceLock::new()).collect(),
            inverse_kernels: (0..k).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.moments.len()
    }

    pub fn p(&self) -> usize {
        self.moments[0].p()
    }

    pub fn moments(&self) -> &[PopulationMoments] {
        &self.moments
    }

    pub fn target(&self) -> &PopulationMoments {
        self.moments.last().expect("nonempty")
    }

    pub fn pooled(&self) -> Result<&PooledCovariance> {
        self.pooled
            .get_or_init(|| pooled_covariance(&self.moments))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn cache(&self, i: usize) -> Result<&EigenCache> {
        self.moments[i].eigen()
    }

    fn kernel(&self, i: usize, j: usize, weighted: bool) -> Result<&CrossKernel> {
        let (a, b) = (i.min(j), i.max(j));
        let k = self.k();
        let slot = &self.kernels[(a * k + b) * 2 + usize::from(weighted)];
        slot.get_or_init(|| {
            let w = weighted.then(|| self.target().sigma_hat());
            CrossKernel::new(self.cache(a)?, self.cache(b)?, w)
        })
        .as_ref()
        .map_err(Clone::clone)
    }

    /// `tr(R_i R_j W)/p` with `W` the identity or the target sample covariance.
    fn pair_trace(&self, i: usize, li: f64, j: usize, lj: f64, weighted: bool) -> Result<f64> {
        let kernel = self.kernel(i, j, weighted)?;
        if i <= j {
            Ok(kernel.resolvent_trace(self.cache(i)?, li, self.cache(j)?, lj))
        } else {
            Ok(kernel.resolvent_trace(self.cache(j)?, lj, self.cache(i)?, li))
        }
    }

    /// `tr(Sigma_K^-1 R_i)/p` for a source `i`.
    fn inverse_trace(&self, i: usize, lambda: f64) -> Result<f64> {
        let t = self.k() - 1;
        let kernel = self.inverse_kernels[i]
            .get_or_init(|| CrossKernel::new(self.cache(t)?, self.cache(i)?, None))
            .as_ref()
            .map_err(Clone::clone)?;
        est_trace_sigma_k_inv_resolvent(self.cache(t)?, self.cache(i)?, kernel, lambda)
    }

    /// Hyperparameters estimated from the class means.
    pub fn estimate_hyper(&self) -> Result<HyperParams<f64>> {
        let means: Vec<_> = self.moments.iter().map(|m| m.means.clone()).collect();
        estimate_hyper(&means)
    }

    /// `E(1/T)` estimated from the pooled covariance, or from the target's for
    /// heterogeneous covariances.
    pub fn mean_inv_t(&self, heterogeneous: bool) -> Result<f64> {
        let cache = if heterogeneous {
            self.cache(self.k() - 1)?
        } else {
            self.pooled()?.eigen()?
        };
        est_mean_inv_t(&cache.spectrum(), cache.gamma())
    }
}

fn check_lambdas(variant: Variant, k: usize, lambdas: &[f64]) -> Result<()> {
    if lambdas.len() != k {
        return Err(Error::Contract(format!("{k} populations but {} lambdas", lambdas.len())));
    }
    if lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::Domain("lambda must be positive and finite".into()));
    }
    if variant.is_pooled() && lambdas.iter().any(|l| *l != lambdas[0]) {
        return Err(Error::Contract(format!(
            "{variant} shares one covariance and needs a single lambda"
        )));
    }
    Ok(())
}

/// Weight-problem inputs estimated from the samples.
pub fn plugin_inputs(
    ctx: &PluginContext,
    variant: Variant,
    hyper: &HyperParams<f64>,
    lambdas: &[f64],
) -> Result<ProblemInputs<f64>> {
    let k = ctx.k();
    check_lambdas(variant, k, lambdas)?;
    let target = k - 1;
    let noise: Vec<f64> = ctx.moments.iter().map(|m| m.means.gamma_noise()).collect();
    let summaries = if variant.is_pooled() {
        let s = ctx.pooled()?.eigen()?.summary(lambdas[0])?;
        vec![s; k]
    } else {
        (0..k)
            .map(|i| ctx.cache(i)?.summary(lambdas[i]))
            .collect::<Result<Vec<_>>>()?
    };
    let populations = summaries
        .iter()
        .zip(&noise)
        .map(|(&summary, &noise_gamma)| PopulationSpectral { summary, noise_gamma })
        .collect();
    let mean_inv_t = if variant.is_estimation() {
        Some(ctx.mean_inv_t(variant.is_heterogeneous())?)
    } else {
        None
    };

    let cross = if variant.is_pooled() {
        None
    } else {
        let mut matrix = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let value = match variant {
                    Variant::EInd | Variant::EHet => {
                        if i == j {
                            summaries[i].m_prime
                        } else {
                            ctx.pair_trace(i, lambdas[i], j, lambdas[j], false)?
                        }
                    }
                    Variant::PInd => {
                        if i == j {
                            summaries[i].trace_r2_sigma()
                        } else {
                            // R_a Sigma ~ (I - lambda_a R_a)/x_a for either index.
                            let e = ctx.pair_trace(i, lambdas[i], j, lambdas[j], false)?;
                            let one = est_target_side(
                                summaries[j].m,
                                e,
                                lambdas[i],
                                summaries[i].fixed_point(),
                            )?;
                            let two = est_target_side(
                                summaries[i].m,
                                e,
                                lambdas[j],
                                summaries[j].fixed_point(),
                            )?;
                            0.5 * (one + two)
                        }
                    }
                    Variant::PHet => {
                        if j == target {
                            if i == target {
                                summaries[i].trace_r2_sigma()
                            } else {
                                let e = ctx.pair_trace(i, lambdas[i], j, lambdas[j], false)?;
                                est_target_side(summaries[i].m, e, lambdas[j], summaries[j].fixed_point())?
                            }
                        } else {
                            ctx.pair_trace(i, lambdas[i], j, lambdas[j], true)?
                        }
                    }
                    Variant::EPool | Variant::PPool => unreachable!("pooled handled above"),
                };
                matrix[(i, j)] = value;
                matrix[(j, i)] = value;
            }
        }
        let mut traces = CrossTraces::new(matrix);
        if variant == Variant::EHet {
            let e_inv = mean_inv_t.expect("estimation variant");
            let inverse = (0..k)
                .map(|i| {
                    if i == target {
                        Ok(summaries[i].trace_sigma_inv_r(e_inv))
                    } else {
                        ctx.inverse_trace(i, lambdas[i])
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            traces.inverse = Some(inverse);
        }
        Some(traces)
    };

    Ok(ProblemInputs {
        variant,
        hyper: hyper.clone(),
        populations,
        cross,
        mean_inv_t,
    })
}

/// Per-population ridge directions for a variant.
pub fn directions(ctx: &PluginContext, variant: Variant, lambdas: &[f64]) -> Result<Vec<DiscriminantDirection>> {
    check_lambdas(variant, ctx.k(), lambdas)?;
    (0..ctx.k())
        .map(|i| {
            let cache = if variant.is_pooled() {
                ctx.pooled()?.eigen()?
            } else {
                ctx.cache(i)?
            };
            direction_from_cache(&ctx.moments[i].means, cache, lambdas[i], variant.is_pooled())
        })
        .collect()
}

/// A transfer classifier `sign(sum_k w_k d_k^T x + b_K)`.
#[derive(Debug, Clone)]
pub struct FittedClassifier {
    pub variant: Variant,
    pub lambdas: Vec<f64>,
    pub weights: TransferWeights<f64>,
    pub problem: WeightProblem<f64>,
    pub direction: DVector<f64>,
    /// Intercept of the target-only discriminant at the target's `lambda`.
    pub intercept: f64,
}

impl FittedClassifier {
    pub fn scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.direction
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<i8> {
        self.scores(x)
            .iter()
            .map(|s| if s + self.intercept >= 0.0 { 1 } else { -1 })
            .collect()
    }

    pub fn evaluate(&self, test: &PopulationSample) -> Result<EmpiricalRisk> {
        empirical_error_and_auc(&self.direction, self.intercept, test.features(), test.labels())
    }

    pub fn error(&self, test: &PopulationSample) -> Result<f64> {
        let scores: Vec<f64> = self.scores(test.features()).iter().copied().collect();
        misclassification(&scores, self.intercept, test.labels())
    }

    /// Plug-in limiting error. Estimation variants are scored with the
    /// prediction criterion built from the same samples.
    pub fn risk(&self, ctx: &PluginContext) -> Result<RiskReport> {
        let hyper = &self.problem.inputs.hyper;
        let scoring = if self.variant.is_estimation() {
            let pred = prediction_counterpart(self.variant);
            build_problem(plugin_inputs(ctx, pred, hyper, &self.lambdas)?)?
        } else {
            self.problem.clone()
        };
        let alpha_k = *hyper.alpha_sq().last().expect("nonempty");
        let e_inv = ctx.mean_inv_t(self.variant.is_heterogeneous()).ok();
        risk_report(&self.weights.vector(), &scoring.u, &scoring.system(), Some((alpha_k, e_inv)))
    }
}

pub fn prediction_counterpart(variant: Variant) -> Variant {
    match variant {
        Variant::EInd => Variant::PInd,
        Variant::EPool => Variant::PPool,
        Variant::EHet => Variant::PHet,
        v => v,
    }
}

/// Solves the plug-in weights and assembles the combined classifier.
pub fn fit_variant(
    ctx: &PluginContext,
    variant: Variant,
    hyper: &HyperParams<f64>,
    lambdas: &[f64],
) -> Result<FittedClassifier> {
    let problem = build_problem(plugin_inputs(ctx, variant, hyper, lambdas)?)?;
    let weights = solve_weights(&problem)?;
    let dirs = directions(ctx, variant, lambdas)?;
    let intercept = naive_rda(ctx, *lambdas.last().expect("nonempty"))?.intercept;
    Ok(combine(variant, lambdas, weights, problem, &dirs, intercept))
}

fn combine(
    variant: Variant,
    lambdas: &[f64],
    weights: TransferWeights<f64>,
    problem: WeightProblem<f64>,
    dirs: &[DiscriminantDirection],
    intercept: f64,
) -> FittedClassifier {
    let mut direction = DVector::zeros(dirs[0].direction.len());
    for (w, d) in weights.w.iter().zip(dirs) {
        direction.axpy(*w, &d.direction, 1.0);
    }
    FittedClassifier {
        variant,
        lambdas: lambdas.to_vec(),
        weights,
        problem,
        direction,
        intercept,
    }
}

/// Target-only ridge discriminant.
pub fn naive_rda(ctx: &PluginContext, lambda: f64) -> Result<DiscriminantDirection> {
    let t = ctx.k() - 1;
    direction_from_cache(&ctx.target().means, ctx.cache(t)?, lambda, false)
}

/// Where the hyperparameters come from.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperSource {
    Estimate,
    Supplied(HyperParams<f64>),
}

impl HyperSource {
    pub fn resolve(&self, ctx: &PluginContext) -> Result<HyperParams<f64>> {
        match self {
            HyperSource::Estimate => ctx.estimate_hyper(),
            HyperSource::Supplied(h) => {
                if h.k() != ctx.k() {
                    return Err(Error::Contract(format!(
                        "supplied hyperparameters cover {} populations, data has {}",
                        h.k(),
                        ctx.k()
                    )));
                }
                Ok(h.clone())
            }
        }
    }
}

/// Mean held-out target error per grid point and the selected `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub variant: Variant,
    pub grid: Vec<f64>,
    pub mean_error: Vec<f64>,
    pub selected: f64,
    pub folds: usize,
}

/// Index of the minimum, preferring the earliest on ties.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] <= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Fold assignment for the target rows, stratified by label.
pub fn target_folds(labels: &[i8], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Contract("cross-validation needs at least 2 folds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut slot = 0;
    for class in [1i8, -1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(Error::Data(format!(
                "class {class} has {} target rows, fewer than {folds} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            out[slot % folds].push(i);
            slot += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// k-fold cross-validation of a shared `lambda` on the target population.
/// Sources stay whole; ties go to the smaller `lambda`.
pub fn cross_validate(
    samples: &[PopulationSample],
    variant: Variant,
    hyper: &HyperSource,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<CvResult> {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::Contract("empty lambda grid".into()));
    }
    let (target, sources) = samples
        .split_last()
        .ok_or_else(|| Error::Contract("at least one population is required".into()))?;
    let source_moments = sources
        .par_iter()
        .map(compute_moments)
        .collect::<Result<Vec<_>>>()?;
    let assignment = target_folds(target.labels(), folds, seed)?;
    let per_fold = assignment
        .par_iter()
        .map(|held| -> Result<Vec<f64>> {
            let train_rows: Vec<usize> = (0..target.n()).filter(|i| held.binary_search(i).is_err()).collect();
            let train = target.subset(&train_rows)?;
            let test = target.subset(held)?;
            let mut moments = source_moments.clone();
            moments.push(compute_moments(&train)?);
            let ctx = PluginContext::from_moments(moments)?;
            let h = hyper.resolve(&ctx)?;
            sorted
                .iter()
                .map(|&l| {
                    let lambdas = vec![l; ctx.k()];
                    match fit_variant(&ctx, variant, &h, &lambdas) {
                        Ok(c) => c.error(&test),
                        Err(Error::Numerical { .. }) => Ok(f64::NAN),
                        Err(e) => Err(e),
                    }
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_error: Vec<f64> = (0..sorted.len())
        .map(|g| per_fold.iter().map(|f| f[g]).sum::<f64>() / folds as f64)
        .collect();
    let best = argmin_first(&mean_error)
        .ok_or_else(|| Error::numerical("every grid point failed", f64::NAN))?;
    Ok(CvResult {
        variant,
        grid: sorted.clone(),
        mean_error,
        selected: sorted[best],
        folds,
    })
}
