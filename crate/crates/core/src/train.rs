//! Penalized objective, training loop and evaluation.
//!
//! For a source batch `X₁` and target batches `X_h` (h = 2..N) the standard
//! loss is
//!
//! ```text
//! (1/M) Σ_r c(X₁[r], T₂(X₁)[r], …, T_N(X₁)[r]) + Σ_h λ_h · MMD²_u(T_h(X₁), X_h)
//! ```
//!
//! with the unbiased estimator. The `product_normalized` form divides the whole
//! expression by `Π λ_h` and drops the target–target block, which does not
//! depend on the parameters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::{cost_batch, cost_grad, CostKind, CostSpec};
use crate::data::MarginalSpec;
use crate::error::{domain_err, shape_err, Error, Result};
use crate::kernel::KernelConfig;
use crate::mmd::{mmd2_biased, mmd2_self_term, mmd2_x_terms_and_grad, Estimator};
use crate::net::{Activation, MapEnsemble, MlpParams, MlpSpec};
use crate::optim::{OptimizerHyper, OptimizerKind, OptimizerState};
use crate::par;
use crate::rng::Rng;
use crate::tensor::Matrix2D;

/// Datasets larger than this are not given a cached Gram matrix; the
/// target–target block is then computed from each minibatch directly.
const MAX_CACHED_GRAM_ROWS: usize = 4096;

const EVAL_SEED_OFFSET: u64 = 0x9E37_79B9;

/// `λ_2, …, λ_N`, all strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PenaltyWeights(Vec<f64>);

impl PenaltyWeights {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(shape_err!("at least one penalty weight is required"));
        }
        if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(domain_err!(
                "penalty weights must be positive and finite, got {l}"
            ));
        }
        Ok(Self(lambdas))
    }

    /// The same weight for `count` targets.
    pub fn uniform(lambda: f64, count: usize) -> Result<Self> {
        Self::new(vec![lambda; count])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn product(&self) -> f64 {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<f64>> for PenaltyWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PenaltyWeights> for Vec<f64> {
    fn from(w: PenaltyWeights) -> Self {
        w.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Mean cost plus λ-weighted full unbiased MMD².
    #[default]
    Standard,
    /// Everything divided by `Π λ`, target–target block omitted.
    ProductNormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size M, drawn with replacement from each dataset.
    pub batch_size: usize,
    /// μ₁ (the source) followed by the N − 1 targets.
    pub marginals: Vec<MarginalSpec>,
    pub cost: CostKind,
    pub kernel: KernelConfig,
    pub lambdas: PenaltyWeights,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub optimizer_hyper: OptimizerHyper,
    pub loss_form: LossForm,
    pub seed: u64,
    /// Seed of the held-out evaluation batches.
    pub eval_seed: u64,
    /// Evaluation batch size.
    pub eval_samples: usize,
    /// Worker threads; 0 runs on the calling thread only. Results do not
    /// depend on this value.
    pub threads: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl TrainConfig {
    /// Three 2-d Gaussians with identity covariance and means 0, 3 and 10.
    pub fn gauss_shift() -> Self {
        let marginals = [0.0, 3.0, 10.0]
            .iter()
            .map(|&m| MarginalSpec::gaussian(m, 1.0, 2, 500))
            .collect();
        Self::preset(marginals, 2000)
    }

    /// Standard normal source, two-moons and two-circles targets.
    pub fn moons_circles() -> Self {
        let marginals = vec![
            MarginalSpec::gaussian(0.0, 1.0, 2, 500),
            MarginalSpec::two_moons(500),
            MarginalSpec::two_circles(500),
        ];
        Self::preset(marginals, 5000)
    }

    /// Default settings for arbitrary marginals.
    pub fn preset(marginals: Vec<MarginalSpec>, epochs: usize) -> Self {
        let targets = marginals.len().saturating_sub(1).max(1);
        let optimizer = OptimizerKind::Adam;
        Self {
            epochs,
            batch_size: 500,
            marginals,
            cost: CostKind::ChainQuadratic,
            kernel: KernelConfig::default(),
            lambdas: PenaltyWeights(vec![100.0; targets]),
            optimizer,
            lr: 1e-4,
            optimizer_hyper: OptimizerHyper::defaults(optimizer),
            loss_form: LossForm::Standard,
            seed: 1,
            eval_seed: 1 ^ EVAL_SEED_OFFSET,
            eval_samples: 500,
            threads: 0,
            hidden: vec![128, 128],
            activation: Activation::Relu,
        }
    }

    /// Set the training seed and derive the evaluation seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.eval_seed = seed ^ EVAL_SEED_OFFSET;
        self
    }

    /// Switch optimizer and reset its hyperparameters to that optimizer's defaults.
    pub fn with_optimizer(mut self, kind: OptimizerKind) -> Self {
        self.optimizer = kind;
        self.optimizer_hyper = OptimizerHyper::defaults(kind);
        self
    }

    /// Use `lambda` for every target.
    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.lambdas = PenaltyWeights::uniform(lambda, self.marginals.len().saturating_sub(1))?;
        Ok(self)
    }

    pub fn num_marginals(&self) -> usize {
        self.marginals.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.marginals.len();
        if n < 2 {
            return Err(shape_err!(
                "need a source and at least one target, got {n} marginals"
            ));
        }
        if self.lambdas.len() != n - 1 {
            return Err(shape_err!(
                "{} penalty weights for {} targets",
                self.lambdas.len(),
                n - 1
            ));
        }
        PenaltyWeights::new(self.lambdas.0.clone())?;
        if self.batch_size < 2 {
            return Err(shape_err!(
                "batch size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.eval_samples == 0 {
            return Err(shape_err!("evaluation batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(domain_err!(
                "learning rate must be positive, got {}",
                self.lr
            ));
        }
        self.kernel.validate()?;
        for m in &self.marginals {
            m.validate()?;
        }
        if let Some(d) = self.marginals[0].dim() {
            for (k, m) in self.marginals.iter().enumerate() {
                if let Some(dk) = m.dim() {
                    if dk != d {
                        return Err(shape_err!(
                            "marginal {} has dimension {dk}, expected {d}",
                            k + 1
                        ));
                    }
                }
            }
        }
        self.mlp_spec(1)?;
        Ok(())
    }

    pub fn mlp_spec(&self, dim: usize) -> Result<MlpSpec> {
        MlpSpec::new(dim, self.hidden.clone(), self.activation)
    }

    fn cost_spec(&self) -> Result<CostSpec> {
        CostSpec::new(self.cost, self.marginals.len())
    }
}

/// Terms of the loss before the optional global normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDecomposition {
    /// Mean transport cost over the batch.
    pub cost_term: f64,
    /// Per target: full unbiased MMD² (standard form) or its parameter-dependent
    /// part `xx − 2·cross` (product-normalized form). Not multiplied by λ.
    pub penalty_terms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub decomposition: LossDecomposition,
    /// One gradient per map, in ensemble order.
    pub grads: Vec<MlpParams>,
}

impl LossAndGrads {
    /// Gradients laid out like [`MapEnsemble::flatten`].
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.grads {
            g.flatten_into(&mut out);
        }
        out
    }
}

/// Loss and parameter gradients for one set of batches `[X₁, X₂, …, X_N]`.
pub fn loss_and_grads(
    ensemble: &MapEnsemble,
    batches: &[Matrix2D],
    cfg: &TrainConfig,
) -> Result<LossAndGrads> {
    check_batches(ensemble, batches, cfg)?;
    let yy = match cfg.loss_form {
        LossForm::Standard => batches[1..]
            .iter()
            .map(|y| mmd2_self_term(&cfg.kernel, y, Estimator::Unbiased))
            .collect::<Result<Vec<_>>>()?,
        LossForm::ProductNormalized => vec![0.0; batches.len() - 1],
    };
    assemble(ensemble, batches, cfg, &cfg.cost_spec()?, &yy)
}

fn check_batches(ensemble: &MapEnsemble, batches: &[Matrix2D], cfg: &TrainConfig) -> Result<()> {
    let n = cfg.marginals.len();
    if batches.len() != n || ensemble.len() + 1 != n || cfg.lambdas.len() + 1 != n {
        return Err(shape_err!(
            "{} batches, {} maps and {} penalty weights for {n} marginals",
            batches.len(),
            ensemble.len(),
            cfg.lambdas.len()
        ));
    }
    let shape = batches[0].shape();
    if shape.1 != ensemble.dim() {
        return Err(shape_err!(
            "batches have {} columns, maps expect {}",
            shape.1,
            ensemble.dim()
        ));
    }
    if shape.0 < 2 {
        return Err(shape_err!("batches need at least 2 rows, got {}", shape.0));
    }
    for (k, b) in batches.iter().enumerate() {
        if b.shape() != shape {
            return Err(shape_err!(
                "batch {} has shape {:?}, expected {shape:?}",
                k + 1,
                b.shape()
            ));
        }
    }
    Ok(())
}

/// `yy[h]` is the target–target block for target `h`, or 0 for the
/// product-normalized form.
fn assemble(
    ensemble: &MapEnsemble,
    batches: &[Matrix2D],
    cfg: &TrainConfig,
    cost: &CostSpec,
    yy: &[f64],
) -> Result<LossAndGrads> {
    let x1 = &batches[0];
    let m = x1.rows() as f64;
    let mut outputs = Vec::with_capacity(ensemble.len());
    let mut tapes = Vec::with_capacity(ensemble.len());
    for map in ensemble.maps() {
        let (y, tape) = map.forward(x1)?;
        outputs.push(y);
        tapes.push(tape);
    }

    let mut points: Vec<&Matrix2D> = Vec::with_capacity(batches.len());
    points.push(x1);
    points.extend(outputs.iter());
    let cost_term = cost_batch(cost, &points)?.iter().sum::<f64>() / m;
    let mut cost_grads = cost_grad(cost, &points)?;

    let scale = match cfg.loss_form {
        LossForm::Standard => 1.0,
        LossForm::ProductNormalized => 1.0 / cfg.lambdas.product(),
    };

    let lambdas = cfg.lambdas.as_slice();
    let mut penalty_terms = Vec::with_capacity(ensemble.len());
    let mut penalty_sum = 0.0;
    let mut grads = Vec::with_capacity(ensemble.len());
    for (h, map) in ensemble.maps().iter().enumerate() {
        let (xx, cross, mmd_grad) = mmd2_x_terms_and_grad(
            &cfg.kernel,
            &outputs[h],
            &batches[h + 1],
            Estimator::Unbiased,
        )?;
        let term = (xx + yy[h]) - 2.0 * cross;
        penalty_terms.push(term);
        penalty_sum += lambdas[h] * term;

        let upstream = &mut cost_grads[h + 1];
        for (u, g) in upstream.as_mut_slice().iter_mut().zip(mmd_grad.as_slice()) {
            *u = scale * (*u / m + lambdas[h] * g);
        }
        let (g, _) = map.backward(&tapes[h], upstream)?;
        grads.push(g);
    }

    let loss = scale * (cost_term + penalty_sum);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    Ok(LossAndGrads {
        loss,
        decomposition: LossDecomposition {
            cost_term,
            penalty_terms,
        },
        grads,
    })
}

/// Per-target evaluation statistics, pooled over coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    /// Marginal index h (2 for the first target).
    pub index: usize,
    pub mean: f64,
    pub sd: f64,
    /// Biased MMD² between pushed samples and a fresh target batch.
    pub mmd2: f64,
    pub target_mean: f64,
    pub target_sd: f64,
    /// `|mean − target_mean| > 1` or `sd > 2`.
    pub unstable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Loss at each completed epoch.
    pub loss: Vec<f64>,
    pub marginals: Vec<MarginalReport>,
    /// Mean transport cost of the evaluation batch.
    pub eval_cost: f64,
    pub wallclock_s: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Held-out evaluation batch and everything computed from it.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub source: Matrix2D,
    /// `T_h(source)` for h = 2..N.
    pub pushed: Vec<Matrix2D>,
    /// Fresh samples of each target.
    pub targets: Vec<Matrix2D>,
    pub marginals: Vec<MarginalReport>,
    pub cost: f64,
}

/// Push a fresh source batch through every map and compare with fresh targets.
pub fn evaluate(ensemble: &MapEnsemble, cfg: &TrainConfig, eval_seed: u64) -> Result<Evaluation> {
    cfg.validate()?;
    if ensemble.len() + 1 != cfg.marginals.len() {
        return Err(shape_err!(
            "{} maps for {} marginals",
            ensemble.len(),
            cfg.marginals.len()
        ));
    }
    par::with_threads(cfg.threads, || evaluate_inner(ensemble, cfg, eval_seed))
}

fn evaluate_inner(ensemble: &MapEnsemble, cfg: &TrainConfig, eval_seed: u64) -> Result<Evaluation> {
    let mut rng = Rng::seed_from_u64(eval_seed);
    let n = cfg.eval_samples;
    let source = cfg.marginals[0].sample(n, &mut rng)?;
    let pushed = ensemble.push_forward(&source)?;
    let targets = cfg.marginals[1..]
        .iter()
        .map(|m| m.sample(n, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut marginals = Vec::with_capacity(pushed.len());
    for (h, (p, t)) in pushed.iter().zip(&targets).enumerate() {
        if !p.is_finite() {
            return Err(Error::Numeric(format!(
                "map {} produced non-finite output",
                h + 2
            )));
        }
        let (mean, sd) = p.pooled_mean_sd();
        let (target_mean, target_sd) = t.pooled_mean_sd();
        let mmd2 = mmd2_biased(&cfg.kernel, p, t)?.value;
        marginals.push(MarginalReport {
            index: h + 2,
            mean,
            sd,
            mmd2,
            target_mean,
            target_sd,
            unstable: (mean - target_mean).abs() > 1.0 || sd > 2.0,
        });
    }

    let mut points: Vec<&Matrix2D> = vec![&source];
    points.extend(pushed.iter());
    let cost = cost_batch(&cfg.cost_spec()?, &points)?.iter().sum::<f64>() / n as f64;
    Ok(Evaluation {
        source,
        pushed,
        targets,
        marginals,
        cost,
    })
}

/// Training failed after it started.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    /// Numeric failure at `epoch` (1-based); `partial` holds the losses logged
    /// so far and has no evaluation statistics.
    #[error("training aborted at epoch {epoch}: {source}")]
    Aborted {
        epoch: usize,
        source: Error,
        partial: Box<TrainReport>,
    },
}

/// Fixed per-marginal datasets plus cached target Gram matrices.
struct Datasets {
    data: Vec<Matrix2D>,
    grams: Vec<Option<Matrix2D>>,
}

impl Datasets {
    fn build(cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        let data = cfg
            .marginals
            .iter()
            .map(|m| m.generate(rng))
            .collect::<Result<Vec<_>>>()?;
        let d = data[0].cols();
        for (k, x) in data.iter().enumerate() {
            if x.cols() != d {
                return Err(shape_err!(
                    "marginal {} has dimension {}, expected {d}",
                    k + 1,
                    x.cols()
                ));
            }
        }
        let grams = data[1..]
            .iter()
            .map(|y| {
                if cfg.loss_form == LossForm::Standard && y.rows() <= MAX_CACHED_GRAM_ROWS {
                    cfg.kernel.gram(y, y).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { data, grams })
    }

    fn draw(&self, m: usize, rng: &mut Rng) -> Result<(Vec<Matrix2D>, Vec<Vec<usize>>)> {
        let mut batches = Vec::with_capacity(self.data.len());
        let mut indices = Vec::with_capacity(self.data.len());
        for x in &self.data {
            let idx: Vec<usize> = (0..m).map(|_| rng.below(x.rows())).collect();
            batches.push(x.select_rows(&idx)?);
            indices.push(idx);
        }
        Ok((batches, indices))
    }

    /// Unbiased target–target block of each target batch.
    fn yy_terms(
        &self,
        cfg: &TrainConfig,
        batches: &[Matrix2D],
        indices: &[Vec<usize>],
    ) -> Result<Vec<f64>> {
        if cfg.loss_form == LossForm::ProductNormalized {
            return Ok(vec![0.0; self.grams.len()]);
        }
        self.grams
            .iter()
            .enumerate()
            .map(|(h, gram)| match gram {
                Some(g) => {
                    let idx = &indices[h + 1];
                    let m = idx.len() as f64;
                    let mut total = 0.0;
                    for (a, &ia) in idx.iter().enumerate() {
                        let row = g.row(ia);
                        let mut acc = 0.0;
                        for (b, &ib) in idx.iter().enumerate() {
                            if a != b {
                                acc += row[ib];
                            }
                        }
                        total += acc;
                    }
                    Ok(total / (m * (m - 1.0)))
                }
                None => mmd2_self_term(&cfg.kernel, &batches[h + 1], Estimator::Unbiased),
            })
            .collect()
    }
}

/// Run the training loop and evaluate the result on a held-out batch.
pub fn fit(cfg: &TrainConfig) -> std::result::Result<(MapEnsemble, TrainReport), TrainError> {
    cfg.validate()?;
    par::with_threads(cfg.threads, || fit_inner(cfg))
}

fn fit_inner(cfg: &TrainConfig) -> std::result::Result<(MapEnsemble, TrainReport), TrainError> {
    let started = Instant::now();
    let mut master = Rng::seed_from_u64(cfg.seed);
    let mut data_rng = master.fork();
    let mut init_rng = master.fork();
    let mut batch_rng = master.fork();

    let datasets = Datasets::build(cfg, &mut data_rng)?;
    let spec = cfg.mlp_spec(datasets.data[0].cols())?;
    let mut ensemble = MapEnsemble::init(&spec, cfg.marginals.len() - 1, &mut init_rng)?;
    let cost = cfg.cost_spec()?;
    let mut opt = OptimizerState::with_hyper(
        cfg.optimizer,
        cfg.lr,
        cfg.optimizer_hyper,
        ensemble.num_params(),
    )?;

    let mut loss = Vec::with_capacity(cfg.epochs);
    let mut params = ensemble.flatten();
    for epoch in 1..=cfg.epochs {
        let step = (|| -> Result<f64> {
            let (batches, indices) = datasets.draw(cfg.batch_size, &mut batch_rng)?;
            let yy = datasets.yy_terms(cfg, &batches, &indices)?;
            let out = assemble(&ensemble, &batches, cfg, &cost, &yy)?;
            opt.step(&mut params, &out.flat_grads())?;
            ensemble.assign_flat(&params)?;
            if !ensemble.maps().iter().all(|m| m.params.is_finite()) {
                return Err(Error::Numeric("parameters became non-finite".into()));
            }
            Ok(out.loss)
        })();
        match step {
            Ok(l) => loss.push(l),
            Err(source) => {
                let partial = TrainReport {
                    config: cfg.clone(),
                    loss,
                    marginals: Vec::new(),
                    eval_cost: f64::NAN,
                    wallclock_s: started.elapsed().as_secs_f64(),
                };
                return Err(TrainError::Aborted {
                    epoch,
                    source,
                    partial: Box::new(partial),
                });
            }
        }
    }

    let eval =
        evaluate_inner(&ensemble, cfg, cfg.eval_seed).map_err(|source| TrainError::Aborted {
            epoch: cfg.epochs,
            source,
            partial: Box::new(TrainReport {
                config: cfg.clone(),
                loss: loss.clone(),
                marginals: Vec::new(),
                eval_cost: f64::NAN,
                wallclock_s: started.elapsed().as_secs_f64(),
            }),
        })?;
    let report = TrainReport {
        config: cfg.clone(),
        loss,
        marginals: eval.marginals,
        eval_cost: eval.cost,
        wallclock_s: started.elapsed().as_secs_f64(),
    };
    Ok((ensemble, report))
}

/// Write `epoch,loss` with 1-based epochs.
pub fn write_loss_csv(path: impl AsRef<Path>, loss: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,loss")?;
    for (k, l) in loss.iter().enumerate() {
        writeln!(w, "{},{l:.16e}", k + 1)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layer, Mlp};

    fn small_config(n_marg: usize, d: usize, m: usize) -> TrainConfig {
        let marginals = (0..n_marg)
            .map(|k| MarginalSpec::gaussian(k as f64, 1.0, d, m))
            .collect();
        let mut cfg = TrainConfig::preset(marginals, 0);
        cfg.batch_size = m;
        cfg.hidden = vec![4, 4];
        cfg.lambdas =
            PenaltyWeights::new((0..n_marg - 1).map(|k| 2.0 + k as f64).collect()).unwrap();
        cfg
    }

    fn random_batches(cfg: &TrainConfig, d: usize, seed: u64) -> Vec<Matrix2D> {
        let mut rng = Rng::seed_from_u64(seed);
        cfg.marginals
            .iter()
            .map(|m| {
                let mut x = m.sample(cfg.batch_size, &mut rng).unwrap();
                assert_eq!(x.cols(), d);
                x.scale(0.5);
                x
            })
            .collect()
    }

    #[test]
    fn loss_forms_share_gradient_direction() {
        let mut cfg = small_config(3, 2, 6);
        let mut rng = Rng::seed_from_u64(11);
        let ens = MapEnsemble::init(&cfg.mlp_spec(2).unwrap(), 2, &mut rng).unwrap();
        let batches = random_batches(&cfg, 2, 12);

        let std = loss_and_grads(&ens, &batches, &cfg).unwrap();
        cfg.loss_form = LossForm::ProductNormalized;
        let prod_form = loss_and_grads(&ens, &batches, &cfg).unwrap();

        let prod = cfg.lambdas.product();
        for (a, b) in std.flat_grads().iter().zip(prod_form.flat_grads()) {
            let expected = a / prod;
            assert!(
                (b - expected).abs() <= 1e-10 * expected.abs().max(1e-300),
                "{b} vs {expected}"
            );
        }
        // Losses differ by the target–target blocks and the factor.
        let yy: f64 = batches[1..]
            .iter()
            .zip(cfg.lambdas.as_slice())
            .map(|(y, l)| l * mmd2_self_term(&cfg.kernel, y, Estimator::Unbiased).unwrap())
            .sum();
        assert!((prod_form.loss - (std.loss - yy) / prod).abs() < 1e-12);
    }

    #[test]
    fn zero_maps_cost_term() {
        let cfg = small_config(3, 2, 5);
        let spec = cfg.mlp_spec(2).unwrap();
        let zero = |_| Mlp {
            spec: spec.clone(),
            params: MlpParams::zeros(&spec),
        };
        let ens = MapEnsemble::new((0..2).map(zero).collect()).unwrap();
        let batches = random_batches(&cfg, 2, 3);
        let out = loss_and_grads(&ens, &batches, &cfg).unwrap();
        // Chain cost with T₂ = T₃ = 0 is ‖x‖² per row.
        let expected: f64 = batches[0]
            .row_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / 5.0;
        assert!((out.decomposition.cost_term - expected).abs() < 1e-14);
    }

    #[test]
    fn hand_expanded_two_point_loss() {
        // T(x) = 1·relu(2x + 10) − 9 = 2x + 1 for x > −5.
        let spec = MlpSpec::new(1, vec![1], Activation::Relu).unwrap();
        let layer = |w: f64, b: f64| Layer {
            weight: Matrix2D::from_vec(1, 1, vec![w]).unwrap(),
            bias: vec![b],
        };
        let params =
            MlpParams::from_layers(&spec, vec![layer(2.0, 10.0), layer(1.0, -9.0)]).unwrap();
        let ens = MapEnsemble::new(vec![Mlp { spec, params }]).unwrap();

        let mut cfg = TrainConfig::preset(
            vec![
                MarginalSpec::gaussian(0.0, 1.0, 1, 2),
                MarginalSpec::gaussian(0.0, 1.0, 1, 2),
            ],
            0,
        );
        cfg.batch_size = 2;
        cfg.lambdas = PenaltyWeights::new(vec![3.0]).unwrap();
        let x1 = Matrix2D::from_vec(2, 1, vec![0.5, -1.0]).unwrap();
        let x2 = Matrix2D::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let out = loss_and_grads(&ens, &[x1, x2], &cfg).unwrap();

        // T(X₁) = (2, −1).
        let e = f64::exp;
        let cost = (1.5f64.powi(2) + 0.0) / 2.0;
        let xx = 2.0 * e(-9.0) / 2.0;
        let yy = 2.0 * e(-4.0) / 2.0;
        let cross = (e(-1.0) + e(-1.0) + e(-4.0) + e(-16.0)) / 4.0;
        let expected = cost + 3.0 * (xx - 2.0 * cross + yy);
        assert!(
            (out.loss - expected).abs() < 1e-14,
            "{} vs {expected}",
            out.loss
        );
        assert!((out.decomposition.cost_term - cost).abs() < 1e-15);
    }

    #[test]
    fn batch_contracts() {
        let cfg = small_config(3, 2, 4);
        let ens =
            MapEnsemble::init(&cfg.mlp_spec(2).unwrap(), 2, &mut Rng::seed_from_u64(0)).unwrap();
        let batches = random_batches(&cfg, 2, 1);
        assert!(matches!(
            loss_and_grads(&ens, &batches[..2], &cfg),
            Err(Error::Shape(_))
        ));
        let mut bad = batches.clone();
        bad[2] = Matrix2D::zeros(3, 2);
        assert!(matches!(
            loss_and_grads(&ens, &bad, &cfg),
            Err(Error::Shape(_))
        ));
        let mut bad = batches;
        bad[1] = Matrix2D::zeros(4, 3);
        assert!(matches!(
            loss_and_grads(&ens, &bad, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::gauss_shift();
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.marginals.truncate(1);
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.lambdas = PenaltyWeights::new(vec![1.0]).unwrap();
        assert!(c.validate().is_err());
        assert!(PenaltyWeights::new(vec![1.0, 0.0]).is_err());
        assert!(ok.clone().with_lambda(-1.0).is_err());
        let mut c = ok;
        c.hidden.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_maps() {
        let mut cfg = small_config(3, 2, 8);
        cfg.eval_samples = 16;
        let (ens, report) = fit(&cfg).unwrap();
        assert!(report.loss.is_empty());
        let mut master = Rng::seed_from_u64(cfg.seed);
        let _data = master.fork();
        let mut init_rng = master.fork();
        let fresh = MapEnsemble::init(&cfg.mlp_spec(2).unwrap(), 2, &mut init_rng).unwrap();
        assert_eq!(ens, fresh);
        assert_eq!(report.marginals.len(), 2);
        assert_eq!(report.marginals[0].index, 2);
    }

    #[test]
    fn report_statistics_match_direct_computation() {
        let mut cfg = small_config(2, 2, 8);
        cfg.epochs = 3;
        cfg.eval_samples = 32;
        let (ens, report) = fit(&cfg).unwrap();
        assert_eq!(report.loss.len(), 3);
        let eval = evaluate(&ens, &cfg, cfg.eval_seed).unwrap();
        let (mean, sd) = eval.pushed[0].pooled_mean_sd();
        assert_eq!(report.marginals[0].mean, mean);
        assert_eq!(report.marginals[0].sd, sd);
        assert_eq!(report.marginals, eval.marginals);
        let back = TrainReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back.config, report.config);
        assert_eq!(back.loss, report.loss);
    }

    #[test]
    fn divergence_aborts_with_partial_report() {
        let mut cfg = small_config(2, 2, 8);
        cfg.epochs = 200;
        cfg = cfg.with_optimizer(OptimizerKind::Sgd);
        cfg.lr = 1e30;
        match fit(&cfg) {
            Err(TrainError::Aborted { epoch, partial, .. }) => {
                assert!((1..=200).contains(&epoch));
                assert_eq!(partial.loss.len(), epoch - 1);
            }
            other => panic!("expected abort, got {:?}", other.map(|(_, r)| r.loss)),
        }
    }

    #[test]
    fn loss_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &[1.5, -0.25]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,1.5"));
        let v: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, -0.25);
        write_loss_csv(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,loss\n");
    }
}
