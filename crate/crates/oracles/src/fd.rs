//! Central-difference gradient oracles for every hand-written derivative.

use mm_monge::cost::{cost_batch, cost_grad, CostKind, CostSpec};
use mm_monge::data::MarginalSpec;
use mm_monge::mmd::{mmd2_grad_wrt_x, mmd2_terms, Estimator};
use mm_monge::net::{backward, forward, init, Activation, MapEnsemble, MlpParams, MlpSpec};
use mm_monge::rng::standard_normal_matrix;
use mm_monge::train::{loss_and_grads, LossForm, PenaltyWeights, TrainConfig};
use mm_monge::{KernelConfig, Matrix2D, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

/// Central difference of `f` along every coordinate of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = buf[i];
            buf[i] = orig + FD_STEP;
            let up = f(&buf);
            buf[i] = orig - FD_STEP;
            let down = f(&buf);
            buf[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Worst relative error between an analytic and a numeric gradient.
///
/// Entries whose difference is below the round-off floor of the central
/// difference (`1e-9 · max(1, |f|)`, about 1e5 ulps of `f` divided by the step)
/// count as exact; the rest are measured against `max(|a|, |n|)`.
pub fn worst_rel_err(analytic: &[f64], numeric: &[f64], f_scale: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let floor = 1e-9 * f_scale.abs().max(1.0);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = (a - n).abs();
            if diff <= floor {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix2D {
    standard_normal_matrix(rng, rows, cols).unwrap()
}

fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix2D {
    Matrix2D::from_vec(rows, cols, v.to_vec()).unwrap()
}

/// Σ U ⊙ gram(a, b) with respect to `a`.
pub fn kernel_grad_error(seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let cfg = KernelConfig::gaussian(0.5 + rng.uniform()).unwrap();
    let a = random(5, 3, &mut rng);
    let b = random(4, 3, &mut rng);
    let u = random(5, 4, &mut rng);
    let f = |av: &[f64]| {
        let g = cfg.gram(&mat(5, 3, av), &b).unwrap();
        g.as_slice()
            .iter()
            .zip(u.as_slice())
            .map(|(k, w)| k * w)
            .sum::<f64>()
    };
    let analytic = cfg.gram_grad_wrt_a(&a, &b, &u).unwrap();
    let numeric = central_diff(a.as_slice(), f);
    worst_rel_err(analytic.as_slice(), &numeric, f(a.as_slice()))
}

/// MMD² with respect to the first sample, both estimators.
pub fn mmd_grad_error(seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let cfg = KernelConfig::default();
    let (m, d) = (7, 2);
    let x = random(m, d, &mut rng);
    let mut y = random(m, d, &mut rng);
    y.map_inplace(|v| v + 0.5);
    let mut worst: f64 = 0.0;
    for est in [Estimator::Unbiased, Estimator::Biased] {
        let f = |xv: &[f64]| mmd2_terms(&cfg, &mat(m, d, xv), &y, est).unwrap().value();
        let analytic = mmd2_grad_wrt_x(&cfg, &x, &y, est).unwrap();
        let numeric = central_diff(x.as_slice(), f);
        worst = worst.max(worst_rel_err(
            analytic.as_slice(),
            &numeric,
            f(x.as_slice()),
        ));
    }
    worst
}

/// Summed chain and pairwise costs with respect to every point set.
pub fn cost_grad_error(seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let (m, d, n) = (4, 2, 4);
    let pts: Vec<Matrix2D> = (0..n).map(|_| random(m, d, &mut rng)).collect();
    let mut worst: f64 = 0.0;
    for kind in [CostKind::ChainQuadratic, CostKind::PairwiseQuadratic] {
        let spec = CostSpec::new(kind, n).unwrap();
        let refs: Vec<&Matrix2D> = pts.iter().collect();
        let grads = cost_grad(&spec, &refs).unwrap();
        for k in 0..n {
            let f = |v: &[f64]| {
                let moved = mat(m, d, v);
                let refs: Vec<&Matrix2D> = (0..n)
                    .map(|j| if j == k { &moved } else { &pts[j] })
                    .collect();
                cost_batch(&spec, &refs).unwrap().iter().sum::<f64>()
            };
            let numeric = central_diff(pts[k].as_slice(), f);
            worst = worst.max(worst_rel_err(
                grads[k].as_slice(),
                &numeric,
                f(pts[k].as_slice()),
            ));
        }
    }
    worst
}

/// Smallest |pre-activation| of a ReLU network on `x`; the finite-difference
/// check is only meaningful away from the kink.
pub fn relu_margin(spec: &MlpSpec, params: &MlpParams, x: &Matrix2D) -> f64 {
    if spec.activation != Activation::Relu {
        return f64::INFINITY;
    }
    let (_, tape) = forward(spec, params, x).unwrap();
    tape.pre_activations()
        .iter()
        .flat_map(|z| z.as_slice().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

fn flat(params: &MlpParams) -> Vec<f64> {
    let mut v = Vec::new();
    params.flatten_into(&mut v);
    v
}

/// A 2-8-8-2 network: parameter and input gradients of Σ U ⊙ forward(x).
pub fn mlp_grad_error(seed: u64, activation: Activation) -> f64 {
    let spec = MlpSpec::new(2, vec![8, 8], activation).unwrap();
    let mut rng = Rng::seed_from_u64(seed);
    let (params, x) = loop {
        let mut params = init(&spec, &mut rng).unwrap();
        // Non-zero biases so every parameter matters.
        let mut v = flat(&params);
        for p in v.iter_mut() {
            *p += 0.1 * rng.standard_normal();
        }
        params.assign_flat(&v).unwrap();
        let x = random(5, 2, &mut rng);
        if relu_margin(&spec, &params, &x) > 1e-3 {
            break (params, x);
        }
    };
    let u = random(5, 2, &mut rng);
    let objective = |p: &MlpParams, x: &Matrix2D| {
        let (y, _) = forward(&spec, p, x).unwrap();
        y.as_slice()
            .iter()
            .zip(u.as_slice())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let (_, tape) = forward(&spec, &params, &x).unwrap();
    let (gp, gx) = backward(&spec, &params, &tape, &u).unwrap();

    let theta = flat(&params);
    let f0 = objective(&params, &x);
    let mut scratch = params.clone();
    let numeric_p = central_diff(&theta, |v| {
        scratch.assign_flat(v).unwrap();
        objective(&scratch, &x)
    });
    let numeric_x = central_diff(x.as_slice(), |v| objective(&params, &mat(5, 2, v)));
    worst_rel_err(&flat(&gp), &numeric_p, f0).max(worst_rel_err(gx.as_slice(), &numeric_x, f0))
}

/// Three marginals in 1-d with 1-4-4-1 maps.
pub fn toy_config(form: LossForm, activation: Activation) -> TrainConfig {
    let marginals = vec![
        MarginalSpec::gaussian(0.0, 1.0, 1, 8),
        MarginalSpec::gaussian(0.5, 1.0, 1, 8),
        MarginalSpec::gaussian(1.0, 1.0, 1, 8),
    ];
    let mut cfg = TrainConfig::preset(marginals, 0);
    cfg.batch_size = 8;
    cfg.hidden = vec![4, 4];
    cfg.activation = activation;
    cfg.loss_form = form;
    cfg.lambdas = PenaltyWeights::new(vec![3.0, 7.0]).unwrap();
    cfg
}

/// Assembled training loss with respect to every ensemble parameter.
pub fn loss_grad_error(seed: u64, form: LossForm, activation: Activation) -> f64 {
    let cfg = toy_config(form, activation);
    let spec = cfg.mlp_spec(1).unwrap();
    let mut rng = Rng::seed_from_u64(seed);
    let batches: Vec<Matrix2D> = cfg
        .marginals
        .iter()
        .map(|m| m.sample(cfg.batch_size, &mut rng).unwrap())
        .collect();
    let ens = loop {
        let ens = MapEnsemble::init(&spec, 2, &mut rng).unwrap();
        let mut v = ens.flatten();
        for p in v.iter_mut() {
            *p += 0.1 * rng.standard_normal();
        }
        let mut ens = ens;
        ens.assign_flat(&v).unwrap();
        let ok = ens
            .maps()
            .iter()
            .all(|m| relu_margin(&m.spec, &m.params, &batches[0]) > 1e-3);
        if ok {
            break ens;
        }
    };
    let out = loss_and_grads(&ens, &batches, &cfg).unwrap();
    let theta = ens.flatten();
    let mut scratch = ens.clone();
    let numeric = central_diff(&theta, |v| {
        scratch.assign_flat(v).unwrap();
        loss_and_grads(&scratch, &batches, &cfg).unwrap().loss
    });
    worst_rel_err(&out.flat_grads(), &numeric, out.loss)
}

/// Every gradient check on one seed, labelled.
pub fn all_grad_errors(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("kernel", kernel_grad_error(seed)),
        ("mmd", mmd_grad_error(seed)),
        ("cost", cost_grad_error(seed)),
        ("mlp relu", mlp_grad_error(seed, Activation::Relu)),
        ("mlp tanh", mlp_grad_error(seed, Activation::Tanh)),
        (
            "loss standard",
            loss_grad_error(seed, LossForm::Standard, Activation::Relu),
        ),
        (
            "loss product",
            loss_grad_error(seed, LossForm::ProductNormalized, Activation::Relu),
        ),
        (
            "loss tanh",
            loss_grad_error(seed, LossForm::Standard, Activation::Tanh),
        ),
    ]
}
