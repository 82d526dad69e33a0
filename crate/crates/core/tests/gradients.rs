mod common;

use common::{
    composite_error, loss_gradient_error, micro_config, micro_params, random_images, random_tensor, rng,
    LossKind,
};
use rand::Rng;
use stylebridge::engine::StVariant;
use stylebridge::losses;
use stylebridge::model::{extract_stats, forward, statistic_bridge, BridgeStats, ParamVars};
use stylebridge::tensor::{check_gradients, check_gradients_multi, Tape, Tensor, Var};
use stylebridge::Result;

/// Individual ops and losses.
const OP_GRAD_TOL: f64 = 1e-5;
/// Whole-model and composite objectives.
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const SEEDS: u64 = 10;

#[test]
fn loss_gradients() {
    for kind in LossKind::ALL {
        for seed in 0..SEEDS {
            let err = loss_gradient_error(kind, seed);
            assert!(err < OP_GRAD_TOL, "{kind:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn softmax_cross_entropy_at_uniform_logits() {
    let logits = Tensor::<f64>::zeros(&[3, 10]);
    let err = check_gradients(|t, x| losses::pce(t, x, &[0, 5, 9]), &logits, FD_STEP).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn bridge_gradients_reach_features_and_statistics() {
    for seed in 0..SEEDS {
        let mut r = rng(400 + seed);
        let z = random_tensor(&[2, 5, 3], 1.0, &mut r);
        let mu = random_tensor(&[2, 3], 1.0, &mut r);
        let sigma = Tensor::from_fn(&[2, 3], |_| 0.5 + r.random::<f64>());
        let w = random_tensor(&[2, 5, 3], 1.0, &mut r);
        let err = check_gradients_multi(
            |t, v| {
                let out = statistic_bridge(t, v[0], v[1], v[2], 1e-5)?;
                let wv = t.constant(w.clone());
                let s = t.mul(out, wv)?;
                let s = t.square(s)?;
                t.sum_all(s)
            },
            &[z, mu, sigma],
            FD_STEP,
        )
        .unwrap();
        assert!(err < OP_GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn matmul_and_reduction_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(500 + seed);
        let a = random_tensor(&[3, 4], 1.0, &mut r);
        let b = random_tensor(&[4, 2], 1.0, &mut r);
        let err = check_gradients_multi(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let var = t.var(m, &[0])?;
                let mean = t.mean(m, &[1])?;
                let mean = t.square(mean)?;
                let s1 = t.sum_all(var)?;
                let s2 = t.sum_all(mean)?;
                t.add(s1, s2)
            },
            &[a, b],
            FD_STEP,
        )
        .unwrap();
        assert!(err < OP_GRAD_TOL, "seed {seed}: {err}");
    }
}

fn model_loss(t: &mut Tape<f64>, vars: &[Var], bridged: bool, seed: u64) -> Result<Var> {
    let cfg = micro_config();
    let pv = ParamVars::from_vars(cfg, vars.to_vec())?;
    let mut r = rng(seed);
    let images = random_images(2, cfg.image_size, cfg.channels, &mut r);
    let bridge = if bridged {
        let mu = t.constant(random_tensor(&[2, cfg.embed_dim], 1.0, &mut r));
        let sigma = t.constant(Tensor::from_fn(&[2, cfg.embed_dim], |_| 0.5 + r.random::<f64>()));
        Some(BridgeStats { mu, sigma })
    } else {
        None
    };
    let out = forward(t, &pv, &images, bridge.as_ref())?;
    let ce = losses::pce(t, out.logits, &[0, 2])?;
    let e = t.sum_all(out.embedding)?;
    let e = t.square(e)?;
    t.add(ce, e)
}

#[test]
fn full_model_gradients() {
    for seed in 0..3 {
        let params = micro_params(600 + seed);
        let err = check_gradients_multi(
            |t, v| model_loss(t, v, false, seed),
            params.tensors(),
            FD_STEP,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn bridged_model_gradients() {
    // The bridge removes each channel's own mean, so the patch-embedding
    // bias cancels exactly and its gradient must vanish. The remaining
    // parameters are checked against finite differences with the bias held
    // fixed (a zero gradient has no meaningful relative error).
    const EMBED_BIAS: usize = 1;
    for seed in 0..3 {
        let params = micro_params(650 + seed);
        let mut t = Tape::new();
        let vars: Vec<Var> = params.tensors().iter().map(|x| t.param(x.clone())).collect();
        let loss = model_loss(&mut t, &vars, true, seed).unwrap();
        let g = t.backward(loss).unwrap();
        let bias_grad = g.get_or_zeros(vars[EMBED_BIAS], &t);
        assert!(bias_grad.data().iter().all(|v| v.abs() < 1e-12));

        let bias = params.tensors()[EMBED_BIAS].clone();
        let mut rest = params.tensors().to_vec();
        rest.remove(EMBED_BIAS);
        let err = check_gradients_multi(
            |t, v| {
                let mut all = v.to_vec();
                all.insert(EMBED_BIAS, t.constant(bias.clone()));
                model_loss(t, &all, true, seed)
            },
            &rest,
            FD_STEP,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn composite_objective_gradients() {
    for seed in 0..SEEDS {
        let err = composite_error(seed, StVariant::TeacherStudent);
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
    }
    let err = composite_error(0, StVariant::EntropyMin);
    assert!(err < GRAD_TOL, "entropy variant: {err}");
}

#[test]
fn target_statistics_carry_gradient() {
    // The bridge reads the student's own target statistics without
    // detaching them, so the knowledge loss also differentiates through the
    // target pass.
    let cfg = micro_config();
    let params = micro_params(900);
    let mut r = rng(901);
    let targets = random_images(2, cfg.image_size, cfg.channels, &mut r);
    let knowledge = random_images(2, cfg.image_size, cfg.channels, &mut r);
    let grad_of_embed = |detach: bool| {
        let mut t = Tape::new();
        let pv = params.bind(&mut t, |_| true);
        let tout = forward(&mut t, &pv, &targets, None).unwrap();
        let mut stats = extract_stats(&mut t, tout.shallow).unwrap();
        if detach {
            stats = BridgeStats {
                mu: t.detach(stats.mu),
                sigma: t.detach(stats.sigma),
            };
        }
        let kout = forward(&mut t, &pv, &knowledge, Some(&stats)).unwrap();
        let loss = losses::pce(&mut t, kout.logits, &[0, 1]).unwrap();
        let g = t.backward(loss).unwrap();
        g.get_or_zeros(pv.all()[0], &t)
    };
    let attached = grad_of_embed(false);
    let detached = grad_of_embed(true);
    assert!(attached.max_abs_diff(&detached).unwrap() > 1e-9);
}
