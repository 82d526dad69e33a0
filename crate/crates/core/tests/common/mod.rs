//! Independent oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylebridge::engine::{objective, ObjectiveInputs, Parts, StVariant};
use stylebridge::model::{argmax_rows, ModelConfig, ModelParams, ParamVars};
use stylebridge::tensor::{check_gradients_multi, Tensor};
use stylebridge::Image;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Textbook O(N⁴) 2D DFT. The inverse carries the `1 / (W·H)` factor.
pub fn naive_dft2(data: &[Complex64], width: usize, height: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::default(); width * height];
    for v in 0..height {
        for u in 0..width {
            let mut acc = Complex64::default();
            for y in 0..height {
                for x in 0..width {
                    let angle = sign
                        * 2.0
                        * std::f64::consts::PI
                        * ((u * x) as f64 / width as f64 + (v * y) as f64 / height as f64);
                    acc += data[y * width + x] * Complex64::from_polar(1.0, angle);
                }
            }
            out[v * width + u] = if inverse {
                acc / (width * height) as f64
            } else {
                acc
            };
        }
    }
    out
}

/// Full-spectrum amplitude swap composed from the naive DFT: content phase,
/// style amplitude, real part of the inverse, clamped to `[0, 1]`.
pub fn naive_swap_plane(content: &[f64], style: &[f64], width: usize, height: usize) -> Vec<f64> {
    let lift = |p: &[f64]| p.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>();
    let c = naive_dft2(&lift(content), width, height, false);
    let s = naive_dft2(&lift(style), width, height, false);
    let spliced: Vec<Complex64> = c
        .iter()
        .zip(&s)
        .map(|(ci, si)| Complex64::from_polar(si.norm(), ci.arg()))
        .collect();
    naive_dft2(&spliced, width, height, true)
        .iter()
        .map(|v| v.re.clamp(0.0, 1.0))
        .collect()
}

/// Supervised contrastive loss written as an explicit loop over
/// anchors `i`, positives `p` and candidates `j`.
pub fn scl_oracle(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = emb.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (dot(&emb[i], &emb[j]) / tau).exp();
            }
        }
        let mut term = 0.0;
        for &p in &positives {
            term += ((dot(&emb[i], &emb[p]) / tau).exp() / denom).ln();
        }
        total += -term / positives.len() as f64;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Small model that keeps finite-difference checks fast.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        patch: 4,
        embed_dim: 6,
        blocks: 2,
        proj_dim: 4,
        classes: 3,
    }
}

pub fn micro_params(seed: u64) -> ModelParams<f64> {
    ModelParams::init(micro_config(), &mut rng(seed)).unwrap()
}

pub fn random_images(n: usize, size: usize, channels: usize, rng: &mut impl Rng) -> Vec<Image> {
    (0..n)
        .map(|_| {
            let data = (0..size * size * channels).map(|_| rng.random::<f32>()).collect();
            Image::new(size, size, channels, data).unwrap()
        })
        .collect()
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// Row-wise softmax of random logits.
pub fn random_probs(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let e: Vec<f64> = (0..cols).map(|_| (3.0 * rng.random::<f64>()).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(&[rows, cols], data).unwrap()
}

pub fn unit_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Worst errors of the fast transforms against the naive DFT over sizes
/// 4, 8, 16 and 32: (oracle, round trip, relative Parseval).
pub fn fft_metrics(seed: u64) -> (f64, f64, f64) {
    use stylebridge::fourier::{fft2, ifft2};
    let mut r = rng(seed);
    let (mut oracle, mut round, mut parseval) = (0.0f64, 0.0f64, 0.0f64);
    for n in [4, 8, 16, 32] {
        let plane: Vec<f64> = (0..n * n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let fast = fft2(&plane, n, n).unwrap();
        let lifted: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let slow = naive_dft2(&lifted, n, n, false);
        oracle = fast.iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(oracle, f64::max);
        let back = ifft2(&fast, n, n).unwrap();
        round = plane.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(round, f64::max);
        let e: f64 = plane.iter().map(|v| v * v).sum();
        let es: f64 = fast.iter().map(|c| c.norm_sqr()).sum::<f64>() / (n * n) as f64;
        parseval = parseval.max((e - es).abs() / e);
    }
    (oracle, round, parseval)
}

/// Style-injection contract measurements: (self-swap error, largest
/// pixel after a zero-amplitude swap, naive composition error).
pub fn inject_metrics(seed: u64) -> (f64, f64, f64) {
    use stylebridge::fourier::{ifft2_complex, splice_spectrum, style_inject, Spectrum};
    let mut r = rng(seed);
    let mut self_swap = 0.0f64;
    for img in random_images(3, 32, 3, &mut r) {
        let out = style_inject(&img, &img, 1.0).unwrap();
        self_swap = self_swap.max(f64::from(out.max_abs_diff(&img)));
    }
    let content = &random_images(1, 32, 3, &mut r)[0];
    let black = Image::filled(32, 32, 3, 0.0).unwrap();
    let zero = style_inject(content, &black, 1.0)
        .unwrap()
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let mut composition = 0.0f64;
    for _ in 0..5 {
        let imgs = random_images(2, 4, 1, &mut r);
        let expect = naive_swap_plane(&imgs[0].plane_f64(0), &imgs[1].plane_f64(0), 4, 4);
        let spliced = splice_spectrum(
            &Spectrum::of_image(&imgs[0]).unwrap(),
            &Spectrum::of_image(&imgs[1]).unwrap(),
            1.0,
        )
        .unwrap();
        let got = ifft2_complex(spliced.plane(0), 4, 4).unwrap();
        composition = got
            .iter()
            .zip(&expect)
            .map(|(g, e)| (g.re.clamp(0.0, 1.0) - e).abs())
            .fold(composition, f64::max);
    }
    (self_swap, zero, composition)
}

/// Bridge restyling over `instances` random `[1, T, D]` maps with target
/// deviations in `[0.1, 2]`:
/// (worst mean error, worst std error, identity-restyle error).
pub fn bridge_metrics(instances: usize, seed: u64) -> (f64, f64, f64) {
    use stylebridge::model::{extract_stats, statistic_bridge, BRIDGE_EPS};
    use stylebridge::tensor::Tape;
    let mut r = rng(seed);
    let (tokens, dims) = (16, 4);
    let (mut mean_err, mut std_err, mut ident) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        // Feature scales log-uniform in [1, 4], like the model's shallow maps.
        let scale = 4f64.powf(r.random::<f64>());
        let z = Tensor::from_fn(&[1, tokens, dims], |_| scale * (r.random::<f64>() * 2.0 - 1.0) + 3.0);
        let mu_t = random_tensor(&[1, dims], 2.0, &mut r);
        let sigma_t = Tensor::from_fn(&[1, dims], |_| 0.1 + 1.9 * r.random::<f64>());

        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let own = extract_stats(&mut t, zv).unwrap();
        assert!(t.value(own.sigma).data().iter().all(|&s| s > 100.0 * BRIDGE_EPS));
        let mv = t.constant(mu_t.clone());
        let sv = t.constant(sigma_t.clone());
        let out = statistic_bridge(&mut t, zv, mv, sv, BRIDGE_EPS).unwrap();
        let after = extract_stats(&mut t, out).unwrap();
        for d in 0..dims {
            mean_err = mean_err.max((t.value(after.mu).data()[d] - mu_t.data()[d]).abs());
            std_err = std_err.max((t.value(after.sigma).data()[d] - sigma_t.data()[d]).abs());
        }

        let same = statistic_bridge(&mut t, zv, own.mu, own.sigma, 0.0).unwrap();
        ident = ident.max(t.value(same).max_abs_diff(&z).unwrap());
    }
    (mean_err, std_err, ident)
}

/// Loss point values: (|pce(uniform) − ln 10|, |sce(uniform) − 2 ln 10|,
/// perfect-pair scl, |4-sample scl − double-loop oracle|).
pub fn loss_point_metrics() -> (f64, f64, f64, f64) {
    use stylebridge::losses::{pce, scl, symmetric_ce};
    use stylebridge::tensor::Tape;
    let ln10 = 10f64.ln();
    let mut t = Tape::<f64>::new();
    let logits = t.constant(Tensor::zeros(&[4, 10]));
    let p = pce(&mut t, logits, &[0, 3, 7, 9]).unwrap();
    let pce_err = (t.value(p).item().unwrap() - ln10).abs();

    let u = Tensor::full(&[4, 10], 0.1);
    let uv = t.constant(u.clone());
    let s = symmetric_ce(&mut t, uv, &u).unwrap();
    let sce_err = (t.value(s).item().unwrap() - 2.0 * ln10).abs();

    let pair = t.constant(Tensor::new(&[2, 3], vec![0.0, 0.6, 0.8, 0.0, 0.6, 0.8]).unwrap());
    let perfect = scl(&mut t, pair, &[4, 4], 1.0).unwrap().loss;
    let perfect = t.value(perfect).item().unwrap().abs();

    let rows = unit_rows(&[
        vec![0.3, -0.2, 0.9],
        vec![0.5, 0.1, 0.4],
        vec![-0.7, 0.2, 0.1],
        vec![0.2, 0.8, -0.3],
    ]);
    let labels = [1, 0, 1, 0];
    let tau = 0.5;
    let e = t.constant(Tensor::new(&[4, 3], rows.concat()).unwrap());
    let got = scl(&mut t, e, &labels, tau).unwrap().loss;
    let scl_err = (t.value(got).item().unwrap() - scl_oracle(&rows, &labels, tau)).abs();
    (pce_err, sce_err, perfect, scl_err)
}

/// Maximum relative gradient error of the combined objective with every
/// part enabled, through the bridged knowledge forward.
pub fn composite_error(seed: u64, variant: StVariant) -> f64 {
    let cfg = micro_config();
    let params = micro_params(700 + seed);
    let mut r = rng(800 + seed);
    let targets = random_images(3, cfg.image_size, cfg.channels, &mut r);
    let knowledge = random_images(3, cfg.image_size, cfg.channels, &mut r);
    let labels = vec![0, 1, 1];
    let teacher = random_probs(3, cfg.classes, &mut r);
    let pseudo = argmax_rows(&teacher);
    let confident = vec![0, 2];
    check_gradients_multi(
        |t, v| {
            let pv = ParamVars::from_vars(cfg, v.to_vec())?;
            let inputs = ObjectiveInputs {
                target_images: &targets,
                knowledge_images: &knowledge,
                knowledge_labels: &labels,
                teacher_probs: Some(&teacher),
                pseudo_labels: &pseudo,
                confident: &confident,
            };
            Ok(objective(t, &pv, &Parts::FULL, variant, 0.7, &inputs)?.total)
        },
        params.tensors(),
        1e-6,
    )
    .unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    Pce,
    Scl,
    SymmetricCe,
    Entropy,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Pce, LossKind::Scl, LossKind::SymmetricCe, LossKind::Entropy];
}

/// Relative gradient error of one loss on a random instance. Contrastive
/// inputs are normalized on the tape so the check covers that path too.
pub fn loss_gradient_error(kind: LossKind, seed: u64) -> f64 {
    use stylebridge::losses;
    use stylebridge::tensor::check_gradients;
    let mut r = rng(1000 * (kind as u64 + 1) + seed);
    let x = random_tensor(&[6, 4], 2.0, &mut r);
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
    let q = random_probs(6, 4, &mut r);
    let tau = 0.5 + r.random::<f64>();
    check_gradients(
        |t, x| match kind {
            LossKind::Pce => losses::pce(t, x, &labels),
            LossKind::Scl => {
                let shape = t.shape(x).to_vec();
                let sq = t.square(x)?;
                let ss = t.sum(sq, &[1])?;
                let norm = t.sqrt(ss)?;
                let norm = t.expand(norm, &shape, &[1])?;
                let h = t.div(x, norm)?;
                Ok(losses::scl(t, h, &labels, tau)?.loss)
            }
            LossKind::SymmetricCe => {
                let p = t.softmax(x)?;
                losses::symmetric_ce(t, p, &q)
            }
            LossKind::Entropy => {
                let p = t.softmax(x)?;
                losses::entropy(t, p)
            }
        },
        &x,
        1e-6,
    )
    .unwrap()
}
