//! Central finite-difference checks of tape gradients.
//!
//! A vector-valued function `f` is reduced to a scalar through a fixed random
//! weighting `r`, `L = Σ r ⊙ f(x)`, so that no gradient is degenerate. The
//! numeric side only ever evaluates forward values; it shares no code with
//! the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{
    blocks::{self, AttnVars, HeadVars, SeVars},
    Inputs, ModelConfig, PicnetModel, Variant,
};
use crate::tensor::{concat, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const TOL_POINTWISE: f64 = 1e-6;
pub const TOL_CONV: f64 = 1e-4;
pub const TOL_END_TO_END: f64 = 1e-3;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Which flat coordinates of a tensor of `n` elements to probe.
fn probe_indices(n: usize, max_coords: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max_coords {
        Some(m) if m < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..m {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
            }
            idx.truncate(m);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Checks the gradient of `Σ r ⊙ f(inputs)` w.r.t. every input. Returns the
/// largest per-input relative error.
pub fn check_op<F>(
    inputs: &[Tensor],
    f: F,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.value())
    };
    let out = eval(inputs)?;
    let weights = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng);

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let y = f(&tape, &vars)?;
    let loss = y.mul(&tape.constant(weights.clone()))?.sum()?;
    let grads = loss.backward()?;

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic_full = grads.tensor(*var).into_data();
        let idx = probe_indices(inputs[i].numel(), max_coords, &mut rng);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let mut probe = inputs.to_vec();
            let base = probe[i].data()[j];
            let mut shifted = |delta: f64| -> Result<f64> {
                let mut d = probe[i].data().to_vec();
                d[j] = base + delta;
                probe[i].set_data(d)?;
                Ok(weighted_sum(eval(&probe)?.data(), weights.data()))
            };
            let plus = shifted(FD_STEP)?;
            let minus = shifted(-FD_STEP)?;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
            analytic.push(analytic_full[j]);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Checks the gradient of the model's total loss w.r.t. every named
/// parameter, probing up to `max_coords` coordinates per tensor. Returns the
/// largest per-tensor relative error and the name it occurred at.
pub fn check_model(
    model: &PicnetModel,
    x_h: &Tensor,
    x_aux: &Tensor,
    labels: &[usize],
    max_coords: Option<usize>,
    seed: u64,
) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let loss_of = |m: &PicnetModel| -> Result<f64> {
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let pass = m.forward(&tape, &bound, x_h, x_aux)?;
        m.loss(&pass, labels)?.total.item()
    };

    let tape = Tape::new();
    let bound = model.bind(&tape);
    let pass = model.forward(&tape, &bound, x_h, x_aux)?;
    let grads = model.loss(&pass, labels)?.total.backward()?;

    let mut worst = (0.0, String::new());
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let var = bound.get(&name)?;
        let analytic_full = grads.tensor(var).into_data();
        let n = analytic_full.len();
        let idx = probe_indices(n, max_coords, &mut rng);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        let mut probe = model.clone();
        for &j in &idx {
            let base = model.params().get(&name)?.data().to_vec();
            let mut at = |delta: f64| -> Result<f64> {
                let mut d = base.clone();
                d[j] += delta;
                probe.params_mut().get_mut(&name)?.set_data(d)?;
                loss_of(&probe)
            };
            let plus = at(FD_STEP)?;
            let minus = at(-FD_STEP)?;
            probe.params_mut().get_mut(&name)?.set_data(base)?;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
            analytic.push(analytic_full[j]);
        }
        let err = relative_error(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, name);
        }
    }
    Ok(worst)
}

/// Outcome of one named check, worst case over all seeds.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
    pub seeds: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

/// The configuration used for end-to-end checks: k=4, N_p=6, d=8, K=3.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_pca: 6,
        patch: 4,
        n_fim: 1,
        c_h: 4,
        c_x: 4,
        d_model: 8,
        n_classes: 3,
        aux_channels: 2,
        lambda1: 0.1,
        lambda2: 0.1,
        se_reduction: 2,
        variant: Variant::Full,
        inputs: Inputs::Both,
    }
}

type CaseFn = fn(&mut ChaCha8Rng, u64) -> Result<f64>;

fn rnd(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn se_inputs(rng: &mut ChaCha8Rng, c: usize, r: usize) -> Vec<Tensor> {
    vec![rnd(rng, &[c, r]), rnd(rng, &[r]), rnd(rng, &[r, c]), rnd(rng, &[c])]
}

fn case_add(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
    check_op(&[rnd(rng, &s), rnd(rng, &s)], |_, v| v[0].add(&v[1]), None, seed)
}

fn case_sub_mul(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
    check_op(
        &[rnd(rng, &s), rnd(rng, &s)],
        |_, v| v[0].sub(&v[1])?.mul(&v[0])?.square()?.scale(0.5),
        None,
        seed,
    )
}

fn case_matmul(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
    check_op(&[rnd(rng, &[m, k]), rnd(rng, &[k, n])], |_, v| v[0].matmul(&v[1]), None, seed)
}

fn case_bmm_transpose(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    check_op(
        &[rnd(rng, &[b, m, k]), rnd(rng, &[b, n, k])],
        |_, v| v[0].bmm(&v[1].transpose_last2()?),
        None,
        seed,
    )
}

fn case_expand_bias(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, m, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    check_op(
        &[rnd(rng, &[m, n]), rnd(rng, &[n])],
        move |_, v| v[0].expand_batch(b)?.add_row_bias(&v[1]),
        None,
        seed,
    )
}

fn case_scale_channels(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
    check_op(
        &[rnd(rng, &s), rnd(rng, &s[..2])],
        |_, v| v[0].scale_channels(&v[1]),
        None,
        seed,
    )
}

fn case_softmax(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 4), dim(rng, 2, 6)];
    check_op(&[rnd(rng, &s).reshape(&s)?], |_, v| v[0].scale(3.0)?.softmax_rows(), None, seed)
}

fn case_relu(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 2, 12)];
    check_op(&[rnd(rng, &s)], |_, v| v[0].relu(), None, seed)
}

fn case_sigmoid(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 2, 8)];
    check_op(&[rnd(rng, &s).reshape(&s)?], |_, v| v[0].scale(4.0)?.sigmoid(), None, seed)
}

fn case_concat(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let axis = dim(rng, 0, 2);
    let mut a = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    let mut b = a;
    b[axis] = dim(rng, 1, 4);
    a[axis] = dim(rng, 1, 4);
    check_op(&[rnd(rng, &a), rnd(rng, &b)], move |_, v| concat(&[v[0], v[1]], axis), None, seed)
}

fn case_global_avg_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 5)];
    check_op(&[rnd(rng, &s)], |_, v| v[0].global_avg_pool(), None, seed)
}

fn case_frobenius(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [2, 3, 4];
    check_op(&[rnd(rng, &s)], |_, v| v[0].frobenius_norm(), None, seed)
}

fn case_row_norms(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 4), dim(rng, 2, 6)];
    check_op(&[rnd(rng, &s)], |_, v| v[0].row_norms(), None, seed)
}

fn case_cross_entropy(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, k) = (dim(rng, 1, 4), dim(rng, 2, 6));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    check_op(
        &[rnd(rng, &[b, k])],
        move |_, v| v[0].scale(2.0)?.cross_entropy(&labels),
        None,
        seed,
    )
}

fn case_avg_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 7), dim(rng, 2, 7)];
    check_op(&[rnd(rng, &s)], |_, v| v[0].avg_pool2d(2, 2), None, seed)
}

fn case_upsample(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4)];
    let (oh, ow) = (s[2] + dim(rng, 0, 5), s[3] + dim(rng, 0, 5));
    check_op(&[rnd(rng, &s)], move |_, v| v[0].bilinear_upsample(oh, ow), None, seed)
}

fn case_conv2d(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4));
    let (h, w, k) = (dim(rng, 3, 6), dim(rng, 3, 6), dim(rng, 1, 3));
    let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
    check_op(
        &[rnd(rng, &[b, ci, h, w]), rnd(rng, &[co, ci, k, k]), rnd(rng, &[co])],
        move |_, v| v[0].conv2d(&v[1], Some(&v[2]), stride, pad),
        None,
        seed,
    )
}

fn case_depthwise(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 3, 6), dim(rng, 3, 6));
    let pad = dim(rng, 0, 1);
    check_op(
        &[rnd(rng, &[b, c, h, w]), rnd(rng, &[c, 1, 3, 3])],
        move |_, v| v[0].depthwise_conv2d(&v[1], 1, pad),
        None,
        seed,
    )
}

fn case_conv3d(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3));
    let (d, h, w) = (dim(rng, 3, 5), dim(rng, 3, 5), dim(rng, 3, 5));
    let stride = dim(rng, 1, 2);
    check_op(
        &[rnd(rng, &[b, ci, d, h, w]), rnd(rng, &[co, ci, 3, 3, 3]), rnd(rng, &[co])],
        move |_, v| v[0].conv3d(&v[1], Some(&v[2]), stride, 1),
        None,
        seed,
    )
}

fn case_freq_separate(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 7), dim(rng, 2, 7)];
    check_op(
        &[rnd(rng, &s)],
        |_, v| {
            let (low, high) = blocks::freq_separate(&v[0])?;
            Ok(high.add(&low.bilinear_upsample(v[0].shape()[2], v[0].shape()[3])?.scale(0.5)?)?)
        },
        None,
        seed,
    )
}

fn case_enhance_high(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, c) = (dim(rng, 1, 2), dim(rng, 1, 4));
    check_op(
        &[rnd(rng, &[b, c, 5, 5]), rnd(rng, &[c, 1, 3, 3])],
        |_, v| blocks::enhance_high(&v[0], &v[1]),
        None,
        seed,
    )
}

fn case_refine_low(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, c, r) = (2, 4, 2);
    let mut inputs = vec![rnd(rng, &[b, c, 3, 3])];
    inputs.extend(se_inputs(rng, c, r));
    check_op(
        &inputs,
        |_, v| {
            let se = SeVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
            blocks::refine_low(&v[0], &se)
        },
        None,
        seed,
    )
}

fn case_fim(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, c, h, r) = (2, 2, 4, 1);
    let mut inputs = vec![rnd(rng, &[b, c, h, h]), rnd(rng, &[b, c, h, h])];
    inputs.push(rnd(rng, &[c, 1, 3, 3]));
    inputs.push(rnd(rng, &[c, 1, 3, 3]));
    inputs.extend(se_inputs(rng, c, r));
    inputs.extend(se_inputs(rng, c, r));
    inputs.push(rnd(rng, &[1, 2, 3, 3, 3]));
    inputs.push(rnd(rng, &[1]));
    inputs.push(rnd(rng, &[c, 2 * c, 3, 3]));
    inputs.push(rnd(rng, &[c]));
    check_op(
        &inputs,
        |_, v| {
            let p = blocks::FimVars {
                high_h: v[2],
                high_x: v[3],
                low_h: SeVars { w1: v[4], b1: v[5], w2: v[6], b2: v[7] },
                low_x: SeVars { w1: v[8], b1: v[9], w2: v[10], b2: v[11] },
                fuse_h_w: v[12],
                fuse_h_b: v[13],
                fuse_x_w: v[14],
                fuse_x_b: v[15],
            };
            let (a, b) = blocks::fim_forward(&v[0], &v[1], &p)?;
            concat(&[a, b], 1)
        },
        None,
        seed,
    )
}

fn case_picm(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, t, d) = (2, 4, 3);
    let mut inputs = vec![rnd(rng, &[b, t, d]), rnd(rng, &[b, t, d])];
    inputs.push(rnd(rng, &[t, d]));
    inputs.push(rnd(rng, &[t, d]));
    for _ in 0..6 {
        inputs.push(rnd(rng, &[d, d]));
    }
    check_op(
        &inputs,
        |_, v| {
            let p = blocks::PicmVars {
                proto_h: v[2],
                proto_x: v[3],
                comp_x: AttnVars { wq: v[4], wk: v[5], wv: v[6] },
                comp_h: AttnVars { wq: v[7], wk: v[8], wv: v[9] },
            };
            let out = blocks::picm_forward(&v[0], &v[1], &p)?;
            concat(&[out.i_h, out.i_x], 2)
        },
        None,
        seed,
    )
}

fn case_head(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, k, d, classes) = (2, 4, 2, 3);
    let inputs = vec![
        rnd(rng, &[b, k * k, d]),
        rnd(rng, &[b, k * k, d]),
        rnd(rng, &[2 * d, 1, 3, 3]),
        rnd(rng, &[2 * d, 1, 3, 3]),
        rnd(rng, &[2 * d, classes]),
        rnd(rng, &[classes]),
    ];
    check_op(
        &inputs,
        move |_, v| {
            let p = HeadVars { dw1: v[2], dw2: v[3], fc_w: v[4], fc_b: v[5] };
            blocks::refine_head(&v[0], &v[1], &p, k)
        },
        None,
        seed,
    )
}

fn case_end_to_end(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let cfg = tiny_config();
    let mut model = PicnetModel::new(cfg.clone(), seed)?;
    // Move prototypes off their all-ones start so every row carries its own gradient.
    for name in ["picm.proto_h", "picm.proto_x"] {
        let p = model.params_mut().get_mut(name)?;
        let jitter: Vec<f64> = p.data().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        p.set_data(jitter)?;
    }
    let k = cfg.patch;
    let x_h = Tensor::uniform(&[2, 1, cfg.n_pca, k, k], 0.0, 1.0, rng);
    let x_aux = Tensor::uniform(&[2, cfg.aux_channels, k, k], 0.0, 1.0, rng);
    let labels = [rng.random_range(0..3), rng.random_range(0..3)];
    Ok(check_model(&model, &x_h, &x_aux, &labels, Some(16), seed)?.0)
}

/// Every check in the suite with its tolerance.
pub fn suite() -> Vec<(&'static str, f64, CaseFn)> {
    vec![
        ("add", TOL_POINTWISE, case_add as CaseFn),
        ("sub/mul/square/scale", TOL_POINTWISE, case_sub_mul),
        ("matmul", TOL_POINTWISE, case_matmul),
        ("bmm/transpose", TOL_POINTWISE, case_bmm_transpose),
        ("expand_batch/add_row_bias", TOL_POINTWISE, case_expand_bias),
        ("scale_channels", TOL_POINTWISE, case_scale_channels),
        ("softmax_rows", TOL_POINTWISE, case_softmax),
        ("relu", TOL_POINTWISE, case_relu),
        ("sigmoid", TOL_POINTWISE, case_sigmoid),
        ("concat", TOL_POINTWISE, case_concat),
        ("global_avg_pool", TOL_POINTWISE, case_global_avg_pool),
        ("frobenius_norm", TOL_POINTWISE, case_frobenius),
        ("row_norms", TOL_POINTWISE, case_row_norms),
        ("cross_entropy", TOL_POINTWISE, case_cross_entropy),
        ("avg_pool2d", TOL_POINTWISE, case_avg_pool),
        ("bilinear_upsample", TOL_POINTWISE, case_upsample),
        ("freq_separate", TOL_POINTWISE, case_freq_separate),
        ("conv2d", TOL_CONV, case_conv2d),
        ("depthwise_conv2d", TOL_CONV, case_depthwise),
        ("conv3d", TOL_CONV, case_conv3d),
        ("enhance_high", TOL_CONV, case_enhance_high),
        ("refine_low", TOL_CONV, case_refine_low),
        ("refine_head", TOL_CONV, case_head),
        ("picm_forward", TOL_END_TO_END, case_picm),
        ("fim_forward", TOL_END_TO_END, case_fim),
        ("end_to_end", TOL_END_TO_END, case_end_to_end),
    ]
}

/// Runs the whole suite over `seeds` seeds derived from `base_seed`.
pub fn run_suite(base_seed: u64, seeds: usize) -> Result<Vec<CheckOutcome>> {
    suite()
        .into_iter()
        .map(|(name, tol, case)| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds as u64 {
                let seed = base_seed.wrapping_mul(1_000_003).wrapping_add(s);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                worst = worst.max(case(&mut rng, seed)?);
            }
            Ok(CheckOutcome {
                name: name.to_string(),
                rel_err: worst,
                tol,
                seeds,
            })
        })
        .collect()
}
