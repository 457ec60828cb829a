//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Which coordinates of each input to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// At most this many coordinates per input, drawn with the given seed.
    Sample { per_input: usize, seed: u64 },
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::NotScalar(out.numel()));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Max over probed coordinates of `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64, coords: Coords) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        out.backward()?;
        vars.iter()
            .map(|v| v.grad().ok_or(Error::DetachedGraph))
            .collect::<Result<_>>()?
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        if !grad.is_finite() {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
        let n = inputs[k].numel();
        let idx: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_input, seed } if per_input < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                let mut v = sample(&mut rng, n, per_input).into_vec();
                v.sort_unstable();
                v
            }
            Coords::Sample { .. } => (0..n).collect(),
        };
        for i in idx {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let up = eval(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let down = eval(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`] probing every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, v| f(tape, v[0]), std::slice::from_ref(x), eps, Coords::All)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `Σ y·r` for a fixed random `r`, so every output coordinate matters.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = y.tape().constant(random(&y.shape(), &mut rng));
    Ok(y.mul(&r)?.sum())
}

/// Named maximum errors of the standard finite-difference suite: every
/// differentiable op, the attention blocks, and the micro-scale model for
/// each variant. `per_input` bounds the probed coordinates per tensor in the
/// model checks.
pub fn standard_suite(eps: f64, per_input: usize) -> Result<Vec<(String, f64)>> {
    use crate::attention::{multi_head_attention, scaled_dot_attention, MhaWeights, Variant};
    use crate::encoders::{AvsModel, ForwardOptions, ModelConfig};
    use crate::nn::params::Bound;
    use crate::nn::{avgpool3d, conv3d, cross_entropy_logits, dropout, layer_norm, linear, LAYER_NORM_EPS};

    type Objective = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases: Vec<(&str, Objective, Vec<Tensor>)> = vec![
        ("add", Box::new(|_, v| project(v[0].add(&v[1])?, 1)), vec![random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)]),
        ("sub", Box::new(|_, v| project(v[0].sub(&v[1])?, 2)), vec![random(&[3], &mut rng), random(&[3], &mut rng)]),
        ("mul", Box::new(|_, v| project(v[0].mul(&v[1])?, 3)), vec![random(&[2, 2], &mut rng), random(&[2, 2], &mut rng)]),
        ("scale", Box::new(|_, v| project(v[0].scale(-1.7).add_scalar(0.3), 4)), vec![random(&[4], &mut rng)]),
        ("relu", Box::new(|_, v| project(v[0].relu(), 5)), vec![random(&[3, 4], &mut rng)]),
        ("matmul", Box::new(|_, v| project(v[0].matmul(&v[1])?, 6)), vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)]),
        ("softmax", Box::new(|_, v| project(v[0].softmax_lastdim()?, 7)), vec![random(&[3, 5], &mut rng)]),
        ("transpose", Box::new(|_, v| project(v[0].transpose(&[2, 0, 1])?.reshape(&[4, 6])?, 8)), vec![random(&[2, 3, 4], &mut rng)]),
        ("concat_slice", Box::new(|_, v| {
            let c = Var::concat(&[v[0], v[1]], 1)?;
            project(c.slice(1, 1..4)?, 9)
        }), vec![random(&[2, 2], &mut rng), random(&[2, 3], &mut rng)]),
        ("mean", Box::new(|_, v| project(v[0].mean(1)?, 10)), vec![random(&[2, 3, 2], &mut rng)]),
        ("conv3d", Box::new(|_, v| project(conv3d(&v[0], &v[1], Some(&v[2]), [2, 1, 2], [1, 1, 0])?, 11)),
            vec![random(&[2, 4, 3, 5, 2], &mut rng), random(&[3, 2, 2, 2, 3], &mut rng), random(&[3], &mut rng)]),
        ("avgpool3d", Box::new(|_, v| project(avgpool3d(&v[0], [2, 2, 1], [1, 2, 1])?, 12)), vec![random(&[1, 3, 4, 2, 2], &mut rng)]),
        ("linear", Box::new(|_, v| project(linear(&v[0], &v[1], Some(&v[2]))?, 13)),
            vec![random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5], &mut rng)]),
        ("layer_norm", Box::new(|_, v| project(layer_norm(&v[0], &v[1], &v[2], LAYER_NORM_EPS)?, 14)),
            vec![random(&[3, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)]),
        ("dropout", Box::new(|_, v| {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            project(dropout(&v[0], 0.4, true, &mut r)?, 15)
        }), vec![random(&[4, 4], &mut rng)]),
        ("cross_entropy", Box::new(|_, v| cross_entropy_logits(&v[0], &[2, 0, 1])), vec![random(&[3, 4], &mut rng)]),
        ("scaled_dot_attention", Box::new(|_, v| project(scaled_dot_attention(&v[0], &v[1], &v[2])?.0, 16)),
            vec![random(&[2, 3, 4], &mut rng), random(&[2, 5, 4], &mut rng), random(&[2, 5, 4], &mut rng)]),
        ("multi_head_attention", Box::new(|_, v| {
            let w = MhaWeights { wq: v[2], wk: v[3], wv: v[4], wo: v[5] };
            let (out, _) = multi_head_attention(&v[0], &v[1], &v[1], &w, 2)?;
            project(out, 17)
        }), vec![
            random(&[2, 3, 4], &mut rng),
            random(&[2, 2, 4], &mut rng),
            random(&[4, 4], &mut rng),
            random(&[4, 4], &mut rng),
            random(&[4, 4], &mut rng),
            random(&[4, 4], &mut rng),
        ]),
    ];

    let mut results = Vec::new();
    for (name, f, inputs) in cases.drain(..) {
        results.push((name.to_string(), grad_check_many(f, &inputs, eps, Coords::All)?));
    }

    for variant in [Variant::Cma, Variant::Aga, Variant::Vga] {
        let cfg = ModelConfig::micro(variant);
        let model = AvsModel::new(cfg.clone(), 7)?;
        let g = cfg.encoder.clip;
        let mut inputs: Vec<Tensor> = model.params.params().iter().map(|p| p.value.clone()).collect();
        let n = inputs.len();
        inputs.push(random(&[2, g.audio_samples, g.audio_channels], &mut rng));
        inputs.push(random(&[2, g.frames, g.height, g.width, g.visual_channels], &mut rng));
        let err = grad_check_many(
            |_, vars| {
                let b = Bound::from_vars(vars[..n].to_vec());
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let out = model.forward(&b, Some(&vars[n]), &vars[n + 1], ForwardOptions::default(), &mut r)?;
                cross_entropy_logits(&out.logits, &[0, 1])
            },
            &inputs,
            eps,
            Coords::Sample { per_input, seed: 11 },
        )?;
        results.push((format!("avs_model_{}", variant.name().to_lowercase()), err));
    }
    Ok(results)
}
