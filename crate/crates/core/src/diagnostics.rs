//! Finite-difference gradient checks for every tape op and for the full
//! training loss on a 4-patch model.

use rand::Rng;

use crate::error::Result;
use crate::matching::{sinkhorn_on_tape, DiscreteDistribution, SinkhornConfig};
use crate::params::{BoundParams, ModelParams};
use crate::pipeline::{pair_forward, PipelineOptions};
use crate::rng::{seeded, SeededRng};
use crate::shuffle::{local_patch_shuffle, ShuffleConfig};
use crate::tensor::{grad_check_many, Tape, Tensor, TensorError, Var};
use crate::vit::EncoderConfig;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError>>;

fn uniform(rng: &mut SeededRng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces `out` to a scalar through fixed random weights so that every
/// output entry carries a distinct sensitivity.
fn weighted(tape: &mut Tape, out: Var, weights: &Tensor) -> std::result::Result<Var, TensorError> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Vec<usize>, OpFn)> {
    fn case(
        name: &'static str,
        inputs: &[&[usize]],
        out: &[usize],
        f: impl Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError> + 'static,
    ) -> (&'static str, Vec<Vec<usize>>, Vec<usize>, OpFn) {
        (
            name,
            inputs.iter().map(|d| d.to_vec()).collect(),
            out.to_vec(),
            Box::new(f),
        )
    }
    vec![
        case("add_broadcast", &[&[2, 3], &[3]], &[2, 3], |t, v| {
            t.add(v[0], v[1])
        }),
        case("sub_broadcast", &[&[2, 3], &[2, 1]], &[2, 3], |t, v| {
            t.sub(v[0], v[1])
        }),
        case("mul_broadcast", &[&[2, 3], &[2, 1]], &[2, 3], |t, v| {
            t.mul(v[0], v[1])
        }),
        case("div", &[&[2, 3], &[2, 3]], &[2, 3], |t, v| {
            let d = t.add_scalar(v[1], 2.0);
            t.div(v[0], d)
        }),
        case("scale", &[&[4]], &[4], |t, v| Ok(t.scale(v[0], -1.7))),
        case("add_scalar", &[&[4]], &[4], |t, v| {
            Ok(t.add_scalar(v[0], 0.3))
        }),
        case("matmul", &[&[2, 3], &[3, 4]], &[2, 4], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("transpose", &[&[2, 3]], &[3, 2], |t, v| t.transpose(v[0])),
        case("reshape", &[&[2, 3]], &[3, 2], |t, v| {
            t.reshape(v[0], &[3, 2])
        }),
        case("concat", &[&[2, 3], &[1, 3]], &[3, 3], |t, v| {
            t.concat(&[v[0], v[1]], 0)
        }),
        case("narrow", &[&[3, 4]], &[3, 2], |t, v| {
            t.narrow(v[0], 1, 1, 2)
        }),
        case("split", &[&[4, 2]], &[1, 2], |t, v| {
            Ok(t.split(v[0], 0, &[3, 1])?[1])
        }),
        case("exp", &[&[5]], &[5], |t, v| t.exp(v[0])),
        case("ln", &[&[5]], &[5], |t, v| {
            let s = t.add_scalar(v[0], 1.5);
            t.ln(s)
        }),
        case("sqrt", &[&[5]], &[5], |t, v| {
            let s = t.add_scalar(v[0], 1.5);
            t.sqrt(s)
        }),
        case("abs", &[&[5]], &[5], |t, v| Ok(t.abs(v[0]))),
        case("gelu", &[&[6]], &[6], |t, v| Ok(t.gelu(v[0]))),
        case("relu", &[&[6]], &[6], |t, v| Ok(t.relu(v[0]))),
        case("softmax_rows", &[&[3, 4]], &[3, 4], |t, v| {
            t.softmax(v[0], 1)
        }),
        case("softmax_cols", &[&[3, 4]], &[3, 4], |t, v| {
            t.softmax(v[0], 0)
        }),
        case("log_softmax", &[&[2, 5]], &[2, 5], |t, v| {
            t.log_softmax(v[0], 1)
        }),
        case("layer_norm", &[&[3, 5]], &[3, 5], |t, v| t.layer_norm(v[0])),
        case("sum_axes", &[&[2, 3, 4]], &[2, 1, 4], |t, v| {
            t.sum(v[0], &[1])
        }),
        case("mean_axes", &[&[2, 3, 4]], &[2, 1, 1], |t, v| {
            t.mean(v[0], &[1, 2])
        }),
        case("l1_distance", &[&[3, 3], &[3, 3]], &[], |t, v| {
            t.l1_distance(v[0], v[1])
        }),
        case(
            "conv3x3",
            &[&[2, 4, 3], &[3, 2, 3, 3], &[3]],
            &[3, 4, 3],
            |t, v| t.conv3x3(v[0], v[1], v[2]),
        ),
        case("upsample_bilinear", &[&[2, 3, 3]], &[2, 7, 5], |t, v| {
            t.upsample_bilinear(v[0], 7, 5)
        }),
        case("minmax_normalize", &[&[2, 6]], &[2, 6], |t, v| {
            t.minmax_normalize(v[0], 6)
        }),
        case("cosine_cost", &[&[3, 4], &[3, 5]], &[4, 5], |t, v| {
            t.cosine_cost(v[0], v[1])
        }),
        case("sinkhorn", &[&[3, 3]], &[3, 3], |t, v| {
            let a = DiscreteDistribution::new(Tensor::from_vec(vec![0.2, 0.5, 0.3]))?;
            let b = DiscreteDistribution::new(Tensor::from_vec(vec![0.4, 0.4, 0.2]))?;
            let cfg = SinkhornConfig {
                epsilon: 0.1,
                max_iters: 20,
                tol: 0.0,
            };
            Ok(sinkhorn_on_tape(t, v[0], &a, &b, &cfg)?.0)
        }),
    ]
}

/// Checks every differentiable op at a random point with entries in
/// `[-1, 1]`.
pub fn op_grad_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    for (name, inputs, out_dims, f) in op_cases() {
        let points: Vec<Tensor> = inputs.iter().map(|d| uniform(&mut rng, d)).collect();
        let weights = if out_dims.is_empty() {
            Tensor::scalar(1.0)
        } else {
            Tensor::from_fn(&out_dims, |_| rng.gen_range(0.5..1.5))
        };
        let err = grad_check_many(
            |tape, vars| {
                let y = f(tape, vars)?;
                weighted(tape, y, &weights)
            },
            &points,
            FD_STEP,
        )?;
        out.push(GradCheck {
            name: name.to_string(),
            max_rel_error: err,
        });
    }
    Ok(out)
}

/// Gradient of the total loss with respect to every parameter of the
/// 4-patch, 2-class model, against central differences. Targets and
/// marginals are computed once and held fixed; Sinkhorn runs exactly
/// `sinkhorn_iters` iterations.
pub fn pipeline_grad_check(
    seed: u64,
    use_across: bool,
    sinkhorn_iters: usize,
) -> Result<GradCheck> {
    let cfg = EncoderConfig::tiny();
    let mut rng = seeded(seed);
    // spread the weights out so that gradients sit well above rounding noise
    let base = ModelParams::init(&cfg, seed)?;
    let named: Vec<(String, Tensor)> = base
        .iter()
        .map(|(k, v)| {
            (
                k.to_string(),
                Tensor::from_fn(v.dims(), |_| rng.gen_range(-1.0..1.0)),
            )
        })
        .collect();
    let params = ModelParams::from_named(&cfg, named)?;
    let image = Tensor::from_fn(&[cfg.channels, cfg.image_size, cfg.image_size], |_| {
        rng.gen_range(0.0..1.0)
    });
    let (shuffled, _) =
        local_patch_shuffle(&image, &ShuffleConfig::new(cfg.patch_size, 1.0, seed)?)?;
    let label = 1;
    let opts = PipelineOptions {
        use_matching: true,
        use_across,
        sinkhorn: SinkhornConfig {
            epsilon: 0.1,
            max_iters: sinkhorn_iters,
            tol: 0.0,
        },
        ..PipelineOptions::default()
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let targets = pair_forward(
        &mut tape,
        &bound,
        &cfg,
        &opts,
        &image,
        Some(&shuffled),
        label,
        None,
    )?
    .targets;

    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    let points: Vec<Tensor> = params.iter().map(|(_, v)| v.clone()).collect();
    let err = grad_check_many(
        |tape, vars| {
            let bound = BoundParams::from_vars(&names, vars)?;
            let fwd = pair_forward(
                tape,
                &bound,
                &cfg,
                &opts,
                &image,
                Some(&shuffled),
                label,
                Some(&targets),
            )?;
            Ok(fwd.loss)
        },
        &points,
        FD_STEP,
    )?;
    Ok(GradCheck {
        name: if use_across {
            "total_loss_with_across".into()
        } else {
            "total_loss".into()
        },
        max_rel_error: err,
    })
}
