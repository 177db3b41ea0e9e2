//! Finite-difference gradient checks over every differentiable operation,
//! every composite loss and the three networks, in 64-bit precision.

use crate::autodiff::gradcheck::{gradcheck, project, GradcheckOptions};
use crate::autodiff::{Graph, NormMode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, dehazing_loss, euclidean_loss, gradient_loss,
    perceptual_loss, transmission_loss, FeatureNet, LossWeights,
};
use crate::networks::{build_dehazer, build_discriminator, build_generator, Network};
use crate::tensor::conv::ConvGeometry;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;

/// Tolerance for single operations and losses.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for whole-network graphs.
pub const NETWORK_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckGroup {
    All,
    Tensor,
    Losses,
    Networks,
}

impl FromStr for CheckGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "tensor" => Ok(Self::Tensor),
            "losses" => Ok(Self::Losses),
            "networks" => Ok(Self::Networks),
            _ => Err(Error::InvalidArgument(format!(
                "unknown check group {s:?} (expected all, tensor, losses or networks)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Number of distinct input shapes checked.
    pub shapes: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

type Shape = [usize; 4];

const SHAPES: [Shape; 3] = [[1, 1, 4, 4], [2, 3, 5, 3], [2, 2, 6, 7]];
const RGB_SHAPES: [Shape; 3] = [[1, 3, 4, 4], [2, 3, 6, 5], [1, 3, 8, 8]];

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 0.0, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs one check per shape built by `inputs` and keeps the worst error.
fn over_shapes<I, F>(name: &str, shapes: &[Shape], tol: f64, inputs: I, f: F) -> Result<CheckResult>
where
    I: Fn(Shape, u64) -> Vec<(&'static str, Tensor<f64>)>,
    F: Fn(&mut Graph<f64>, &[Var], Shape) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for (k, &s) in shapes.iter().enumerate() {
        let ins = inputs(s, 100 * k as u64 + 1);
        let refs: Vec<(&str, Tensor<f64>)> = ins.iter().map(|(n, t)| (*n, t.clone())).collect();
        let rep = gradcheck(&refs, |g, v| f(g, v, s), GradcheckOptions::default())?;
        worst = worst.max(rep.max_rel_err());
    }
    Ok(CheckResult {
        name: name.to_string(),
        shapes: shapes.len(),
        max_rel_err: worst,
        tol,
    })
}

fn unary(
    name: &str,
    lo: f64,
    hi: f64,
    op: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<CheckResult> {
    over_shapes(
        name,
        &SHAPES,
        OP_TOL,
        |s, k| vec![("x", rand_t(&s, lo, hi, k))],
        |g, v, _| {
            let y = op(g, v[0])?;
            project(g, y, 9)
        },
    )
}

fn binary(name: &str, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<CheckResult> {
    over_shapes(
        name,
        &SHAPES,
        OP_TOL,
        |s, k| {
            vec![
                ("a", rand_t(&s, -1.0, 1.0, k)),
                ("b", rand_t(&s, -1.0, 1.0, k + 1)),
            ]
        },
        |g, v, _| {
            let y = op(g, v[0], v[1])?;
            project(g, y, 9)
        },
    )
}

fn tensor_checks() -> Result<Vec<CheckResult>> {
    let conv_cases: [(Shape, usize, usize, usize, usize); 3] = [
        ([1, 1, 5, 5], 2, 3, 1, 1),
        ([2, 3, 6, 6], 2, 4, 2, 1),
        ([1, 2, 7, 5], 3, 3, 2, 0),
    ];
    let mut out = vec![
        over_shapes(
            "conv2d",
            &conv_cases.map(|c| c.0),
            OP_TOL,
            |s, k| {
                let (_, cout, kk, _, _) = conv_cases
                    .iter()
                    .find(|c| c.0 == s)
                    .copied()
                    .unwrap_or(conv_cases[0]);
                vec![
                    ("x", randn(&s, 1.0, k)),
                    ("w", randn(&[cout, s[1], kk, kk], 0.5, k + 1)),
                    ("b", randn(&[cout], 0.5, k + 2)),
                ]
            },
            |g, v, s| {
                let c = conv_cases
                    .iter()
                    .find(|c| c.0 == s)
                    .copied()
                    .unwrap_or(conv_cases[0]);
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new(c.3, c.4))?;
                project(g, y, 9)
            },
        )?,
        over_shapes(
            "conv_transpose2d",
            &conv_cases.map(|c| c.0),
            OP_TOL,
            |s, k| {
                let c = conv_cases
                    .iter()
                    .find(|c| c.0 == s)
                    .copied()
                    .unwrap_or(conv_cases[0]);
                vec![
                    ("x", randn(&s, 1.0, k)),
                    ("w", randn(&[s[1], c.1, c.2 + 1, c.2 + 1], 0.5, k + 1)),
                    ("b", randn(&[c.1], 0.5, k + 2)),
                ]
            },
            |g, v, s| {
                let c = conv_cases
                    .iter()
                    .find(|c| c.0 == s)
                    .copied()
                    .unwrap_or(conv_cases[0]);
                let y =
                    g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeometry::new(c.3.max(1), c.4))?;
                project(g, y, 9)
            },
        )?,
    ];
    for (name, mode) in [
        ("batch_norm_train", NormMode::Train),
        ("batch_norm_eval", NormMode::Eval),
    ] {
        out.push(over_shapes(
            name,
            &SHAPES[1..]
                .iter()
                .copied()
                .chain([[3, 2, 2, 3]])
                .collect::<Vec<_>>(),
            OP_TOL,
            |s, k| {
                vec![
                    ("x", rand_t(&s, -1.0, 2.0, k)),
                    ("gamma", rand_t(&[s[1]], 0.5, 1.5, k + 1)),
                    ("beta", rand_t(&[s[1]], -0.5, 0.5, k + 2)),
                ]
            },
            move |g, v, s| {
                let mut rs = RunningStats::new(s[1]);
                rs.mean = rand_t(&[s[1]], -0.3, 0.3, 5);
                rs.var = rand_t(&[s[1]], 0.5, 1.5, 6);
                let y = g.batch_norm(v[0], v[1], v[2], &mut rs, mode)?;
                project(g, y, 9)
            },
        )?);
    }
    out.push(over_shapes(
        "prelu",
        &SHAPES,
        OP_TOL,
        |s, k| {
            vec![
                ("x", rand_t(&s, -1.0, 1.0, k)),
                ("slope", rand_t(&[s[1]], 0.1, 0.4, k + 1)),
            ]
        },
        |g, v, _| {
            let y = g.prelu(v[0], v[1])?;
            project(g, y, 9)
        },
    )?);
    out.push(unary("relu", -1.0, 1.0, |g, x| Ok(g.relu(x)))?);
    out.push(unary("tanh", -2.0, 2.0, |g, x| Ok(g.tanh(x)))?);
    out.push(unary("sigmoid", -3.0, 3.0, |g, x| Ok(g.sigmoid(x)))?);
    out.push(unary("affine", -1.0, 1.0, |g, x| {
        Ok(g.affine(x, 0.5, 0.25))
    })?);
    out.push(unary("square", -1.0, 1.0, |g, x| Ok(g.square(x)))?);
    out.push(unary("log_eps", 0.1, 1.0, |g, x| g.log_eps(x, 1e-8))?);
    out.push(unary("sum", -1.0, 1.0, |g, x| {
        let s = g.sum(x);
        Ok(g.square(s))
    })?);
    out.push(unary("mean", -1.0, 1.0, |g, x| {
        let s = g.mean(x);
        Ok(g.square(s))
    })?);
    out.push(unary("diff_x", -1.0, 1.0, |g, x| g.diff_x(x))?);
    out.push(unary("diff_y", -1.0, 1.0, |g, x| g.diff_y(x))?);
    out.push(unary("avg_pool2", -1.0, 1.0, |g, x| g.avg_pool2(x))?);
    out.push(unary("slice_channels", -1.0, 1.0, |g, x| {
        let c = g.value(x).shape()[1];
        g.slice_channels(x, c / 2, c - c / 2)
    })?);
    out.push(binary("add", |g, a, b| g.add(a, b))?);
    out.push(binary("sub", |g, a, b| g.sub(a, b))?);
    out.push(binary("mul", |g, a, b| g.mul(a, b))?);
    out.push(binary("concat_channels", |g, a, b| {
        g.concat_channels(a, b)
    })?);
    out.push(over_shapes(
        "add_prefix",
        &SHAPES,
        OP_TOL,
        |s, k| {
            vec![
                (
                    "shortcut",
                    rand_t(&[s[0], s[1] + 1, s[2], s[3]], -1.0, 1.0, k),
                ),
                ("main", rand_t(&s, -1.0, 1.0, k + 1)),
            ]
        },
        |g, v, _| {
            let y = g.add_prefix(v[0], v[1])?;
            project(g, y, 9)
        },
    )?);
    Ok(out)
}

fn loss_checks() -> Result<Vec<CheckResult>> {
    let pair = |s: Shape, k: u64| {
        vec![
            ("pred", rand_t(&s, 0.0, 1.0, k)),
            ("target", rand_t(&s, 0.0, 1.0, k + 1)),
        ]
    };
    let feat = FeatureNet::<f64>::new(3);
    let w = LossWeights::default();
    Ok(vec![
        over_shapes("euclidean_loss", &SHAPES, OP_TOL, pair, |g, v, _| {
            euclidean_loss(g, v[0], v[1], true)
        })?,
        over_shapes("gradient_loss", &SHAPES, OP_TOL, pair, |g, v, _| {
            gradient_loss(g, v[0], v[1], true)
        })?,
        over_shapes(
            "adversarial_g_loss",
            &SHAPES,
            OP_TOL,
            |s, k| vec![("fake", rand_t(&s, 0.05, 0.95, k))],
            |g, v, _| adversarial_g_loss(g, v[0]),
        )?,
        over_shapes(
            "adversarial_d_loss",
            &SHAPES,
            OP_TOL,
            |s, k| {
                vec![
                    ("real", rand_t(&s, 0.05, 0.95, k)),
                    ("fake", rand_t(&s, 0.05, 0.95, k + 1)),
                ]
            },
            |g, v, _| adversarial_d_loss(g, v[0], v[1]),
        )?,
        over_shapes(
            "transmission_loss",
            &SHAPES,
            OP_TOL,
            |s, k| {
                let mut v = pair(s, k);
                v.push(("d_fake", rand_t(&s, 0.05, 0.95, k + 2)));
                v
            },
            |g, v, _| Ok(transmission_loss(g, v[0], v[1], Some(v[2]), &w)?.total),
        )?,
        over_shapes("perceptual_loss", &RGB_SHAPES, OP_TOL, pair, |g, v, _| {
            perceptual_loss(g, v[0], v[1], &feat, true)
        })?,
        over_shapes("dehazing_loss", &RGB_SHAPES, OP_TOL, pair, |g, v, _| {
            Ok(dehazing_loss(g, v[0], v[1], Some(&feat), &w)?.total)
        })?,
    ])
}

/// Checks a whole network in training mode, probing a sample of each
/// parameter tensor plus the input.
fn network_check(
    name: &str,
    net: Network<f64>,
    input: Shape,
    guide: bool,
    per_tensor: usize,
) -> Result<CheckResult> {
    let mut inputs: Vec<(&str, Tensor<f64>)> = vec![("input", rand_t(&input, -1.0, 1.0, 11))];
    if guide {
        inputs.push((
            "guide",
            rand_t(&[input[0], 1, input[2], input[3]], 0.0, 1.0, 12),
        ));
    }
    let first = inputs.len();
    for p in &net.params {
        inputs.push(("param", p.value.clone()));
    }
    let rep = gradcheck(
        &inputs,
        |g, v| {
            let mut n = net.clone();
            let gd = guide.then(|| v[1]);
            let fwd = n.forward_with(g, v[0], gd, NormMode::Train, v[first..].to_vec())?;
            project(g, fwd.output, 13)
        },
        // Small pre-activations after the first layers sit close to PReLU
        // kinks, so the step is smaller than for single operations. Biases
        // feeding batch norm have zero gradient; the floor absorbs roundoff.
        GradcheckOptions {
            step: 1e-6,
            floor: 1e-5,
            max_elements: Some(per_tensor),
            seed: 3,
        },
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        shapes: 1,
        max_rel_err: rep.max_rel_err(),
        tol: NETWORK_TOL,
    })
}

/// Desk-scale networks: generator (scale 1/8, depth 6) on 64×64, patch
/// discriminator on 32×32, dehazer on 16×16, batch 2.
fn networks_checks() -> Result<Vec<CheckResult>> {
    let seeded = |mut n: Network<f64>| {
        n.init_params(5);
        n
    };
    Ok(vec![
        network_check(
            "generator",
            seeded(build_generator(0.125, 6)?),
            [2, 3, 64, 64],
            false,
            6,
        )?,
        network_check(
            "discriminator",
            seeded(build_discriminator(0.125, 1)?),
            [2, 1, 32, 32],
            false,
            6,
        )?,
        network_check(
            "dehazer",
            seeded(build_dehazer(0.125)?),
            [2, 3, 16, 16],
            true,
            6,
        )?,
    ])
}

pub fn run_checks(group: CheckGroup) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(group, CheckGroup::All | CheckGroup::Tensor) {
        out.extend(tensor_checks()?);
    }
    if matches!(group, CheckGroup::All | CheckGroup::Losses) {
        out.extend(loss_checks()?);
    }
    if matches!(group, CheckGroup::All | CheckGroup::Networks) {
        out.extend(networks_checks()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names_parse() {
        assert_eq!("losses".parse::<CheckGroup>().unwrap(), CheckGroup::Losses);
        assert!("nope".parse::<CheckGroup>().is_err());
    }

    #[test]
    fn tensor_and_loss_groups_pass() {
        for r in run_checks(CheckGroup::Tensor)
            .unwrap()
            .iter()
            .chain(&run_checks(CheckGroup::Losses).unwrap())
        {
            assert!(r.passed(), "{r:?}");
            assert!(r.shapes >= 3, "{r:?}");
        }
    }

    #[test]
    fn network_group_passes() {
        let start = std::time::Instant::now();
        let res = run_checks(CheckGroup::Networks).unwrap();
        println!("networks: {:.1}s {res:?}", start.elapsed().as_secs_f64());
        assert!(res.iter().all(CheckResult::passed), "{res:?}");
    }
}
