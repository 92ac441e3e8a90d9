//! Central finite-difference verification of backward rules.
//!
//! A check takes the raw input buffers plus a builder closure that constructs
//! the scalar loss on a fresh tape. Analytic gradients come from one backward
//! sweep; numeric ones from re-building the graph with one coordinate nudged
//! by +-h, h = 1e-4 * (1 + |x|). Errors are reported relative to
//! max(1, |analytic|, |numeric|), which behaves like absolute error near zero
//! and relative error for large gradients.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// One verified coordinate.
#[derive(Debug, Clone, Copy)]
pub struct GradSample {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_err: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.err.total_cmp(&b.err))
    }
}

/// Compare analytic and central finite-difference gradients of `build` with
/// respect to `inputs`. `coords` limits the sweep to chosen
/// (input, element) coordinates; `None` sweeps every element of every input.
pub fn finite_diff_check(
    inputs: &[(Vec<f64>, Vec<usize>)],
    coords: Option<&[(usize, usize)]>,
    build: impl Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let eval = |bufs: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor<f64>> = bufs
            .iter()
            .zip(inputs)
            .map(|(data, (_, shape))| tape.leaf(data.clone(), shape, true))
            .collect::<Result<_>>()?;
        Ok(build(&tape, &leaves)?.item())
    };

    // Analytic pass.
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape, true))
        .collect::<Result<_>>()?;
    let loss = build(&tape, &leaves)?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().expect("leaf gradient allocated by backward"))
        .collect();

    let all_coords: Vec<(usize, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, (data, _))| (0..data.len()).map(move |j| (i, j)))
            .collect(),
    };

    let mut bufs: Vec<Vec<f64>> = inputs.iter().map(|(data, _)| data.clone()).collect();
    let mut samples = Vec::with_capacity(all_coords.len());
    let mut max_err = 0.0f64;
    for (i, j) in all_coords {
        let x = bufs[i][j];
        let h = 1e-4 * (1.0 + x.abs());
        bufs[i][j] = x + h;
        let f_plus = eval(&bufs)?;
        bufs[i][j] = x - h;
        let f_minus = eval(&bufs)?;
        bufs[i][j] = x;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let analytic = grads[i][j];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        max_err = max_err.max(err);
        samples.push(GradSample {
            input: i,
            index: j,
            analytic,
            numeric,
            err,
        });
    }
    Ok(GradCheckReport { samples, max_err })
}

/// One entry of [`standard_op_suite`].
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Finite-difference sweep over every differentiable tensor operation, each on
/// small dense inputs chosen away from subgradient kinks. The loss is always
/// sum(op_output * fixed_weights) with distinct pseudo-random weights, so each
/// output element feeds the scalar with its own coefficient and index mix-ups
/// cannot cancel.
pub fn standard_op_suite() -> Result<Vec<OpCheck>> {
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Uniform over +-(lo..hi): magnitudes bounded away from zero.
    fn rand_signed(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let m = rng.random_range(lo..hi);
                if rng.random_range(0.0..1.0) < 0.5 {
                    -m
                } else {
                    m
                }
            })
            .collect()
    }

    fn weighted(t: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
        let w = rand_vec(seed ^ 0x5eed, t.numel(), -1.0, 1.0);
        let w = t.tape().constant(w, t.shape())?;
        Ok(t.mul(&w)?.sum_all())
    }

    let mut checks = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<(Vec<f64>, Vec<usize>)>,
                   build: Box<dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>>|
     -> Result<()> {
        let report = finite_diff_check(&inputs, None, build)?;
        checks.push(OpCheck { name, report });
        Ok(())
    };

    run(
        "add_broadcast",
        vec![
            (rand_signed(1, 6, 0.2, 1.5), vec![2, 3]),
            (rand_signed(2, 3, 0.2, 1.5), vec![3]),
        ],
        Box::new(|_, xs| weighted(&xs[0].add(&xs[1])?, 1)),
    )?;
    run(
        "sub_broadcast",
        vec![
            (rand_signed(3, 6, 0.2, 1.5), vec![2, 3]),
            (rand_signed(4, 2, 0.2, 1.5), vec![2, 1]),
        ],
        Box::new(|_, xs| weighted(&xs[0].sub(&xs[1])?, 2)),
    )?;
    run(
        "mul_broadcast",
        vec![
            (rand_signed(5, 12, 0.2, 1.5), vec![2, 3, 2]),
            (rand_signed(6, 3, 0.2, 1.5), vec![3, 1]),
        ],
        Box::new(|_, xs| weighted(&xs[0].mul(&xs[1])?, 3)),
    )?;
    run(
        "div_broadcast",
        vec![
            (rand_signed(7, 6, 0.2, 1.5), vec![2, 3]),
            (rand_vec(8, 3, 0.5, 1.5), vec![3]),
        ],
        Box::new(|_, xs| weighted(&xs[0].div(&xs[1])?, 4)),
    )?;
    run(
        "add_scalar",
        vec![(rand_signed(9, 6, 0.2, 1.5), vec![6])],
        Box::new(|_, xs| weighted(&xs[0].add_scalar(0.7), 5)),
    )?;
    run(
        "mul_scalar",
        vec![(rand_signed(10, 6, 0.2, 1.5), vec![6])],
        Box::new(|_, xs| weighted(&xs[0].mul_scalar(-1.3), 6)),
    )?;
    run(
        "neg",
        vec![(rand_signed(11, 5, 0.2, 1.5), vec![5])],
        Box::new(|_, xs| weighted(&xs[0].neg(), 7)),
    )?;
    run(
        "relu",
        vec![(rand_signed(12, 8, 0.1, 1.5), vec![2, 4])],
        Box::new(|_, xs| weighted(&xs[0].relu(), 8)),
    )?;
    run(
        "hardswish",
        vec![(
            {
                // Mix of points in all three derivative regions, none within
                // 0.2 of the kinks at +-3.
                let mut v = rand_signed(13, 6, 0.2, 2.5);
                v.extend_from_slice(&[-4.1, -3.6, 3.4, 4.4]);
                v
            },
            vec![10],
        )],
        Box::new(|_, xs| weighted(&xs[0].hardswish(), 9)),
    )?;
    run(
        "sqrt",
        vec![(rand_vec(14, 6, 0.3, 2.0), vec![6])],
        Box::new(|_, xs| weighted(&xs[0].sqrt(), 10)),
    )?;
    run(
        "square",
        vec![(rand_signed(15, 6, 0.2, 2.0), vec![6])],
        Box::new(|_, xs| weighted(&xs[0].square(), 11)),
    )?;
    run(
        "softmax",
        vec![(rand_signed(16, 8, 0.2, 2.0), vec![2, 4])],
        Box::new(|_, xs| weighted(&xs[0].softmax(1)?, 12)),
    )?;
    run(
        "softmax_mid_axis",
        vec![(rand_signed(17, 12, 0.2, 2.0), vec![2, 3, 2])],
        Box::new(|_, xs| weighted(&xs[0].softmax(1)?, 13)),
    )?;
    run(
        "layer_norm",
        vec![(rand_signed(18, 10, 0.2, 2.0), vec![2, 5])],
        Box::new(|_, xs| weighted(&xs[0].layer_norm(1, 1e-5)?, 14)),
    )?;
    run(
        "layer_norm_inner_axis",
        vec![(rand_signed(19, 24, 0.2, 2.0), vec![2, 3, 4])],
        Box::new(|_, xs| weighted(&xs[0].layer_norm(2, 1e-5)?, 15)),
    )?;
    run(
        "batch_stat_norm",
        vec![(rand_signed(20, 24, 0.2, 2.0), vec![2, 3, 2, 2])],
        Box::new(|_, xs| weighted(&xs[0].batch_stat_norm(1e-5)?, 16)),
    )?;
    run(
        "sum_all",
        vec![(rand_signed(21, 6, 0.2, 2.0), vec![2, 3])],
        Box::new(|_, xs| Ok(xs[0].sum_all())),
    )?;
    run(
        "mean_all",
        vec![(rand_signed(22, 6, 0.2, 2.0), vec![2, 3])],
        Box::new(|_, xs| Ok(xs[0].mean_all())),
    )?;
    run(
        "sum_axes_keepdim",
        vec![(rand_signed(23, 24, 0.2, 2.0), vec![2, 3, 4])],
        Box::new(|_, xs| weighted(&xs[0].sum_axes(&[0, 2], true)?, 17)),
    )?;
    run(
        "sum_axes_squeeze",
        vec![(rand_signed(24, 24, 0.2, 2.0), vec![2, 3, 4])],
        Box::new(|_, xs| weighted(&xs[0].sum_axes(&[1], false)?, 18)),
    )?;
    run(
        "mean_axes",
        vec![(rand_signed(25, 24, 0.2, 2.0), vec![2, 3, 4])],
        Box::new(|_, xs| weighted(&xs[0].mean_axes(&[1], false)?, 19)),
    )?;
    run(
        "global_avg_pool",
        vec![(rand_signed(26, 24, 0.2, 2.0), vec![2, 3, 2, 2])],
        Box::new(|_, xs| weighted(&xs[0].global_avg_pool()?, 20)),
    )?;
    run(
        "matmul_2d",
        vec![
            (rand_signed(27, 12, 0.2, 1.5), vec![3, 4]),
            (rand_signed(28, 8, 0.2, 1.5), vec![4, 2]),
        ],
        Box::new(|_, xs| weighted(&xs[0].matmul(&xs[1])?, 21)),
    )?;
    run(
        "matmul_batched",
        vec![
            (rand_signed(29, 12, 0.2, 1.5), vec![2, 2, 3]),
            (rand_signed(30, 12, 0.2, 1.5), vec![2, 3, 2]),
        ],
        Box::new(|_, xs| weighted(&xs[0].matmul(&xs[1])?, 22)),
    )?;
    run(
        "reshape",
        vec![(rand_signed(31, 12, 0.2, 1.5), vec![2, 6])],
        Box::new(|_, xs| weighted(&xs[0].reshape(&[3, 4])?, 23)),
    )?;
    run(
        "permute",
        vec![(rand_signed(32, 24, 0.2, 1.5), vec![2, 3, 4])],
        Box::new(|_, xs| weighted(&xs[0].permute(&[2, 0, 1])?, 24)),
    )?;
    run(
        "transpose",
        vec![(rand_signed(33, 12, 0.2, 1.5), vec![3, 4])],
        Box::new(|_, xs| weighted(&xs[0].transpose(0, 1)?, 25)),
    )?;
    run(
        "narrow",
        vec![(rand_signed(34, 30, 0.2, 1.5), vec![2, 5, 3])],
        Box::new(|_, xs| weighted(&xs[0].narrow(1, 1, 3)?, 26)),
    )?;
    run(
        "concat",
        vec![
            (rand_signed(35, 6, 0.2, 1.5), vec![2, 3]),
            (rand_signed(36, 4, 0.2, 1.5), vec![2, 2]),
            (rand_signed(37, 2, 0.2, 1.5), vec![2, 1]),
        ],
        Box::new(|_, xs| {
            weighted(&Tensor::concat(&[xs[0].clone(), xs[1].clone(), xs[2].clone()], 1)?, 27)
        }),
    )?;
    run(
        "broadcast_to",
        vec![(rand_signed(38, 3, 0.2, 1.5), vec![3, 1])],
        Box::new(|_, xs| weighted(&xs[0].broadcast_to(&[2, 3, 4])?, 28)),
    )?;
    run(
        "conv2d_basic",
        vec![
            (rand_signed(39, 150, 0.2, 1.5), vec![2, 3, 5, 5]),
            (rand_signed(40, 108, 0.2, 1.5), vec![4, 3, 3, 3]),
        ],
        Box::new(|_, xs| weighted(&xs[0].conv2d(&xs[1], 1, 1, 1)?, 29)),
    )?;
    run(
        "conv2d_strided",
        vec![
            (rand_signed(41, 72, 0.2, 1.5), vec![1, 2, 6, 6]),
            (rand_signed(42, 54, 0.2, 1.5), vec![3, 2, 3, 3]),
        ],
        Box::new(|_, xs| weighted(&xs[0].conv2d(&xs[1], 2, 1, 1)?, 30)),
    )?;
    run(
        "conv2d_grouped",
        vec![
            (rand_signed(43, 128, 0.2, 1.5), vec![2, 4, 4, 4]),
            (rand_signed(44, 108, 0.2, 1.5), vec![6, 2, 3, 3]),
        ],
        Box::new(|_, xs| weighted(&xs[0].conv2d(&xs[1], 1, 1, 2)?, 31)),
    )?;
    run(
        "conv2d_depthwise",
        vec![
            (rand_signed(45, 200, 0.2, 1.5), vec![2, 4, 5, 5]),
            (rand_signed(46, 36, 0.2, 1.5), vec![4, 1, 3, 3]),
        ],
        Box::new(|_, xs| weighted(&xs[0].conv2d(&xs[1], 1, 1, 4)?, 32)),
    )?;
    run(
        "conv2d_pointwise",
        vec![
            (rand_signed(47, 90, 0.2, 1.5), vec![2, 5, 3, 3]),
            (rand_signed(48, 35, 0.2, 1.5), vec![7, 5, 1, 1]),
        ],
        Box::new(|_, xs| weighted(&xs[0].conv2d(&xs[1], 1, 0, 1)?, 33)),
    )?;

    Ok(checks)
}
