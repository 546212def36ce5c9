//! Finite-difference sweep over every differentiable primitive and each
//! composite loss.

use ebaker::objective::{info_nce, info_nce_eliminated, mlm_loss, total_loss, LossConfig, LossInputs};
use ebaker::alignment::BatchEliminationMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorlab::gradcheck::{check_gradients, project};
use tensorlab::{AttnLayout, Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

type Build = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)>;

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn positive(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(0.5..2.0)).collect()).unwrap()
}

/// A unary or n-ary op projected onto random weights of the output shape.
fn projected(
    shapes: Vec<Vec<usize>>,
    out: Vec<usize>,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Clone + 'static,
) -> Build {
    Box::new(move |r| {
        let inputs = shapes.iter().map(|s| randn(r, s)).collect();
        let w = randn(r, &out);
        let op = op.clone();
        (inputs, Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = op(g, v)?;
            project(g, y, &w)
        }))
    })
}

fn ebaker_err(e: ebaker::Error) -> tensorlab::TensorError {
    match e {
        ebaker::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

pub fn cases() -> Vec<(&'static str, Build)> {
    let mut v: Vec<(&'static str, Build)> = vec![
        ("add", projected(vec![vec![3, 4], vec![3, 4]], vec![3, 4], |g, v| g.add(v[0], v[1]))),
        ("add_row", projected(vec![vec![3, 4], vec![4]], vec![3, 4], |g, v| g.add_row(v[0], v[1]))),
        ("mul", projected(vec![vec![3, 4], vec![3, 4]], vec![3, 4], |g, v| g.mul(v[0], v[1]))),
        ("scale", projected(vec![vec![2, 5]], vec![2, 5], |g, v| Ok(g.scale(v[0], -1.7)))),
        ("scale_by", projected(vec![vec![2, 5], vec![1]], vec![2, 5], |g, v| g.scale_by(v[0], v[1]))),
        ("matmul", projected(vec![vec![3, 4], vec![4, 2]], vec![3, 2], |g, v| g.matmul(v[0], v[1]))),
        ("transpose", projected(vec![vec![3, 4]], vec![4, 3], |g, v| g.transpose(v[0]))),
        ("exp", projected(vec![vec![3, 3]], vec![3, 3], |g, v| Ok(g.exp(v[0])))),
        ("quick_gelu", projected(vec![vec![3, 4]], vec![3, 4], |g, v| Ok(g.quick_gelu(v[0])))),
        ("softmax_rows", projected(vec![vec![3, 5]], vec![3, 5], |g, v| Ok(g.softmax_rows(v[0])))),
        ("layer_norm", projected(vec![vec![3, 6], vec![6], vec![6]], vec![3, 6], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("embedding", projected(vec![vec![6, 3]], vec![4, 3], |g, v| g.embedding(v[0], &[1, 5, 1, 0]))),
        ("concat_rows", projected(vec![vec![2, 3], vec![3, 3]], vec![5, 3], |g, v| g.concat_rows(&[v[0], v[1]]))),
        ("gather_rows", projected(vec![vec![4, 3]], vec![3, 3], |g, v| g.gather_rows(v[0], &[3, 0, 3]))),
        ("mean_rows", projected(vec![vec![4, 3]], vec![1, 3], |g, v| g.mean_rows(v[0]))),
        ("sum_all", projected(vec![vec![3, 3]], vec![1], |g, v| Ok(g.sum_all(v[0])))),
        ("mean_all", projected(vec![vec![3, 3]], vec![1], |g, v| Ok(g.mean_all(v[0])))),
        ("row_norms", projected(vec![vec![4, 3]], vec![4, 1], |g, v| Ok(g.row_norms(v[0])))),
        ("normalize_rows", projected(vec![vec![4, 3]], vec![4, 3], |g, v| g.normalize_rows(v[0]))),
        ("cosine_rows", projected(vec![vec![3, 4], vec![5, 4]], vec![3, 5], |g, v| g.cosine_rows(v[0], v[1]))),
        ("nll_rows", projected(vec![vec![3, 5]], vec![1], |g, v| g.nll_rows(v[0], &[4, 0, 2], 7.0))),
        ("cross_entropy", projected(vec![vec![4, 6]], vec![1], |g, v| g.cross_entropy(v[0], &[5, 1, 1, 3]))),
        (
            "attention",
            projected(vec![vec![5, 4], vec![7, 4], vec![7, 4]], vec![5, 4], |g, v| {
                g.attention(v[0], v[1], v[2], 2, &AttnLayout::segments(vec![2, 3], vec![3, 4]))
            }),
        ),
        (
            "attention_causal",
            projected(vec![vec![6, 4], vec![6, 4], vec![6, 4]], vec![6, 4], |g, v| {
                g.attention(v[0], v[1], v[2], 2, &AttnLayout::segments(vec![4, 2], vec![4, 2]).causal())
            }),
        ),
        (
            "block_frobenius",
            projected(vec![vec![5, 4]], vec![2, 2], |g, v| g.block_frobenius(v[0], &[2, 3], &[1, 3])),
        ),
        (
            "linear",
            projected(vec![vec![3, 4], vec![4, 2], vec![2]], vec![3, 2], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
    ];
    v.push((
        "log",
        Box::new(|r| {
            let x = positive(r, &[3, 3]);
            let w = randn(r, &[3, 3]);
            (vec![x], Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.log(v[0]);
                project(g, y, &w)
            }))
        }),
    ));
    v.push((
        "info_nce",
        Box::new(|r| {
            let b = r.random_range(2..=5);
            (vec![randn(r, &[b, b]), positive(r, &[1])], Box::new(|g: &mut Graph, v: &[Var]| {
                info_nce(g, v[0], v[1]).map_err(ebaker_err)
            }))
        }),
    ));
    v.push((
        "info_nce_eliminated",
        Box::new(|r| {
            let b = r.random_range(3..=6);
            let mut keep: Vec<bool> = (0..b).map(|_| r.random_bool(0.6)).collect();
            keep[0] = true;
            (vec![randn(r, &[b, b]), positive(r, &[1])], Box::new(move |g: &mut Graph, v: &[Var]| {
                info_nce_eliminated(g, v[0], &keep, v[1]).map(|x| x.0).map_err(ebaker_err)
            }))
        }),
    ));
    v.push((
        "mlm_loss",
        Box::new(|r| {
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..7)).collect();
            (vec![randn(r, &[4, 7])], Box::new(move |g: &mut Graph, v: &[Var]| {
                mlm_loss(g, v[0], &targets).map_err(ebaker_err)
            }))
        }),
    ));
    v.push((
        "total_loss",
        Box::new(|r| {
            let b = 4;
            let targets: Vec<usize> = (0..3).map(|_| r.random_range(0..6)).collect();
            let mask = BatchEliminationMask {
                keep_global: vec![true, false, true, true],
                keep_local: vec![true, true, false, true],
                r_global: 1,
                r_local: 1,
            };
            let inputs = vec![randn(r, &[b, b]), positive(r, &[b, b]), positive(r, &[1]), randn(r, &[3, 6])];
            (inputs, Box::new(move |g: &mut Graph, v: &[Var]| {
                let parts = LossInputs {
                    sim_global: v[0],
                    sim_local: v[1],
                    inv_temp: v[2],
                    mlm_logits: v[3],
                    mlm_targets: &targets,
                };
                total_loss(g, &parts, 5, &LossConfig::default(), Some(&mask))
                    .map(|x| x.0)
                    .map_err(ebaker_err)
            }))
        }),
    ));
    v
}

/// Worst relative error per case, or the first failure.
pub fn run() -> std::result::Result<(usize, f64), String> {
    let mut worst = 0.0f64;
    let cases = cases();
    for (name, build) in &cases {
        for seed in 0..SEEDS {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, f) = build(&mut r);
            let rep = check_gradients(&inputs, STEP, |g, v| f(g, v)).map_err(|e| format!("{name}: {e}"))?;
            if rep.max_rel_err > TOL {
                return Err(format!("{name} seed {seed}: rel err {:e}", rep.max_rel_err));
            }
            worst = worst.max(rep.max_rel_err);
        }
    }
    Ok((cases.len(), worst))
}
