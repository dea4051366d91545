//! Randomized gradient-check cases covering every differentiable tape op.
//!
//! Each case differentiates one operand of one op; the other operands are
//! random constants and the output is reduced against random weights so that
//! no Jacobian direction is hidden by a plain sum.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type CaseFn<T> = Box<dyn Fn(&mut Tape<T>, Var) -> Result<Var>>;

pub struct OpCase<T: Real> {
    pub name: &'static str,
    pub input: Tensor<T>,
    pub f: CaseFn<T>,
}

impl<T: Real> OpCase<T> {
    pub fn check(&self, h: f64) -> Result<f64> {
        grad_check(&self.f, &self.input, h)
    }
}

/// Names of all cases produced by [`random_case`], in order.
pub const CASE_NAMES: &[&str] = &[
    "matmul.lhs",
    "matmul.rhs",
    "add",
    "sub.rhs",
    "mul",
    "scale",
    "add_row.matrix",
    "add_row.row",
    "silu",
    "layer_norm.x",
    "layer_norm.gamma",
    "layer_norm.beta",
    "softmax_rows",
    "attention.q",
    "attention.k",
    "attention.v",
    "transpose",
    "embedding",
    "im2col3x3",
    "avg_pool2",
    "upsample2",
    "pixel_unshuffle",
    "pixel_shuffle",
    "concat_cols.lhs",
    "concat_cols.rhs",
    "sum",
    "mean",
    "reshape",
    "mse",
];

fn rand_tensor<T: Real>(rng: &mut StdRng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

/// `sum(out ⊙ w)` with a fixed random `w` matching `out`'s shape.
fn weighted<T: Real>(tape: &mut Tape<T>, out: Var, w: &Tensor<T>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

fn dim(rng: &mut StdRng) -> usize {
    rng.random_range(1..=4)
}

/// Builds the case `name` with random shapes and values drawn from `seed`.
pub fn random_case<T: Real>(name: &'static str, seed: u64) -> OpCase<T> {
    let mut rng = StdRng::seed_from_u64(seed);
    let rng = &mut rng;
    let (n, m, c) = (dim(rng), dim(rng), dim(rng));
    macro_rules! case {
        ($input:expr, $out_shape:expr, |$t:ident, $x:ident| $body:expr) => {{
            let input = $input;
            let w: Tensor<T> = rand_tensor(rng, &$out_shape);
            let f: CaseFn<T> = Box::new(move |$t: &mut Tape<T>, $x: Var| {
                let out = $body?;
                weighted($t, out, &w)
            });
            OpCase { name, input, f }
        }};
    }
    match name {
        "matmul.lhs" => {
            let b = rand_tensor(rng, &[m, c]);
            case!(rand_tensor(rng, &[n, m]), [n, c], |t, x| {
                let b = t.constant(b.clone());
                t.matmul(x, b)
            })
        }
        "matmul.rhs" => {
            let a = rand_tensor(rng, &[n, m]);
            case!(rand_tensor(rng, &[m, c]), [n, c], |t, x| {
                let a = t.constant(a.clone());
                t.matmul(a, x)
            })
        }
        "add" => {
            let b = rand_tensor(rng, &[n, c]);
            case!(rand_tensor(rng, &[n, c]), [n, c], |t, x| {
                let b = t.constant(b.clone());
                t.add(x, b)
            })
        }
        "sub.rhs" => {
            let a = rand_tensor(rng, &[n, c]);
            case!(rand_tensor(rng, &[n, c]), [n, c], |t, x| {
                let a = t.constant(a.clone());
                t.sub(a, x)
            })
        }
        "mul" => {
            let b = rand_tensor(rng, &[n, c]);
            case!(rand_tensor(rng, &[n, c]), [n, c], |t, x| {
                let b = t.constant(b.clone());
                let p = t.mul(x, b)?;
                t.mul(p, x)
            })
        }
        "scale" => {
            let s = T::of(rng.random_range(-2.0..2.0));
            case!(rand_tensor(rng, &[n, c]), [n, c], |t, x| Ok::<_, crate::NumericsError>(t.scale(x, s)))
        }
        "add_row.matrix" => {
            let r = rand_tensor(rng, &[c]);
            case!(rand_tensor(rng, &[n, c]), [n, c], |t, x| {
                let r = t.constant(r.clone());
                t.add_row(x, r)
            })
        }
        "add_row.row" => {
            let a = rand_tensor(rng, &[n, c]);
            case!(rand_tensor(rng, &[c]), [n, c], |t, x| {
                let a = t.constant(a.clone());
                t.add_row(a, x)
            })
        }
        "silu" => case!(rand_tensor::<T>(rng, &[n, c]).map(|v| v * T::of(3.0)), [n, c], |t, x| {
            Ok::<_, crate::NumericsError>(t.silu(x))
        }),
        "layer_norm.x" | "layer_norm.gamma" | "layer_norm.beta" => {
            // Rows of width >= 3 with spread-out entries; nearly constant
            // rows make central differences ill-conditioned in f32.
            let c = c + 2;
            let x0 = rand_tensor::<T>(rng, &[n, c]).map(|v| v * T::of(3.0));
            let g0 = rand_tensor(rng, &[c]);
            let b0 = rand_tensor(rng, &[c]);
            let slot = match name {
                "layer_norm.x" => 0,
                "layer_norm.gamma" => 1,
                _ => 2,
            };
            let input = [x0.clone(), g0.clone(), b0.clone()][slot].clone();
            case!(input, [n, c], |t, v| {
                let mut ops = [None, None, None];
                ops[slot] = Some(v);
                let x = ops[0].unwrap_or_else(|| t.constant(x0.clone()));
                let g = ops[1].unwrap_or_else(|| t.constant(g0.clone()));
                let b = ops[2].unwrap_or_else(|| t.constant(b0.clone()));
                t.layer_norm(x, g, b, T::of(1e-5))
            })
        }
        "softmax_rows" => case!(rand_tensor::<T>(rng, &[n, c]).map(|v| v * T::of(3.0)), [n, c], |t, x| {
            t.softmax_rows(x)
        }),
        "attention.q" | "attention.k" | "attention.v" => {
            let heads = rng.random_range(1..=2);
            let d = heads * dim(rng);
            let dv = heads * dim(rng);
            let q0 = rand_tensor::<T>(rng, &[n, d]).map(|v| v * T::of(2.0));
            let k0 = rand_tensor::<T>(rng, &[m, d]).map(|v| v * T::of(2.0));
            let v0 = rand_tensor(rng, &[m, dv]);
            let slot = match name {
                "attention.q" => 0,
                "attention.k" => 1,
                _ => 2,
            };
            let input = [q0.clone(), k0.clone(), v0.clone()][slot].clone();
            case!(input, [n, dv], |t, x| {
                let mut ops = [None, None, None];
                ops[slot] = Some(x);
                let q = ops[0].unwrap_or_else(|| t.constant(q0.clone()));
                let k = ops[1].unwrap_or_else(|| t.constant(k0.clone()));
                let v = ops[2].unwrap_or_else(|| t.constant(v0.clone()));
                t.attention(q, k, v, heads)
            })
        }
        "transpose" => case!(rand_tensor(rng, &[n, c]), [c, n], |t, x| t.transpose(x)),
        "embedding" => {
            let idx: Vec<usize> = (0..m + 1).map(|_| rng.random_range(0..n)).collect();
            case!(rand_tensor(rng, &[n, c]), [m + 1, c], |t, x| t.embedding(x, &idx))
        }
        "im2col3x3" => case!(rand_tensor(rng, &[n * m, c]), [n * m, 9 * c], |t, x| t.im2col3x3(x, n, m)),
        "avg_pool2" => case!(rand_tensor(rng, &[4 * n * m, c]), [n * m, c], |t, x| t.avg_pool2(x, 2 * n, 2 * m)),
        "upsample2" => case!(rand_tensor(rng, &[n * m, c]), [4 * n * m, c], |t, x| t.upsample2(x, n, m)),
        "pixel_unshuffle" => {
            case!(rand_tensor(rng, &[4 * n * m, c]), [n * m, 4 * c], |t, x| t.pixel_unshuffle(x, 2 * n, 2 * m, 2))
        }
        "pixel_shuffle" => {
            case!(rand_tensor(rng, &[n * m, 4 * c]), [4 * n * m, c], |t, x| t.pixel_shuffle(x, n, m, 2))
        }
        "concat_cols.lhs" => {
            let b = rand_tensor(rng, &[n, m]);
            case!(rand_tensor(rng, &[n, c]), [n, c + m], |t, x| {
                let b = t.constant(b.clone());
                t.concat_cols(x, b)
            })
        }
        "concat_cols.rhs" => {
            let a = rand_tensor(rng, &[n, m]);
            case!(rand_tensor(rng, &[n, c]), [n, m + c], |t, x| {
                let a = t.constant(a.clone());
                t.concat_cols(a, x)
            })
        }
        "sum" => case!(rand_tensor(rng, &[n, c]), [1], |t, x| {
            let p = t.mul(x, x)?;
            Ok::<_, crate::NumericsError>(t.sum(p))
        }),
        "mean" => case!(rand_tensor(rng, &[n, c]), [1], |t, x| {
            let p = t.mul(x, x)?;
            Ok::<_, crate::NumericsError>(t.mean(p))
        }),
        "reshape" => case!(rand_tensor(rng, &[n, c]), [c, n], |t, x| t.reshape(x, [c, n])),
        "mse" => {
            let b = rand_tensor(rng, &[n, c]);
            case!(rand_tensor(rng, &[n, c]), [1], |t, x| {
                let b = t.constant(b.clone());
                t.mse(x, b)
            })
        }
        other => panic!("unknown op case {other}"),
    }
}

/// Worst relative error of each op over `cases` random instances.
pub fn run_suite<T: Real>(cases: usize, seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    CASE_NAMES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut worst = 0.0f64;
            for i in 0..cases {
                let case = random_case::<T>(name, seed ^ ((k as u64) << 32) ^ i as u64);
                worst = worst.max(case.check(h)?);
            }
            Ok((name, worst))
        })
        .collect()
}
