//! Finite-difference oracle over every op kind, on ten random instances each.

use immunize_core::tensor::{grad_check, Graph, Tensor, TensorError, Var};
use immunize_core::Rng;

type R = Result<Var, TensorError>;
const TOL: f64 = 1e-3;
const INSTANCES: u64 = 10;

fn t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape).cast::<f64>()
}

fn squared(g: &mut Graph<f64>, v: Var) -> R {
    let p = g.mul(v, v)?;
    g.sum(p)
}

/// Every case draws its own shapes so instances vary in geometry too.
fn check_op(name: &str, build: impl Fn(&mut Rng) -> (Tensor<f64>, Box<dyn Fn(&mut Graph<f64>, Var) -> R>)) {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed * 7919 + name.len() as u64);
        let (x, f) = build(&mut rng);
        let err = grad_check(|g, v| f(g, v), &x, 1e-6).unwrap();
        assert!(err <= TOL, "{name} instance {seed}: rel err {err:e}");
    }
}

#[test]
fn elementwise_binary_ops() {
    for op in ["add", "sub", "mul"] {
        check_op(op, |rng| {
            let n = 1 + rng.below(5);
            let x = t(rng, &[n, 3]);
            let c = t(rng, &[n, 3]);
            (
                x,
                Box::new(move |g, v| {
                    let k = g.constant(c.clone());
                    let y = match op {
                        "add" => g.add(v, k)?,
                        "sub" => g.sub(k, v)?,
                        _ => g.mul(v, k)?,
                    };
                    squared(g, y)
                }),
            )
        });
    }
}

#[test]
fn matmul() {
    check_op("matmul", |rng| {
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let x = t(rng, &[m, k]);
        let w = t(rng, &[k, n]);
        (
            x,
            Box::new(move |g, v| {
                let c = g.constant(w.clone());
                let y = g.matmul(v, c)?;
                squared(g, y)
            }),
        )
    });
}

#[test]
fn conv2d_input_and_weight() {
    check_op("conv2d", |rng| {
        let stride = 1 + rng.below(2);
        let x = t(rng, &[2, 2, 5, 5]);
        let w = t(rng, &[3, 2, 3, 3]);
        (
            x,
            Box::new(move |g, v| {
                let k = g.leaf(w.clone(), true);
                let y = g.conv2d(v, k, stride, 1)?;
                squared(g, y)
            }),
        )
    });
    check_op("conv2d weight", |rng| {
        let x = t(rng, &[1, 2, 4, 4]);
        let w = t(rng, &[2, 2, 3, 3]);
        (
            w,
            Box::new(move |g, v| {
                let c = g.constant(x.clone());
                let y = g.conv2d(c, v, 1, 1)?;
                squared(g, y)
            }),
        )
    });
}

#[test]
fn unary_ops() {
    for op in ["silu", "tanh", "scale", "sum", "upsample2x", "avg_pool", "reshape"] {
        check_op(op, |rng| {
            let x = t(rng, &[1, 2, 4, 4]);
            let c = t(rng, &[1, 2, 4, 4]);
            (
                x,
                Box::new(move |g, v| {
                    // weighting by a random constant keeps the gradient non-trivial
                    let y = match op {
                        "silu" => g.silu(v)?,
                        "tanh" => g.tanh(v)?,
                        "scale" => g.scale(v, -1.7)?,
                        "upsample2x" => {
                            let u = g.upsample2x(v)?;
                            g.avg_pool(u, 2)?
                        }
                        "avg_pool" => {
                            let p = g.avg_pool(v, 2)?;
                            g.upsample2x(p)?
                        }
                        "reshape" => {
                            let r = g.reshape(v, &[4, 8])?;
                            g.reshape(r, &[1, 2, 4, 4])?
                        }
                        _ => v,
                    };
                    let k = g.constant(c.clone());
                    let w = g.mul(y, k)?;
                    let w = g.tanh(w)?;
                    g.sum(w)
                }),
            )
        });
    }
}

#[test]
fn structural_ops() {
    check_op("concat/slice", |rng| {
        let x = t(rng, &[2, 3]);
        let c = t(rng, &[2, 2]);
        (
            x,
            Box::new(move |g, v| {
                let k = g.constant(c.clone());
                let y = g.concat(&[k, v, v], 1)?;
                let y = g.slice(y, 1, 1, 6)?;
                let y = g.tanh(y)?;
                squared(g, y)
            }),
        )
    });
    check_op("gather", |rng| {
        let x = t(rng, &[4, 3]);
        let ids: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
        (
            x,
            Box::new(move |g, v| {
                let y = g.gather(v, &ids)?;
                let y = g.tanh(y)?;
                squared(g, y)
            }),
        )
    });
}

#[test]
fn bias_and_channel_adds() {
    check_op("bias_add", |rng| {
        let x = t(rng, &[3]);
        let c = t(rng, &[2, 3, 2, 2]);
        (
            x,
            Box::new(move |g, v| {
                let k = g.constant(c.clone());
                let y = g.bias_add(k, v)?;
                let y = g.tanh(y)?;
                squared(g, y)
            }),
        )
    });
    check_op("channel_add", |rng| {
        let x = t(rng, &[2, 3]);
        let c = t(rng, &[2, 3, 2, 2]);
        (
            x,
            Box::new(move |g, v| {
                let k = g.constant(c.clone());
                let y = g.channel_add(k, v)?;
                let y = g.tanh(y)?;
                squared(g, y)
            }),
        )
    });
}

#[test]
fn losses_and_clamp() {
    check_op("mse_loss", |rng| {
        let x = t(rng, &[3, 4]);
        let c = t(rng, &[3, 4]);
        (x, Box::new(move |g, v| {
            let k = g.constant(c.clone());
            g.mse_loss(v, k)
        }))
    });
    check_op("cross_entropy", |rng| {
        let x = t(rng, &[3, 4]);
        let labels: Vec<usize> = (0..3).map(|_| rng.below(4)).collect();
        (x, Box::new(move |g, v| g.cross_entropy(v, &labels)))
    });
    check_op("clamp", |rng| {
        // keep every coordinate clear of the kinks
        let x = t(rng, &[3, 4]).map(|v| if (v.abs() - 0.5).abs() < 0.05 { v + 0.2 } else { v });
        let c = t(rng, &[3, 4]);
        (
            x,
            Box::new(move |g, v| {
                let y = g.clamp(v, -0.5, 0.5)?;
                let k = g.constant(c.clone());
                let y = g.mul(y, k)?;
                g.sum(y)
            }),
        )
    });
}

fn conv_loss_grad(x: &Tensor, w: &Tensor) -> Tensor {
    let mut g = Graph::<f32>::new();
    let xv = g.leaf(x.clone(), true);
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, 1, 1).unwrap();
    let y = g.tanh(y).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    g.grad(xv).unwrap()
}

#[test]
fn batched_backward_equals_per_sample_backward() {
    let mut rng = Rng::new(3);
    let x = rng.normal_tensor(&[4, 2, 6, 6]);
    let w = rng.normal_tensor(&[3, 2, 3, 3]);
    let batched = conv_loss_grad(&x, &w);
    let per: Vec<Tensor> = x
        .unstack()
        .iter()
        .map(|xi| {
            let xi = xi.clone().reshape(&[1, 2, 6, 6]).unwrap();
            conv_loss_grad(&xi, &w).reshape(&[2, 6, 6]).unwrap()
        })
        .collect();
    assert!(batched.max_abs_diff(&Tensor::stack(&per).unwrap()) <= 1e-5);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = Rng::new(17);
        let x = rng.normal_tensor(&[2, 3, 8, 8]);
        let w = rng.normal_tensor(&[4, 3, 3, 3]);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let y = g.conv2d(xv, wv, 2, 1).unwrap();
        let y = g.silu(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
