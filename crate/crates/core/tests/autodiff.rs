mod common;

use common::*;
use mism::tensor::{check_gradients, Tape, Tensor, Var};
use mism::Result;

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One scalar objective per differentiable op, with its input shapes.
fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Objective)> {
    let mut r = rng(seed);
    let w34 = normal_tensor(&mut r, &[3, 4], 1.0);
    let w33 = normal_tensor(&mut r, &[3, 3], 1.0);
    let w14 = normal_tensor(&mut r, &[4], 1.0);
    let a = normal_tensor(&mut r, &[3, 4], 1.0);
    let b = normal_tensor(&mut r, &[3, 4], 1.0);
    let c = normal_tensor(&mut r, &[4, 3], 1.0);
    let row = normal_tensor(&mut r, &[4], 1.0);
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|x| x * x + 0.5).collect()).unwrap();
    let targets = vec![(seed % 4) as usize, 1, 3];

    let p = |w: &Tensor| {
        let w = w.clone();
        move |t: &mut Tape, out: Var| probe(t, out, &w)
    };
    let (p34, p33, p14, p34b, p34c, p34d, p34e, p34f, p34g, p33b, p43) = (
        p(&w34),
        p(&w33),
        p(&w14),
        p(&w34),
        p(&w34),
        p(&w34),
        p(&w34),
        p(&w34),
        p(&w34),
        p(&w33),
        p(&w34.transpose().unwrap()),
    );
    let p36 = {
        let w = normal_tensor(&mut r, &[3, 8], 1.0);
        move |t: &mut Tape, out: Var| probe(t, out, &w)
    };
    let p64 = {
        let w = normal_tensor(&mut r, &[6, 4], 1.0);
        move |t: &mut Tape, out: Var| probe(t, out, &w)
    };
    let p32 = {
        let w = normal_tensor(&mut r, &[3, 2], 1.0);
        move |t: &mut Tape, out: Var| probe(t, out, &w)
    };
    let p26 = {
        let w = normal_tensor(&mut r, &[2, 6], 1.0);
        move |t: &mut Tape, out: Var| probe(t, out, &w)
    };
    let p_rows = {
        let w = normal_tensor(&mut r, &[4, 4], 1.0);
        move |t: &mut Tape, out: Var| probe(t, out, &w)
    };

    vec![
        (
            "matmul",
            vec![a.clone(), c.clone()],
            Box::new(move |t, v| {
                let o = t.matmul(v[0], v[1])?;
                p33(t, o)
            }),
        ),
        (
            "transpose",
            vec![a.clone()],
            Box::new(move |t, v| {
                let o = t.transpose(v[0])?;
                p43(t, o)
            }),
        ),
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(move |t, v| {
                let o = t.add(v[0], v[1])?;
                p34(t, o)
            }),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(move |t, v| {
                let o = t.sub(v[0], v[1])?;
                p34b(t, o)
            }),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(move |t, v| {
                let o = t.mul(v[0], v[1])?;
                p34c(t, o)
            }),
        ),
        (
            "add_row",
            vec![a.clone(), row.clone()],
            Box::new(move |t, v| {
                let o = t.add_row(v[0], v[1])?;
                p34d(t, o)
            }),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(move |t, v| {
                let o = t.scale(v[0], -1.7)?;
                p34e(t, o)
            }),
        ),
        (
            "sqrt",
            vec![pos],
            Box::new(move |t, v| {
                let o = t.sqrt(v[0])?;
                p34f(t, o)
            }),
        ),
        (
            "gelu",
            vec![a.clone()],
            Box::new(move |t, v| {
                let o = t.gelu(v[0])?;
                p34g(t, o)
            }),
        ),
        (
            "softmax",
            vec![w33.clone()],
            Box::new(move |t, v| {
                let o = t.softmax(v[0])?;
                p33b(t, o)
            }),
        ),
        (
            "causal_softmax",
            vec![w33.clone()],
            Box::new({
                let w = w33.clone();
                move |t, v| {
                    let o = t.causal_softmax(v[0])?;
                    probe(t, o, &w)
                }
            }),
        ),
        (
            "layer_norm",
            vec![a.clone(), row.clone(), w14.clone()],
            Box::new({
                let w = w34.clone();
                move |t, v| {
                    let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    probe(t, o, &w)
                }
            }),
        ),
        (
            "mean_rows",
            vec![a.clone()],
            Box::new(move |t, v| {
                let o = t.mean_rows(v[0])?;
                p14(t, o)
            }),
        ),
        (
            "reshape",
            vec![a.clone()],
            Box::new(move |t, v| {
                let o = t.reshape(v[0], &[2, 6])?;
                p26(t, o)
            }),
        ),
        (
            "gather_rows",
            vec![a.clone()],
            Box::new(move |t, v| {
                let o = t.gather_rows(v[0], &[2, 0, 2, 1])?;
                p_rows(t, o)
            }),
        ),
        (
            "slice_cols",
            vec![a.clone()],
            Box::new(move |t, v| {
                let o = t.slice_cols(v[0], 1, 2)?;
                p32(t, o)
            }),
        ),
        (
            "concat_cols",
            vec![a.clone(), b.clone()],
            Box::new(move |t, v| {
                let o = t.concat_cols(&[v[0], v[1]])?;
                p36(t, o)
            }),
        ),
        (
            "concat_rows",
            vec![a.clone(), b.clone()],
            Box::new(move |t, v| {
                let o = t.concat_rows(&[v[0], v[1]])?;
                p64(t, o)
            }),
        ),
        (
            "cross_entropy_sum",
            vec![a],
            Box::new(move |t, v| t.cross_entropy_sum(v[0], &targets)),
        ),
    ]
}

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..10 {
        for (name, params, f) in op_cases(seed) {
            let err = check_gradients(|t, v| f(t, v), &params, GRAD_EPS).unwrap();
            assert!(err < GRAD_TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn composite_softmax_matmul_sum() {
    let mut r = rng(9);
    let x = normal_tensor(&mut r, &[3, 3], 1.0);
    let y = normal_tensor(&mut r, &[3, 2], 1.0);
    let err = check_gradients(
        |t, v| {
            let s = t.softmax(v[0])?;
            let m = t.matmul(s, v[1])?;
            t.sum(m)
        },
        &[x, y],
        GRAD_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn transformer_blocks_and_end_to_end() {
    for seed in 0..3 {
        for (block, err) in model_grad_errors(seed).unwrap() {
            assert!(err < GRAD_TOL, "{block} seed {seed}: {err}");
        }
    }
}
