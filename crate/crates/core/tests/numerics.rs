mod common;

use common::tensor;
use polyglot_core::numerics::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use polyglot_core::Result;

type Op = for<'g> fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

/// Random fixed projection so every output coordinate has a distinct weight.
fn readout<'g>(g: &'g Graph<f64>, y: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let w = g.constant(tensor(&y.shape(), 999));
    Ok(y.mul(&w)?.sum())
}

fn check(name: &str, op: Op, inputs: Vec<Tensor<f64>>) {
    let report = grad_check(|g, v| readout(g, op(g, v)?), &inputs, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_err <= 1e-5, "{name}: {report:?}");
}

fn check_f32(name: &str, inputs: Vec<Tensor<f64>>, op: for<'g> fn(&'g Graph<f32>, &[Var<'g, f32>]) -> Result<Var<'g, f32>>) {
    let inputs: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
    let opts = GradCheckOptions { step: 1e-2, floor: 1e-2, max_coords_per_tensor: None };
    let report = grad_check(
        |g, v| {
            let y = op(g, v)?;
            let w = g.constant(tensor(&y.shape(), 999).cast());
            Ok(y.mul(&w)?.sum())
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-3, "{name} (f32): {report:?}");
}

#[test]
fn matmul_and_transpose() {
    check("matmul", |_, v| v[0].matmul(&v[1]), vec![tensor(&[3, 4], 1), tensor(&[4, 5], 2)]);
    check("transpose", |_, v| v[0].transpose(), vec![tensor(&[3, 4], 3)]);
}

#[test]
fn elementwise() {
    let ab = || vec![tensor(&[2, 3], 4), tensor(&[2, 3], 5)];
    check("add", |_, v| v[0].add(&v[1]), ab());
    check("sub", |_, v| v[0].sub(&v[1]), ab());
    check("mul", |_, v| v[0].mul(&v[1]), ab());
    check("scale", |_, v| Ok(v[0].scale(-2.5)), ab());
    check("square", |_, v| Ok(v[0].square()), ab());
    check("add_row", |_, v| v[0].add_row(&v[1]), vec![tensor(&[3, 4], 6), tensor(&[4], 7)]);
    let positive = tensor(&[2, 3], 8).map(|x| x.abs() + 0.5);
    check("sqrt", |_, v| Ok(v[0].sqrt()), vec![positive.clone()]);
    check("xlogx", |_, v| Ok(v[0].xlogx()), vec![positive]);
    check("gelu", |_, v| Ok(v[0].gelu()), vec![tensor(&[3, 5], 9).map(|x| 3.0 * x)]);
}

#[test]
fn linear_layers() {
    check(
        "linear",
        |_, v| v[0].linear(&v[1], &v[2]),
        vec![tensor(&[3, 4], 10), tensor(&[4, 2], 11), tensor(&[2], 12)],
    );
    check(
        "layer_norm",
        |_, v| v[0].layer_norm(&v[1], &v[2], 1e-5),
        vec![tensor(&[3, 6], 13), tensor(&[6], 14), tensor(&[6], 15)],
    );
}

#[test]
fn softmaxes() {
    check("softmax", |_, v| v[0].softmax(), vec![tensor(&[3, 5], 16).map(|x| 4.0 * x)]);
    check("log_softmax", |_, v| v[0].log_softmax(), vec![tensor(&[3, 5], 17).map(|x| 4.0 * x)]);
    check("normalize_rows", |_, v| v[0].normalize_rows(1e-8), vec![tensor(&[3, 4], 18)]);
}

#[test]
fn convolutions() {
    check("conv1d", |_, v| v[0].conv1d(&v[1], 2, 1), vec![tensor(&[2, 11], 19), tensor(&[3, 2, 3], 20)]);
    check("conv1d grouped", |_, v| v[0].conv1d(&v[1], 1, 2), vec![tensor(&[4, 9], 21), tensor(&[4, 2, 4], 22)]);
    check("pad_last", |_, v| v[0].pad_last(2, 1), vec![tensor(&[2, 5], 23)]);
}

#[test]
fn indexing() {
    check("slice_cols", |_, v| v[0].slice_cols(1, 3), vec![tensor(&[3, 4], 24)]);
    check("slice_rows", |_, v| v[0].slice_rows(1, 3), vec![tensor(&[4, 2], 25)]);
    check(
        "concat_cols",
        |_, v| Var::concat_cols(&[v[0], v[1]]),
        vec![tensor(&[3, 2], 26), tensor(&[3, 4], 27)],
    );
    check(
        "concat_rows",
        |_, v| Var::concat_rows(&[v[0], v[1]]),
        vec![tensor(&[2, 3], 28), tensor(&[1, 3], 29)],
    );
    check("gather_rows", |_, v| v[0].gather_rows(&[2, 0, 2, 1]), vec![tensor(&[3, 4], 30)]);
    check(
        "replace_rows",
        |_, v| v[0].replace_rows(&v[1], &[0, 2]),
        vec![tensor(&[4, 3], 31), tensor(&[3], 32)],
    );
    check("reshape", |_, v| v[0].reshape(vec![6, 2]), vec![tensor(&[3, 4], 33)]);
}

#[test]
fn reductions() {
    check("sum_last", |_, v| v[0].sum_last(), vec![tensor(&[3, 4], 34)]);
    check("mean_rows", |_, v| v[0].mean_rows(), vec![tensor(&[3, 4], 35)]);
    check("mean", |_, v| Ok(v[0].mean()), vec![tensor(&[3, 4], 36)]);
}

#[test]
fn single_precision_tolerance() {
    check_f32("matmul", vec![tensor(&[3, 4], 1), tensor(&[4, 5], 2)], |_, v| v[0].matmul(&v[1]));
    check_f32("layer_norm", vec![tensor(&[3, 6], 13), tensor(&[6], 14), tensor(&[6], 15)], |_, v| {
        v[0].layer_norm(&v[1], &v[2], 1e-5)
    });
    check_f32("softmax", vec![tensor(&[3, 5], 16)], |_, v| v[0].softmax());
    check_f32("conv1d", vec![tensor(&[2, 11], 19), tensor(&[3, 2, 3], 20)], |_, v| v[0].conv1d(&v[1], 2, 1));
    check_f32("gelu", vec![tensor(&[3, 5], 9)], |_, v| Ok(v[0].gelu()));
}

#[test]
fn conv_shorter_than_kernel_is_an_error() {
    let g = Graph::<f64>::new();
    let x = g.constant(tensor(&[1, 3], 1));
    let k = g.constant(tensor(&[1, 1, 4], 2));
    assert!(matches!(x.conv1d(&k, 1, 1), Err(polyglot_core::Error::EmptyOutput { len: 3, kernel: 4 })));
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::<f64>::new();
    let p = g.param(tensor(&[2, 2], 1));
    let c = g.constant(tensor(&[2, 2], 2));
    let frozen_only = c.square();
    let loss = p.mul(&c).unwrap().add(&frozen_only).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(p).is_some());
    assert!(grads.get(c).is_none());
    assert!(grads.get(frozen_only).is_none());
}

#[test]
fn softmax_rows_are_simplex_points() {
    let g = Graph::<f64>::new();
    let s = g.constant(tensor(&[5, 7], 3).map(|x| 30.0 * x)).softmax().unwrap().value();
    for r in 0..5 {
        let row = s.row(r);
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
