//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it checks.

#![allow(dead_code)]

use flowpref::numerics::{Mlp, Tensor};

/// Central finite difference of `f` with respect to one coordinate of one
/// parameter tensor of `net`.
pub fn central_difference(
    net: &mut Mlp<f64>,
    tensor: usize,
    index: usize,
    h: f64,
    mut f: impl FnMut(&Mlp<f64>) -> f64,
) -> f64 {
    let orig = net.params_mut()[tensor].data()[index];
    net.params_mut()[tensor].data_mut()[index] = orig + h;
    let up = f(net);
    net.params_mut()[tensor].data_mut()[index] = orig - h;
    let down = f(net);
    net.params_mut()[tensor].data_mut()[index] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with a small absolute floor for coordinates whose
/// gradient is essentially zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative error over every parameter coordinate of `net`.
pub fn max_fd_error(
    net: &Mlp<f64>,
    grads: &[Option<Tensor<f64>>],
    mut f: impl FnMut(&Mlp<f64>) -> f64,
) -> f64 {
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("every parameter receives a gradient");
        for i in 0..g.data().len() {
            let fd = central_difference(&mut probe, k, i, 1e-5, &mut f);
            worst = worst.max(rel_err(g.data()[i], fd));
        }
    }
    worst
}

fn mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let mut s = 0.0;
    for x in xs {
        s += (x - m) * (x - m);
    }
    (s / xs.len() as f64).sqrt()
}

fn to_weight(a: f64, z_c: f64) -> f64 {
    let mut u = a / z_c;
    if u > 1.0 {
        u = 1.0;
    }
    if u < -1.0 {
        u = -1.0;
    }
    0.5 + 0.5 * u
}

/// Scalarize, subtract the group mean, divide by the batch-wide std.
pub fn scalar_first_oracle(
    groups: &[Vec<Vec<f64>>],
    w: &[f64],
    eps: f64,
    z_c: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut s: Vec<Vec<f64>> = Vec::new();
    for g in groups {
        let mut row = Vec::new();
        for r in g {
            let mut acc = 0.0;
            for k in 0..w.len() {
                acc += w[k] * r[k];
            }
            row.push(acc);
        }
        s.push(row);
    }
    let all: Vec<f64> = s.iter().flatten().copied().collect();
    let sigma = pop_std(&all);
    let mut adv = Vec::new();
    let mut wts = Vec::new();
    for row in &s {
        let mu = mean(row);
        let a: Vec<f64> = row.iter().map(|v| (v - mu) / (sigma + eps)).collect();
        wts.push(a.iter().map(|&x| to_weight(x, z_c)).collect());
        adv.push(a);
    }
    (adv, wts)
}

/// Per-group, per-objective z-scores, weighted fusion, batch standardization.
pub fn decoupled_oracle(
    groups: &[Vec<Vec<f64>>],
    w: &[f64],
    eps: f64,
    z_c: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k = w.len();
    let mut fused: Vec<Vec<f64>> = Vec::new();
    for g in groups {
        let mut cols = Vec::new();
        for j in 0..k {
            let col: Vec<f64> = g.iter().map(|r| r[j]).collect();
            cols.push((mean(&col), pop_std(&col)));
        }
        let mut row = Vec::new();
        for r in g {
            let mut acc = 0.0;
            for j in 0..k {
                acc += w[j] * (r[j] - cols[j].0) / (cols[j].1 + eps);
            }
            row.push(acc);
        }
        fused.push(row);
    }
    let all: Vec<f64> = fused.iter().flatten().copied().collect();
    let (mu, sd) = (mean(&all), pop_std(&all));
    let mut adv = Vec::new();
    let mut wts = Vec::new();
    for row in &fused {
        let a: Vec<f64> = row.iter().map(|v| (v - mu) / (sd + eps)).collect();
        wts.push(a.iter().map(|&x| to_weight(x, z_c)).collect());
        adv.push(a);
    }
    (adv, wts)
}

/// Symmetric InfoNCE over cosine similarities, written out with explicit
/// log-sum-exp.
pub fn info_nce_oracle(lr: &[Vec<f64>], hr: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let a: Vec<Vec<f64>> = lr.iter().map(unit).collect();
    let b: Vec<Vec<f64>> = hr.iter().map(unit).collect();
    let n = a.len();
    let sim = |i: usize, j: usize| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let lse = |xs: Vec<f64>| {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut fwd = 0.0;
    let mut back = 0.0;
    for i in 0..n {
        fwd += sim(i, i) - lse((0..n).map(|j| sim(i, j)).collect());
        back += sim(i, i) - lse((0..n).map(|j| sim(j, i)).collect());
    }
    -0.5 * (fwd / n as f64 + back / n as f64)
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
