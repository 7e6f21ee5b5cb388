//! Finite-difference gradient checks of every engine primitive against
//! independent f64 reference implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spos::engine::{BnMode, BnStats, ConvParams, Graph, ParamStore, Tape, Tensor, Var};

pub const CASES: usize = 20;
const H: f64 = 1e-3;

pub struct PrimitiveReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

type Oracle<'a> = dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a;

/// Norm-wise relative error between the analytic gradients and central
/// differences of `Σ w·f(inputs)`, maximized over inputs.
fn compare(inputs: &[Vec<f32>], analytic: &[Vec<f32>], w: &[f32], f: &Oracle<'_>) -> f64 {
    let base: Vec<Vec<f64>> = inputs.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
    let dot = |args: &[Vec<f64>]| -> f64 { f(args).iter().zip(w).map(|(y, &w)| y * w as f64).sum() };
    let mut worst = 0.0f64;
    for (i, g) in analytic.iter().enumerate() {
        let mut fd = vec![0.0f64; base[i].len()];
        let mut args = base.clone();
        for j in 0..fd.len() {
            let x0 = args[i][j];
            args[i][j] = x0 + H;
            let up = dot(&args);
            args[i][j] = x0 - H;
            let down = dot(&args);
            args[i][j] = x0;
            fd[j] = (up - down) / (2.0 * H);
        }
        assert_eq!(g.len(), fd.len(), "gradient length of input {i}");
        let diff: f64 = g.iter().zip(&fd).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = g.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        let scale = na.max(nb);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero (for kinks at the origin).
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

/// Runs `build` on a tape holding `inputs`, back-propagates `w` from its
/// output and returns the output together with every input gradient.
fn engine(
    inputs: &[(Vec<usize>, Vec<f32>)],
    w_seed: &mut ChaCha8Rng,
    build: impl FnOnce(&mut Tape, &[Var]) -> Var,
) -> (Vec<f32>, Vec<f32>, Vec<Vec<f32>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| tape.input(Tensor::new(s.clone(), d.clone()).unwrap()))
        .collect();
    let out = build(&mut tape, &vars);
    let y = tape.value(&out).data().to_vec();
    let w = uniform(w_seed, y.len(), -1.0, 1.0);
    tape.backward_from(&out, w.clone(), &mut ParamStore::default()).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, (_, d))| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();
    (y, w, grads)
}

fn run(
    name: &'static str,
    seed: u64,
    case: impl FnMut(&mut ChaCha8Rng) -> Case,
) -> PrimitiveReport {
    run_with(name, seed, case, None::<fn(&[Vec<f64>]) -> Vec<f64>>)
}

/// Like [`run`], but the forward pass is checked against `forward` rather
/// than the gradient oracle (for straight-through primitives).
fn run_with(
    name: &'static str,
    seed: u64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Case,
    forward: Option<impl Fn(&[Vec<f64>]) -> Vec<f64>>,
) -> PrimitiveReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (inputs, build, oracle) = case(&mut rng);
        let (y, w, grads) = engine(&inputs, &mut rng, |t, v| build(t, v));
        let args: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.iter().map(|&x| x as f64).collect()).collect();
        let reference = match &forward {
            Some(f) => f(&args),
            None => oracle(&args),
        };
        assert_eq!(reference.len(), y.len(), "{name}: oracle output size");
        let fwd = y
            .iter()
            .zip(&reference)
            .map(|(&a, b)| (a as f64 - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        assert!(fwd < 1e-4, "{name}: forward disagrees with the oracle by {fwd}");
        let datas: Vec<Vec<f32>> = inputs.iter().map(|(_, d)| d.clone()).collect();
        worst = worst.max(compare(&datas, &grads, &w, oracle.as_ref()));
    }
    PrimitiveReport {
        name,
        cases: CASES,
        worst,
    }
}

// ---- f64 reference implementations ----

#[allow(clippy::too_many_arguments)]
pub fn conv_ref(
    x: &[f64],
    k: &[f64],
    [n, cin, h, w]: [usize; 4],
    [cout, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let (cig, cog) = (cin / groups, cout / groups);
    let mut y = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            let grp = co / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * cin + grp * cig + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cig + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    y[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (y, ho, wo)
}

/// Batch norm over `N×C×HW`; `stats = None` normalizes with the (biased)
/// batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn bn_ref(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, c: usize, hw: usize, stats: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| (0..hw).map(move |i| (b * c + ch) * hw + i));
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let cnt = (n * hw) as f64;
                let mean = vals().map(|i| x[i]).sum::<f64>() / cnt;
                (mean, vals().map(|i| (x[i] - mean).powi(2)).sum::<f64>() / cnt)
            }
        };
        for i in vals() {
            y[i] = gamma[ch] * (x[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    y
}

pub fn shuffle_ref(x: &[f64], n: usize, c: usize, hw: usize, groups: usize) -> Vec<f64> {
    // Output channel j = g·(C/G) + i reads input channel i·G + g.
    let per = c / groups;
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for j in 0..c {
            let (g, i) = (j / per, j % per);
            let src = i * groups + g;
            for p in 0..hw {
                y[(b * c + j) * hw + p] = x[(b * c + src) * hw + p];
            }
        }
    }
    y
}

pub fn maxpool_ref(x: &[f64], [n, c, h, w]: [usize; 4], k: usize, s: usize, p: usize) -> Vec<f64> {
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            m = m.max(x[(plane * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                y.push(m);
            }
        }
    }
    y
}

pub fn softmax_ce_ref(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            s.ln() + m - row[l]
        })
        .sum::<f64>()
        / n as f64
}

// ---- the suite ----

type Case = (Vec<(Vec<usize>, Vec<f32>)>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>, Box<Oracle<'static>>);

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=2);
    let kind = rng.random_range(0..3);
    let cin = [1, 2, 3, 4][rng.random_range(0..4)] * if kind == 1 { 2 } else { 1 };
    let (groups, cout) = match kind {
        0 => (1, rng.random_range(1..=4)),
        1 => (2, 2 * rng.random_range(1..=2)),
        _ => (cin, cin),
    };
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let pad = if rng.random_bool(0.7) { k / 2 } else { 0 };
    let h = rng.random_range(k.max(3)..=7);
    let w = rng.random_range(k.max(3)..=7);
    let x = uniform(rng, n * cin * h * w, -1.0, 1.0);
    let kern = uniform(rng, cout * (cin / groups) * k * k, -1.0, 1.0);
    let p = ConvParams::new(stride, pad, groups);
    (
        vec![(vec![n, cin, h, w], x), (vec![cout, cin / groups, k, k], kern)],
        Box::new(move |t, v| t.conv2d(&v[0], &v[1], p).unwrap()),
        Box::new(move |a| conv_ref(&a[0], &a[1], [n, cin, h, w], [cout, k, k], stride, pad, groups).0),
    )
}

fn bn_case(train: bool) -> impl FnMut(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let (n, c, h, w) = (rng.random_range(2..=3), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=3));
        let x = uniform(rng, n * c * h * w, -2.0, 2.0);
        let gamma = uniform(rng, c, 0.5, 1.5);
        let beta = uniform(rng, c, -0.5, 0.5);
        let mean: Vec<f32> = uniform(rng, c, -0.5, 0.5);
        let var: Vec<f32> = uniform(rng, c, 0.5, 2.0);
        let eps = 1e-5f32;
        let (m64, v64): (Vec<f64>, Vec<f64>) = (mean.iter().map(|&v| v as f64).collect(), var.iter().map(|&v| v as f64).collect());
        let stats = BnStats { mean, var };
        (
            vec![(vec![n, c, h, w], x), (vec![c], gamma), (vec![c], beta)],
            Box::new(move |t, v| {
                let mut s = stats.clone();
                let mode = if train { BnMode::train() } else { BnMode::Eval };
                t.batch_norm(&v[0], &v[1], &v[2], &mut s, mode, eps).unwrap()
            }),
            Box::new(move |a| {
                let st = if train { None } else { Some((m64.as_slice(), v64.as_slice())) };
                bn_ref(&a[0], &a[1], &a[2], n, c, h * w, st, eps as f64)
            }),
        )
    }
}

fn shape4(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)]
}

pub fn gradient_suite() -> Vec<PrimitiveReport> {
    let mut out = Vec::new();
    out.push(run("conv2d", 1, conv_case));
    out.push(run("batch_norm(train)", 2, bn_case(true)));
    out.push(run("batch_norm(eval)", 3, bn_case(false)));
    out.push(run("relu", 4, |rng| {
        let s = shape4(rng);
        let x = away_from_zero(rng, s.iter().product());
        (
            vec![(s.to_vec(), x)],
            Box::new(|t, v| t.relu(&v[0]).unwrap()),
            Box::new(|a| a[0].iter().map(|v| v.max(0.0)).collect()),
        )
    }));
    out.push(run("add", 5, |rng| {
        let s = shape4(rng);
        let n = s.iter().product();
        let (a, b) = (uniform(rng, n, -1.0, 1.0), uniform(rng, n, -1.0, 1.0));
        (
            vec![(s.to_vec(), a), (s.to_vec(), b)],
            Box::new(|t, v| t.add(&v[0], &v[1]).unwrap()),
            Box::new(|a| a[0].iter().zip(&a[1]).map(|(x, y)| x + y).collect()),
        )
    }));
    out.push(run("linear", 6, |rng| {
        let (n, cin, k) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
        let bias = rng.random_bool(0.5);
        let mut inputs = vec![
            (vec![n, cin], uniform(rng, n * cin, -1.0, 1.0)),
            (vec![k, cin], uniform(rng, k * cin, -1.0, 1.0)),
        ];
        if bias {
            inputs.push((vec![k], uniform(rng, k, -1.0, 1.0)));
        }
        (
            inputs,
            Box::new(move |t, v| t.linear(&v[0], &v[1], v.get(2)).unwrap()),
            Box::new(move |a| {
                let mut y = vec![0.0; n * k];
                for i in 0..n {
                    for o in 0..k {
                        y[i * k + o] = (0..cin).map(|c| a[0][i * cin + c] * a[1][o * cin + c]).sum::<f64>()
                            + a.get(2).map_or(0.0, |b| b[o]);
                    }
                }
                y
            }),
        )
    }));
    out.push(run("global_avg_pool", 7, |rng| {
        let s = shape4(rng);
        let x = uniform(rng, s.iter().product(), -1.0, 1.0);
        let hw = s[2] * s[3];
        (
            vec![(s.to_vec(), x)],
            Box::new(|t, v| t.global_avg_pool(&v[0]).unwrap()),
            Box::new(move |a| a[0].chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect()),
        )
    }));
    out.push(run("narrow_channels", 8, |rng| {
        let mut s = shape4(rng);
        s[1] = rng.random_range(2..=5);
        let start = rng.random_range(0..s[1]);
        let len = rng.random_range(1..=s[1] - start);
        let x = uniform(rng, s.iter().product(), -1.0, 1.0);
        let (c, hw) = (s[1], s[2] * s[3]);
        (
            vec![(s.to_vec(), x)],
            Box::new(move |t, v| t.narrow_channels(&v[0], start, len).unwrap()),
            Box::new(move |a| {
                a[0].chunks(c * hw)
                    .flat_map(|img| img[start * hw..(start + len) * hw].to_vec())
                    .collect()
            }),
        )
    }));
    out.push(run("concat_channels", 9, |rng| {
        let s = shape4(rng);
        let c2 = rng.random_range(1..=3);
        let hw = s[2] * s[3];
        let a = uniform(rng, s.iter().product(), -1.0, 1.0);
        let b = uniform(rng, s[0] * c2 * hw, -1.0, 1.0);
        let c1 = s[1];
        (
            vec![(s.to_vec(), a), (vec![s[0], c2, s[2], s[3]], b)],
            Box::new(|t, v| t.concat_channels(v).unwrap()),
            Box::new(move |a| {
                a[0].chunks(c1 * hw)
                    .zip(a[1].chunks(c2 * hw))
                    .flat_map(|(x, y)| x.iter().chain(y).copied().collect::<Vec<_>>())
                    .collect()
            }),
        )
    }));
    out.push(run("channel_shuffle", 10, |rng| {
        let mut s = shape4(rng);
        let groups = rng.random_range(1..=3);
        s[1] = groups * rng.random_range(1..=3);
        let x = uniform(rng, s.iter().product(), -1.0, 1.0);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        (
            vec![(s.to_vec(), x)],
            Box::new(move |t, v| t.channel_shuffle(&v[0], groups).unwrap()),
            Box::new(move |a| shuffle_ref(&a[0], n, c, hw, groups)),
        )
    }));
    out.push(run("max_pool2d", 11, |rng| {
        let s = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(3..=6), rng.random_range(3..=6)];
        let (k, st) = ([2, 3][rng.random_range(0..2)], rng.random_range(1..=2));
        let p = rng.random_range(0..k.min(2));
        let numel: usize = s.iter().product();
        // Distinct values at least 1e-2 apart, so no window has a near tie.
        let mut perm: Vec<usize> = (0..numel).collect();
        for i in (1..numel).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let x: Vec<f32> = perm.iter().map(|&i| i as f32 * 0.01 - 0.3).collect();
        (
            vec![(s.to_vec(), x)],
            Box::new(move |t, v| t.max_pool2d(&v[0], k, st, p).unwrap()),
            Box::new(move |a| maxpool_ref(&a[0], s, k, st, p)),
        )
    }));
    // Quantizers are checked against their straight-through surrogates:
    // clip(x, 0, alpha) for activations, tanh(w)/max|tanh(w)| (max held fixed)
    // for weights.
    for bits in 1..=4u32 {
        let name = ["quantize_activation(1b)", "quantize_activation(2b)", "quantize_activation(3b)", "quantize_activation(4b)"][bits as usize - 1];
        out.push(run_with(
            name,
            12 + bits as u64,
            move |rng| {
                let s = shape4(rng);
                let alpha = rng.random_range(0.5f32..2.0);
                let x: Vec<f32> = (0..s.iter().product::<usize>())
                    .map(|_| loop {
                        let v = rng.random_range(-1.0f32..3.0);
                        if v.abs() > 0.01 && (v - alpha).abs() > 0.01 {
                            break v;
                        }
                    })
                    .collect();
                (
                    vec![(s.to_vec(), x), (vec![1], vec![alpha])],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.quantize_activation(&v[0], &v[1], bits).unwrap()) as Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
                    Box::new(|a: &[Vec<f64>]| a[0].iter().map(|&v| v.clamp(0.0, a[1][0])).collect()) as Box<Oracle<'static>>,
                )
            },
            Some(move |a: &[Vec<f64>]| -> Vec<f64> {
                let (al, l) = (a[1][0], ((1u32 << bits) - 1) as f64);
                a[0].iter().map(|&v| (v.clamp(0.0, al) / al * l).round() / l * al).collect()
            }),
        ));
    }
    for bits in 1..=4u32 {
        let name = ["quantize_weight(1b)", "quantize_weight(2b)", "quantize_weight(3b)", "quantize_weight(4b)"][bits as usize - 1];
        out.push(run_with(
            name,
            20 + bits as u64,
            move |rng| {
                let s = shape4(rng);
                let n: usize = s.iter().product();
                let w = uniform(rng, n.max(2), -1.5, 1.5);
                let shape = if n >= 2 { s.to_vec() } else { vec![w.len()] };
                let m = w.iter().map(|v| (*v as f64).tanh().abs()).fold(0.0, f64::max);
                (
                    vec![(shape, w)],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.quantize_weight(&v[0], bits).unwrap()) as Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
                    Box::new(move |a: &[Vec<f64>]| a[0].iter().map(|v| v.tanh() / m).collect()) as Box<Oracle<'static>>,
                )
            },
            Some(move |a: &[Vec<f64>]| -> Vec<f64> {
                let l = ((1u32 << bits) - 1) as f64;
                let m = a[0].iter().map(|v| v.tanh().abs()).fold(0.0, f64::max);
                a[0].iter().map(|v| 2.0 * ((v.tanh() / (2.0 * m) + 0.5) * l).round() / l - 1.0).collect()
            }),
        ));
    }
    out.push(run("two_layer_net", 31, |rng| {
        // conv -> batch norm -> relu -> pool -> linear -> cross entropy
        let (n, cin, cmid, k) = (2, rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=4));
        let hw = 3;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        // Resample until no pre-activation sits within reach of the ReLU kink.
        let inputs = loop {
            let inputs = vec![
                (vec![n, cin, hw, hw], uniform(rng, n * cin * hw * hw, -1.0, 1.0)),
                (vec![cmid, cin, 3, 3], uniform(rng, cmid * cin * 9, -0.5, 0.5)),
                (vec![cmid], uniform(rng, cmid, 0.5, 1.5)),
                (vec![cmid], uniform(rng, cmid, -0.5, 0.5)),
                (vec![k, cmid], uniform(rng, k * cmid, -1.0, 1.0)),
                (vec![k], uniform(rng, k, -0.5, 0.5)),
            ];
            let a: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.iter().map(|&v| v as f64).collect()).collect();
            let (y, _, _) = conv_ref(&a[0], &a[1], [n, cin, hw, hw], [cmid, 3, 3], 1, 1, 1);
            if bn_ref(&y, &a[2], &a[3], n, cmid, hw * hw, None, 1e-5).iter().all(|v| v.abs() > 0.02) {
                break inputs;
            }
        };
        let l2 = labels.clone();
        (
            inputs,
            Box::new(move |t, v| {
                let y = t.conv2d(&v[0], &v[1], ConvParams::new(1, 1, 1)).unwrap();
                let y = t.batch_norm(&y, &v[2], &v[3], &mut BnStats::new(cmid), BnMode::train(), 1e-5).unwrap();
                let y = t.relu(&y).unwrap();
                let y = t.global_avg_pool(&y).unwrap();
                let y = t.linear(&y, &v[4], Some(&v[5])).unwrap();
                t.softmax_cross_entropy(&y, &labels).unwrap()
            }),
            Box::new(move |a| {
                let (y, _, _) = conv_ref(&a[0], &a[1], [n, cin, hw, hw], [cmid, 3, 3], 1, 1, 1);
                let y = bn_ref(&y, &a[2], &a[3], n, cmid, hw * hw, None, 1e-5);
                let pooled: Vec<f64> = y.chunks(hw * hw).map(|p| p.iter().map(|v| v.max(0.0)).sum::<f64>() / (hw * hw) as f64).collect();
                let logits: Vec<f64> = (0..n)
                    .flat_map(|i| {
                        let pooled = &pooled;
                        (0..k).map(move |o| (0..cmid).map(|c| pooled[i * cmid + c] * a[4][o * cmid + c]).sum::<f64>() + a[5][o])
                    })
                    .collect();
                vec![softmax_ce_ref(&logits, &l2, k)]
            }),
        )
    }));
    out.push(run("softmax_cross_entropy", 30, |rng| {
        let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=10));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let logits = uniform(rng, n * k, -3.0, 3.0);
        let l2 = labels.clone();
        (
            vec![(vec![n, k], logits)],
            Box::new(move |t, v| t.softmax_cross_entropy(&v[0], &labels).unwrap()),
            Box::new(move |a| vec![softmax_ce_ref(&a[0], &l2, k)]),
        )
    }));
    out
}
