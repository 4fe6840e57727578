//! Finite-difference checks for every differentiable graph op.

use c3forge::numeric::{compare_gradients, Graph, GradCheckReport, Segment, Tensor, Var};
use c3forge::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-2;
pub const TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn resample(rng: &mut ChaCha8Rng, draw: impl Fn(&mut ChaCha8Rng) -> Tensor, ok: impl Fn(&Tensor) -> bool) -> Tensor {
    for _ in 0..100_000 {
        let t = draw(rng);
        if ok(&t) {
            return t;
        }
    }
    panic!("no acceptable sample drawn");
}

fn dim(rng: &mut ChaCha8Rng, lo: usize) -> usize {
    rng.gen_range(lo..=8)
}

/// Checks one op: the scalar objective is `sum(out * r)` for a fixed random `r`,
/// evaluated in f64 on the numeric side.
pub fn check(case: &Case, seed: u64) -> Result<GradCheckReport> {
    let probe_g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| probe_g.leaf(t.clone())).collect();
    let out = (case.build)(&probe_g, &vars)?;
    let out_shape = probe_g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
    let rc = probe_g.constant(r.clone());
    let prod = probe_g.mul(out, rc)?;
    let loss = probe_g.sum(prod);
    let grads = probe_g.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        .collect();
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var> = ps.iter().map(|t| g.leaf(t.clone())).collect();
        let o = (case.build)(&g, &vs)?;
        Ok(g.with_data(o, |d| {
            d.iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        }))
    };
    compare_gradients(eval, &case.inputs, &analytic, EPS, TOL, 64)
}

/// All op cases for one seed, with random shapes of at most 8 per dimension.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();
    let (m, k, n) = (dim(&mut rng, 1), dim(&mut rng, 1), dim(&mut rng, 1));

    v.push(Case {
        name: "matmul",
        inputs: vec![rand_tensor(&mut rng, &[m, k], -1.0, 1.0), rand_tensor(&mut rng, &[k, n], -1.0, 1.0)],
        build: Box::new(|g, x| g.matmul(x[0], x[1])),
    });
    v.push(Case {
        name: "transpose",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
        build: Box::new(|g, x| g.transpose(x[0])),
    });
    for (name, f) in [
        ("add", 0u8),
        ("sub", 1),
        ("mul", 2),
    ] {
        v.push(Case {
            name,
            inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0), rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
            build: Box::new(move |g, x| match f {
                0 => g.add(x[0], x[1]),
                1 => g.sub(x[0], x[1]),
                _ => g.mul(x[0], x[1]),
            }),
        });
    }
    v.push(Case {
        name: "add_row",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0), rand_tensor(&mut rng, &[n], -1.0, 1.0)],
        build: Box::new(|g, x| g.add_row(x[0], x[1])),
    });
    let c = rng.gen_range(-2.0..2.0);
    v.push(Case {
        name: "scale",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
        build: Box::new(move |g, x| Ok(g.scale(x[0], c))),
    });
    v.push(Case {
        name: "mul_scalar",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0), rand_tensor(&mut rng, &[1], 0.5, 2.0)],
        build: Box::new(|g, x| g.mul_scalar(x[0], x[1])),
    });
    for (name, f) in [("exp", 0u8), ("tanh", 1), ("sigmoid", 2), ("gelu", 3)] {
        v.push(Case {
            name,
            inputs: vec![rand_tensor(&mut rng, &[m, n], -1.5, 1.5)],
            build: Box::new(move |g, x| {
                Ok(match f {
                    0 => g.exp(x[0]),
                    1 => g.tanh(x[0]),
                    2 => g.sigmoid(x[0]),
                    _ => g.gelu(x[0]),
                })
            }),
        });
    }
    // rows with tiny variance make the normalization too curved for the step size
    let ln_n = dim(&mut rng, 3);
    let ln_x = resample(&mut rng, |r| rand_tensor(r, &[m, ln_n], -2.0, 2.0), |t| {
        t.data().chunks(ln_n).all(|row| {
            let mu = row.iter().sum::<f32>() / ln_n as f32;
            row.iter().map(|x| (x - mu) * (x - mu)).sum::<f32>() / ln_n as f32 > 0.5
        })
    });
    v.push(Case {
        name: "layer_norm",
        inputs: vec![
            ln_x,
            rand_tensor(&mut rng, &[ln_n], 0.5, 1.5),
            rand_tensor(&mut rng, &[ln_n], -0.5, 0.5),
        ],
        build: Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
    });
    v.push(Case {
        name: "softmax",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -2.0, 2.0)],
        build: Box::new(|g, x| g.softmax(x[0])),
    });
    let ids: Vec<usize> = (0..dim(&mut rng, 1)).map(|_| rng.gen_range(0..m)).collect();
    v.push(Case {
        name: "embedding",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
        build: Box::new(move |g, x| g.embedding(x[0], &ids)),
    });
    let m2 = dim(&mut rng, 1);
    v.push(Case {
        name: "concat_rows",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0), rand_tensor(&mut rng, &[m2, n], -1.0, 1.0)],
        build: Box::new(|g, x| g.concat_rows(&[x[0], x[1], x[0]])),
    });
    v.push(Case {
        name: "reshape",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
        build: Box::new(move |g, x| g.reshape(x[0], &[n, m])),
    });
    v.push(Case {
        name: "mean_rows",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
        build: Box::new(|g, x| g.mean_rows(x[0])),
    });
    v.push(Case {
        name: "l2_normalize_rows",
        inputs: vec![resample(&mut rng, |r| rand_tensor(r, &[m, n], -1.5, 1.5), |t| {
            t.data().chunks(n).all(|row| row.iter().map(|x| x * x).sum::<f32>() > 1.0)
        })],
        build: Box::new(|g, x| g.l2_normalize_rows(x[0])),
    });
    let targets: Vec<Option<usize>> = (0..m)
        .map(|i| if i == 0 || rng.gen_bool(0.7) { Some(rng.gen_range(0..n)) } else { None })
        .collect();
    v.push(Case {
        name: "cross_entropy",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -2.0, 2.0)],
        build: Box::new(move |g, x| g.cross_entropy(x[0], &targets)),
    });
    let (c_in, c_out, kern) = (dim(&mut rng, 1), dim(&mut rng, 1), rng.gen_range(1..=4));
    let stride = rng.gen_range(1..=3);
    let pad = rng.gen_range(0..kern);
    let len = rng.gen_range(kern.max(2)..=8);
    v.push(Case {
        name: "conv1d",
        inputs: vec![
            rand_tensor(&mut rng, &[c_in, len], -1.0, 1.0),
            rand_tensor(&mut rng, &[c_out, c_in, kern], -1.0, 1.0),
            rand_tensor(&mut rng, &[c_out], -1.0, 1.0),
        ],
        build: Box::new(move |g, x| g.conv1d(x[0], x[1], x[2], stride, pad)),
    });
    let tstride = rng.gen_range(1..=4);
    let tpad = rng.gen_range(0..=1);
    let tkern = tstride + 2 * tpad + rng.gen_range(0..=1);
    let tlen = dim(&mut rng, 1);
    v.push(Case {
        name: "conv_transpose1d",
        inputs: vec![
            rand_tensor(&mut rng, &[c_in, tlen], -1.0, 1.0),
            rand_tensor(&mut rng, &[c_in, c_out, tkern], -1.0, 1.0),
            rand_tensor(&mut rng, &[c_out], -1.0, 1.0),
        ],
        build: Box::new(move |g, x| g.conv_transpose1d(x[0], x[1], x[2], tstride, tpad)),
    });
    let (t_len, h) = (dim(&mut rng, 1), dim(&mut rng, 1));
    v.push(Case {
        name: "mgu",
        inputs: vec![
            rand_tensor(&mut rng, &[t_len, 2 * h], -1.0, 1.0),
            rand_tensor(&mut rng, &[h, h], -0.6, 0.6),
            rand_tensor(&mut rng, &[h, h], -0.6, 0.6),
        ],
        build: Box::new(|g, x| g.mgu(x[0], x[1], x[2])),
    });
    let heads = rng.gen_range(1..=2);
    let width = heads * rng.gen_range(1..=4);
    let rows = dim(&mut rng, 2);
    let split = rng.gen_range(1..rows);
    let causal = rng.gen_bool(0.5);
    let segments = vec![
        Segment { start: 0, len: split },
        Segment {
            start: split,
            len: rows - split,
        },
    ];
    v.push(Case {
        name: "attention",
        inputs: vec![
            rand_tensor(&mut rng, &[rows, width], -1.0, 1.0),
            rand_tensor(&mut rng, &[rows, width], -1.0, 1.0),
            rand_tensor(&mut rng, &[rows, width], -1.0, 1.0),
        ],
        build: Box::new(move |g, x| g.attention(x[0], x[1], x[2], heads, &segments, causal)),
    });
    let fft = if rng.gen_bool(0.5) { 4 } else { 8 };
    let hop = rng.gen_range(1..=fft);
    let sig = rng.gen_range(fft..=8);
    v.push(Case {
        name: "stft_magnitude",
        // real-valued bins turn into |x|, so stay clear of zero magnitudes
        inputs: vec![resample(&mut rng, |r| rand_tensor(r, &[sig], -1.0, 1.0), |t| {
            let g = Graph::new();
            let x = g.constant(t.clone());
            g.stft_magnitude(x, fft, hop)
                .map(|m| g.with_data(m, |d| d.iter().all(|v| *v > 0.15)))
                .unwrap_or(false)
        })],
        build: Box::new(move |g, x| g.stft_magnitude(x[0], fft, hop)),
    });
    // keep |a-b| away from the kink at zero
    let a = rand_tensor(&mut rng, &[m, n], -1.0, 1.0);
    let offs: Vec<f32> = (0..m * n)
        .map(|_| {
            let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            s * rng.gen_range(0.1..1.0)
        })
        .collect();
    let b = Tensor::new(vec![m, n], a.data().iter().zip(&offs).map(|(x, o)| x + o).collect()).unwrap();
    v.push(Case {
        name: "l1_loss",
        inputs: vec![a, b],
        build: Box::new(|g, x| g.l1_loss(x[0], x[1])),
    });
    v.push(Case {
        name: "mse_loss",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0), rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
        build: Box::new(|g, x| g.mse_loss(x[0], x[1])),
    });
    v.push(Case {
        name: "sum",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
        build: Box::new(|g, x| Ok(g.sum(x[0]))),
    });
    v.push(Case {
        name: "mean",
        inputs: vec![rand_tensor(&mut rng, &[m, n], -1.0, 1.0)],
        build: Box::new(|g, x| Ok(g.mean(x[0]))),
    });
    v
}
