//! Random op instances and the finite-difference comparison shared by the
//! gradient tests and the acceptance run.

use rand::Rng as _;
use xforge::rng::{self, Rng};
use xforge::tensor::finite_difference_gradient;
use xforge::{Result, Tape, Tensor, Var};

pub const TRIALS: usize = 100;
pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so kinks stay outside the stencil.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Max-norm relative error of the tape gradient against central differences
/// of `sum(op(inputs) ⊙ r)` for a fixed random projection `r`.
pub fn max_relative_error(case: &Case, rng: &mut Rng) -> f64 {
    let forward = |inputs: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (case.build)(&mut tape, &vars)?;
        let loss = match proj {
            Some(r) => {
                let r = tape.constant(r.clone());
                let m = tape.mul(out, r)?;
                tape.sum(m)?
            }
            None => out,
        };
        Ok((tape, vars, loss))
    };
    let (tape, _, out) = forward(&case.inputs, None).unwrap();
    let proj = uniform(rng, tape.value(out).shape(), -1.0, 1.0);
    let (tape, vars, loss) = forward(&case.inputs, Some(&proj)).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, &case.inputs[i]);
        let numeric = finite_difference_gradient(
            |x| {
                let mut inputs = case.inputs.clone();
                inputs[i] = x.clone();
                let (t, _, l) = forward(&inputs, Some(&proj))?;
                t.value(l).item()
            },
            &case.inputs[i],
            STEP,
        )
        .unwrap();
        let diff = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .data()
            .iter()
            .chain(numeric.data())
            .map(|v| v.abs())
            .fold(1e-8, f64::max);
        worst = worst.max(diff / scale);
    }
    worst
}


fn unary(rng: &mut Rng, gen: impl Fn(&mut Rng, &[usize]) -> Tensor<f64>, build: Build) -> Case {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5)];
    Case {
        inputs: vec![gen(rng, &shape)],
        build,
    }
}

fn any(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -2.0, 2.0)
}

pub fn dense(rng: &mut Rng) -> Case {
    let (n, i, o) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 5));
    Case {
        inputs: vec![any(rng, &[n, i]), any(rng, &[o, i]), any(rng, &[o])],
        build: Box::new(|t, v| t.dense(v[0], v[1], v[2])),
    }
}

pub fn conv2d(rng: &mut Rng) -> Case {
    let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let k = [1, 3][rng.random_range(0..2)];
    let pad = rng.random_range(0..=k / 2);
    let (h, w) = (dim(rng, k.max(2), 6), dim(rng, k.max(2), 6));
    Case {
        inputs: vec![any(rng, &[n, c, h, w]), any(rng, &[o, c, k, k]), any(rng, &[o])],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], pad)),
    }
}

pub fn transposed_conv2d(rng: &mut Rng) -> Case {
    let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let (k, pad) = [(2, 0), (4, 1), (3, 1)][rng.random_range(0..3)];
    let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
    Case {
        inputs: vec![any(rng, &[n, c, h, w]), any(rng, &[c, o, k, k]), any(rng, &[o])],
        build: Box::new(move |t, v| t.transposed_conv2d(v[0], v[1], v[2], 2, pad)),
    }
}

pub fn conv3d(rng: &mut Rng) -> Case {
    let (c, o) = (dim(rng, 1, 2), dim(rng, 1, 2));
    let k = [1, 3][rng.random_range(0..2)];
    let pad = k / 2;
    let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    Case {
        inputs: vec![any(rng, &[1, c, s[0], s[1], s[2]]), any(rng, &[o, c, k, k, k]), any(rng, &[o])],
        build: Box::new(move |t, v| t.conv3d(v[0], v[1], v[2], pad)),
    }
}

pub fn relu(rng: &mut Rng) -> Case {
    unary(rng, away_from_zero, Box::new(|t, v| t.relu(v[0])))
}

pub fn leaky_relu(rng: &mut Rng) -> Case {
    let slope = rng.random_range(0.01..0.3);
    unary(rng, away_from_zero, Box::new(move |t, v| t.leaky_relu(v[0], slope)))
}

pub fn abs(rng: &mut Rng) -> Case {
    unary(rng, away_from_zero, Box::new(|t, v| t.abs(v[0])))
}

pub fn maxpool2x2(rng: &mut Rng) -> Case {
    let (h, w) = (2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3));
    let shape = [dim(rng, 1, 2), dim(rng, 1, 2), h, w];
    // A random permutation scaled by 0.01 keeps every window's maximum
    // unique by more than the difference step.
    let n: usize = shape.iter().product();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    Case {
        inputs: vec![Tensor::new(shape.to_vec(), perm.iter().map(|&p| p as f64 * 0.01).collect()).unwrap()],
        build: Box::new(|t, v| t.maxpool2x2(v[0])),
    }
}

pub fn avg_pool(rng: &mut Rng) -> Case {
    let win = dim(rng, 1, 3);
    let shape = [dim(rng, 1, 2), dim(rng, 1, 2), win * dim(rng, 1, 3), win * dim(rng, 1, 3)];
    Case {
        inputs: vec![any(rng, &shape)],
        build: Box::new(move |t, v| t.avg_pool(v[0], win)),
    }
}

pub fn global_avg_pool(rng: &mut Rng) -> Case {
    let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 5)];
    Case {
        inputs: vec![any(rng, &shape)],
        build: Box::new(|t, v| t.global_avg_pool(v[0])),
    }
}

pub fn bilinear_upsample2x(rng: &mut Rng) -> Case {
    let shape = [dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 5), dim(rng, 1, 5)];
    Case {
        inputs: vec![any(rng, &shape)],
        build: Box::new(|t, v| t.upsample2x(v[0])),
    }
}

pub fn trilinear_upsample2x(rng: &mut Rng) -> Case {
    let shape = [1, dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    Case {
        inputs: vec![any(rng, &shape)],
        build: Box::new(|t, v| t.upsample3d_2x(v[0])),
    }
}

pub fn concat_channels(rng: &mut Rng) -> Case {
    let (n, h, w) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4));
    let k = dim(rng, 1, 3);
    Case {
        inputs: (0..k)
            .map(|_| {
                let c = dim(rng, 1, 3);
                any(rng, &[n, c, h, w])
            })
            .collect(),
        build: Box::new(|t, v| t.concat_channels(v)),
    }
}

fn binary(rng: &mut Rng, build: Build) -> Case {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5)];
    Case {
        inputs: vec![any(rng, &shape), any(rng, &shape)],
        build,
    }
}

pub fn add(rng: &mut Rng) -> Case {
    binary(rng, Box::new(|t, v| t.add(v[0], v[1])))
}

pub fn mul(rng: &mut Rng) -> Case {
    binary(rng, Box::new(|t, v| t.mul(v[0], v[1])))
}

pub fn sub(rng: &mut Rng) -> Case {
    binary(rng, Box::new(|t, v| t.sub(v[0], v[1])))
}

pub fn scalar_mul(rng: &mut Rng) -> Case {
    let s = rng.random_range(-3.0..3.0);
    unary(rng, any, Box::new(move |t, v| t.scale(v[0], s)))
}

pub fn sum(rng: &mut Rng) -> Case {
    unary(rng, any, Box::new(|t, v| t.sum(v[0])))
}

pub fn mean(rng: &mut Rng) -> Case {
    unary(rng, any, Box::new(|t, v| t.mean(v[0])))
}

pub fn log(rng: &mut Rng) -> Case {
    unary(rng, |r, s| uniform(r, s, 0.2, 3.0), Box::new(|t, v| t.log(v[0])))
}

pub fn exp(rng: &mut Rng) -> Case {
    unary(rng, any, Box::new(|t, v| t.exp(v[0])))
}

pub fn softmax(rng: &mut Rng) -> Case {
    unary(rng, any, Box::new(|t, v| t.softmax(v[0])))
}

pub fn sigmoid(rng: &mut Rng) -> Case {
    unary(rng, any, Box::new(|t, v| t.sigmoid(v[0])))
}

pub fn softplus(rng: &mut Rng) -> Case {
    unary(rng, any, Box::new(|t, v| t.softplus(v[0])))
}

pub fn reshape(rng: &mut Rng) -> Case {
    let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
    Case {
        inputs: vec![any(rng, &[a, b, 2])],
        build: Box::new(move |t, v| t.reshape(v[0], [2 * b, a])),
    }
}

pub fn select_columns(rng: &mut Rng) -> Case {
    let (n, k) = (dim(rng, 1, 5), dim(rng, 1, 4));
    let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    Case {
        inputs: vec![any(rng, &[n, k])],
        build: Box::new(move |t, v| t.select_columns(v[0], cols.clone())),
    }
}

pub fn softmax_cross_entropy(rng: &mut Rng) -> Case {
    let (n, k) = (dim(rng, 1, 5), dim(rng, 2, 4));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    Case {
        inputs: vec![any(rng, &[n, k])],
        build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], labels.clone())),
    }
}

pub fn two_layer_network(rng: &mut Rng) -> Case {
    let (n, i, h, o) = (dim(rng, 1, 4), dim(rng, 2, 6), dim(rng, 2, 6), dim(rng, 2, 4));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..o)).collect();
    Case {
        inputs: vec![
            any(rng, &[n, i]),
            any(rng, &[h, i]),
            any(rng, &[h]),
            any(rng, &[o, h]),
            any(rng, &[o]),
        ],
        build: Box::new(move |t, v| {
            let a = t.dense(v[0], v[1], v[2])?;
            let a = t.sigmoid(a)?;
            let y = t.dense(a, v[3], v[4])?;
            t.softmax_cross_entropy(y, labels.clone())
        }),
    }
}

pub type Make = fn(&mut Rng) -> Case;

pub const CATALOGUE: &[(&str, Make)] = &[
    ("dense", dense),
    ("conv2d", conv2d),
    ("transposed_conv2d", transposed_conv2d),
    ("conv3d", conv3d),
    ("relu", relu),
    ("leaky_relu", leaky_relu),
    ("abs", abs),
    ("maxpool2x2", maxpool2x2),
    ("avg_pool", avg_pool),
    ("global_avg_pool", global_avg_pool),
    ("bilinear_upsample2x", bilinear_upsample2x),
    ("trilinear_upsample2x", trilinear_upsample2x),
    ("concat_channels", concat_channels),
    ("add", add),
    ("mul", mul),
    ("sub", sub),
    ("scalar_mul", scalar_mul),
    ("sum", sum),
    ("mean", mean),
    ("log", log),
    ("exp", exp),
    ("softmax", softmax),
    ("sigmoid", sigmoid),
    ("softplus", softplus),
    ("reshape", reshape),
    ("select_columns", select_columns),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("two_layer_network", two_layer_network),
];

/// Worst relative error over `TRIALS` random instances of one op.
pub fn worst_error(name: &str, make: Make) -> f64 {
    let seed = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = rng::stream(20_240_611, seed);
    (0..TRIALS)
        .map(|_| {
            let case = make(&mut rng);
            max_relative_error(&case, &mut rng)
        })
        .fold(0.0, f64::max)
}
