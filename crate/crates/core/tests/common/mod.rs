//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use pathonet::annotation::{CellAnnotation, CellClass};
use pathonet::evaluate::ClassTally;
use pathonet::grid::Grid;
use pathonet::tensor::{ConvSpec, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct evaluation of the dilated convolution sum.
pub fn conv_oracle(x: &Tensor<f64>, spec: &ConvSpec, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let (k, d, s, p) = (spec.kernel_size, spec.dilation, spec.stride, spec.padding as isize);
    let oh = (h + 2 * spec.padding - d * (k - 1) - 1) / s + 1;
    let ow = (wd + 2 * spec.padding - d * (k - 1) - 1) / s + 1;
    let co = spec.out_channels;
    let mut out = vec![0.0; n * co * oh * ow];
    for bi in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let iy = (y * s + u * d) as isize - p;
                                let ix = (xo * s + v * d) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * k + u) * k + v];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Nearest-background distance by exhaustive scan.
pub fn distance_oracle(mask: &Grid<u8>) -> Grid<f64> {
    let bg: Vec<(usize, usize)> = (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y) == 0)
        .collect();
    Grid::from_fn(mask.width(), mask.height(), |x, y| {
        if mask.get(x, y) == 0 {
            return 0.0;
        }
        bg.iter()
            .map(|&(bx, by)| ((bx as f64 - x as f64).powi(2) + (by as f64 - y as f64).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    })
}

/// Greedy matching by repeated global-minimum search: among all still
/// unmatched same-class pairs closer than `radius`, take the one with the
/// smallest (distance, gt index, pred index); repeat until none is left.
pub fn matching_oracle(gt: &[CellAnnotation], pred: &[CellAnnotation], radius: f64) -> [ClassTally; 3] {
    let mut out = [ClassTally::default(); 3];
    for class in CellClass::ALL {
        let mut gt_free: Vec<bool> = gt.iter().map(|c| c.class == class).collect();
        let mut pred_free: Vec<bool> = pred.iter().map(|c| c.class == class).collect();
        let n_gt = gt_free.iter().filter(|f| **f).count() as u64;
        let n_pred = pred_free.iter().filter(|f| **f).count() as u64;
        let mut tp = 0;
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for (i, g) in gt.iter().enumerate() {
                if !gt_free[i] {
                    continue;
                }
                for (j, p) in pred.iter().enumerate() {
                    if !pred_free[j] {
                        continue;
                    }
                    let d = ((g.x as f64 - p.x as f64).powi(2) + (g.y as f64 - p.y as f64).powi(2)).sqrt();
                    if d >= radius {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bi, bj)) => (d, i, j) < (bd, bi, bj),
                    };
                    if better {
                        best = Some((d, i, j));
                    }
                }
            }
            match best {
                Some((_, i, j)) => {
                    gt_free[i] = false;
                    pred_free[j] = false;
                    tp += 1;
                }
                None => break,
            }
        }
        out[class.channel()] = ClassTally::new(tp, n_pred - tp, n_gt - tp);
    }
    out
}

/// A differentiable computation under test: builds a scalar loss from
/// parameter tensors, returning the graph, the parameter leaves and the loss.
pub type Builder = Box<dyn Fn(&[Tensor<f64>]) -> (Graph<f64>, Vec<Var>, Var)>;

pub struct GradCase {
    pub name: String,
    pub params: Vec<Tensor<f64>>,
    pub build: Builder,
}

pub enum Outcome {
    /// Largest relative error over the probed coordinates.
    Checked(f64),
    /// A perturbation crossed a ReLU or pooling branch; the case is void.
    Kink,
}

pub const FD_STEP: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central differences at `coords` random coordinates against the
/// analytic gradient.
pub fn check_gradients(case: &GradCase, rng: &mut ChaCha8Rng, coords: usize) -> Outcome {
    let (g, vars, loss) = (case.build)(&case.params);
    let base_sig = g.branch_signature();
    let mut grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take(v).unwrap()).collect();
    drop(g);

    let total: usize = case.params.iter().map(Tensor::len).sum();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= case.params[t].len() {
            flat -= case.params[t].len();
            t += 1;
        }
        let eval = |delta: f64| {
            let mut p = case.params.clone();
            p[t].data_mut()[flat] += delta;
            let (g, _, loss) = (case.build)(&p);
            (g.value(loss).data()[0], g.branch_signature())
        };
        let (plus, s1) = eval(FD_STEP);
        let (minus, s2) = eval(-FD_STEP);
        if s1 != base_sig || s2 != base_sig {
            return Outcome::Kink;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[t].data()[flat], numeric));
    }
    Outcome::Checked(worst)
}

/// Result of a run of seeded cases, resampling those that hit a kink.
pub struct SuiteReport {
    pub checked: usize,
    pub resampled: usize,
    pub worst: f64,
    pub worst_case: String,
}

pub fn run_suite(cases: usize, seed: u64, coords: usize, mut make: impl FnMut(&mut ChaCha8Rng) -> GradCase) -> SuiteReport {
    let mut r = rng(seed);
    let mut report = SuiteReport {
        checked: 0,
        resampled: 0,
        worst: 0.0,
        worst_case: String::new(),
    };
    while report.checked < cases {
        let case = make(&mut r);
        match check_gradients(&case, &mut r, coords) {
            Outcome::Checked(e) => {
                report.checked += 1;
                if e >= report.worst {
                    report.worst = e;
                    report.worst_case = case.name;
                }
            }
            Outcome::Kink => {
                report.resampled += 1;
                assert!(report.resampled < 10 * cases, "too many kink crossings");
            }
        }
    }
    report
}

fn mse_loss(g: &mut Graph<f64>, out: Var, rng_seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let target = random_tensor(&mut rng(rng_seed), &shape);
    let t = g.constant(target);
    g.mse(out, t).unwrap()
}

/// Random geometry for every differentiable operator.
pub fn operator_case(op: &str, r: &mut ChaCha8Rng) -> GradCase {
    let target_seed: u64 = r.random();
    let n = r.random_range(1..=2);
    match op {
        "conv2d" => {
            let k: usize = [1, 3, 5][r.random_range(0..3)];
            let d: usize = r.random_range(1..=4);
            let stride = r.random_range(1..=2);
            let padding = r.random_range(0..=d * (k - 1) / 2 + 1);
            let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
            let span = d * (k - 1) + 1;
            let min = span.saturating_sub(2 * padding).max(1);
            let (h, w) = (r.random_range(min..=min + 6), r.random_range(min..=min + 6));
            let has_bias = r.random_bool(0.5);
            let spec = ConvSpec {
                kernel_size: k,
                dilation: d,
                stride,
                padding,
                in_channels: cin,
                out_channels: cout,
                has_bias,
            };
            let mut params = vec![random_tensor(r, &[n, cin, h, w]), random_tensor(r, &spec.weight_shape())];
            if has_bias {
                params.push(random_tensor(r, &[cout]));
            }
            GradCase {
                name: format!("conv2d {spec:?} input {n}x{cin}x{h}x{w}"),
                params,
                build: Box::new(move |p| {
                    let mut g = Graph::new();
                    let v: Vec<Var> = p.iter().map(|t| g.param(t.clone())).collect();
                    let out = g.conv2d(v[0], v[1], v.get(2).copied(), spec).unwrap();
                    let loss = mse_loss(&mut g, out, target_seed);
                    (g, v, loss)
                }),
            }
        }
        "max_pool2" => {
            let (c, h, w) = (r.random_range(1..=3), 2 * r.random_range(1..=5), 2 * r.random_range(1..=5));
            GradCase {
                name: format!("max_pool2 {n}x{c}x{h}x{w}"),
                params: vec![random_tensor(r, &[n, c, h, w])],
                build: Box::new(move |p| {
                    let mut g = Graph::new();
                    let x = g.param(p[0].clone());
                    let out = g.max_pool2(x).unwrap();
                    let loss = mse_loss(&mut g, out, target_seed);
                    (g, vec![x], loss)
                }),
            }
        }
        "upsample2" => {
            let (cin, cout, h, w) = (
                r.random_range(1..=3),
                r.random_range(1..=3),
                r.random_range(1..=5),
                r.random_range(1..=5),
            );
            GradCase {
                name: format!("upsample2 {n}x{cin}x{h}x{w} -> {cout}"),
                params: vec![
                    random_tensor(r, &[n, cin, h, w]),
                    random_tensor(r, &[cin, cout, 2, 2]),
                    random_tensor(r, &[cout]),
                ],
                build: Box::new(move |p| {
                    let mut g = Graph::new();
                    let v: Vec<Var> = p.iter().map(|t| g.param(t.clone())).collect();
                    let out = g.upsample2(v[0], v[1], Some(v[2])).unwrap();
                    let loss = mse_loss(&mut g, out, target_seed);
                    (g, v, loss)
                }),
            }
        }
        "relu" | "add" | "dup_channels" | "scale" | "mse" => {
            let shape = [n, r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=6)];
            let op = op.to_string();
            let two = op == "add" || op == "mse";
            let mut params = vec![random_tensor(r, &shape)];
            if two {
                params.push(random_tensor(r, &shape));
            }
            GradCase {
                name: format!("{op} {shape:?}"),
                params,
                build: Box::new(move |p| {
                    let mut g = Graph::new();
                    let v: Vec<Var> = p.iter().map(|t| g.param(t.clone())).collect();
                    let loss = match op.as_str() {
                        "relu" => {
                            let out = g.relu(v[0]);
                            mse_loss(&mut g, out, target_seed)
                        }
                        "add" => {
                            let out = g.add(v[0], v[1]).unwrap();
                            mse_loss(&mut g, out, target_seed)
                        }
                        "dup_channels" => {
                            let out = g.dup_channels(v[0]).unwrap();
                            mse_loss(&mut g, out, target_seed)
                        }
                        "scale" => {
                            let out = g.scale(v[0], -1.75).unwrap();
                            mse_loss(&mut g, out, target_seed)
                        }
                        _ => g.mse(v[0], v[1]).unwrap(),
                    };
                    (g, v, loss)
                }),
            }
        }
        other => panic!("unknown operator {other}"),
    }
}

pub const OPERATORS: [&str; 8] = [
    "conv2d",
    "max_pool2",
    "upsample2",
    "relu",
    "add",
    "dup_channels",
    "scale",
    "mse",
];

/// Full network at widths `[2, 4, 8, 16]` on a 16×16 input, every
/// parameter drawn at random so biases are away from zero.
pub fn pathonet_case(r: &mut ChaCha8Rng) -> GradCase {
    use pathonet::model::{forward_graph, ArchDescriptor, ModelParams};
    let desc = ArchDescriptor::from_base(2).unwrap();
    let template = ModelParams::<f64>::zeros(desc.clone());
    let params: Vec<Tensor<f64>> = template
        .tensors
        .iter()
        .map(|t| {
            let fan = t.shape().iter().skip(1).product::<usize>().max(1) as f64;
            let mut t = random_tensor(r, t.shape());
            t.data_mut().iter_mut().for_each(|v| *v *= (6.0 / fan).sqrt());
            t
        })
        .collect();
    let image = {
        let mut t = random_tensor(r, &[1, 3, 16, 16]);
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
        t
    };
    let target_seed: u64 = r.random();
    let names = template.names.clone();
    GradCase {
        name: "pathonet widths [2,4,8,16] on 16x16".into(),
        params,
        build: Box::new(move |p| {
            let mp = ModelParams {
                descriptor: desc.clone(),
                names: names.clone(),
                tensors: p.to_vec(),
            };
            let mut g = Graph::new();
            let (vars, out) = forward_graph(&mp, &mut g, &image).unwrap();
            let loss = mse_loss(&mut g, out, target_seed);
            (g, vars, loss)
        }),
    }
}
