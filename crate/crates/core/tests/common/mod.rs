//! Reference implementations the library is checked against. Nothing here
//! calls into the code under test except to build graphs.
#![allow(dead_code)]

pub mod cases;

use maskgan::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], scale: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Central finite differences

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Perturbation applied to each element.
    pub step: f32,
    /// Magnitude below which gradients are compared absolutely.
    pub floor: f64,
    pub tol: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-2, floor: 1e-2, tol: 1e-2 }
    }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Elements whose perturbation straddles a kink (one-sided slopes disagree).
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.failures.extend(other.failures);
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Multiples of the base step tried in order.
pub const STEP_SCALES: [f32; 3] = [1.0, 0.5, 2.0];

/// Builds a forward graph over `state`. Returns the vars standing for each
/// slot of `slots(state)` (in order) and the output.
pub type Forward<S> = dyn Fn(&S, &mut Graph, bool) -> (Vec<Var>, Var);

/// Scalar loss evaluated in f64 from the graph's output. Non-scalar outputs
/// are reduced as `mean((y - c)^2)` with a fixed random `c`.
fn oracle_loss(g: &Graph, y: Var, target: Option<&Tensor>) -> f64 {
    let v = g.value(y);
    match target {
        None => v.item() as f64,
        Some(c) => {
            let s: f64 = v.data().iter().zip(c.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            s / v.len() as f64
        }
    }
}

/// Compares reverse-mode gradients of every element of every slot against
/// central differences of an independently evaluated loss.
pub fn gradcheck<S>(
    state: &mut S,
    slots: fn(&mut S) -> Vec<&mut Tensor>,
    forward: &Forward<S>,
    opts: FdOptions,
    seed: u64,
) -> FdReport {
    let mut g = Graph::new();
    let (vars, y) = forward(state, &mut g, true);
    let target = (g.value(y).len() != 1).then(|| {
        let shape = g.value(y).shape().to_vec();
        randn(&shape, 1.0, &mut rng(seed ^ 0x5eed))
    });
    let loss = match &target {
        None => y,
        Some(c) => {
            let c = g.constant(c.clone());
            g.mse(y, c).unwrap()
        }
    };
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |state: &S| {
        let mut g = Graph::new();
        let (_, y) = forward(state, &mut g, false);
        oracle_loss(&g, y, target.as_ref())
    };
    let center = eval(state);

    let mut report = FdReport::default();
    let n_slots = analytic.len();
    for slot in 0..n_slots {
        let len = slots(state)[slot].len();
        for i in 0..len {
            let orig = slots(state)[slot].data()[i];
            let mut probe = |delta: f32| {
                let x = orig + delta;
                slots(state)[slot].data_mut()[i] = x;
                let f = eval(state);
                slots(state)[slot].data_mut()[i] = orig;
                (f, x as f64 - orig as f64)
            };
            let a = analytic[slot][i] as f64;
            // Step selection: try each step until one agrees. Kinks and f32
            // round-off shift with the step; a wrong gradient fails at all of them.
            let mut err = f64::INFINITY;
            let mut numeric = f64::NAN;
            let mut sides = (0.0, 0.0);
            for (k, &scale) in STEP_SCALES.iter().enumerate() {
                let (fp, hp) = probe(opts.step * scale);
                let (fm, hm) = probe(-opts.step * scale);
                let n = (fp - fm) / (hp - hm);
                if k == 0 {
                    sides = ((fp - center) / hp, (center - fm) / -hm);
                }
                let e = rel_err(a, n, opts.floor);
                if e < err {
                    (err, numeric) = (e, n);
                }
                if err < opts.tol {
                    break;
                }
            }
            if err >= opts.tol {
                if rel_err(sides.0, sides.1, opts.floor) >= opts.tol {
                    report.skipped += 1;
                    continue;
                }
                report.failures.push(format!(
                    "slot {slot} elem {i}: analytic {a:.6e} numeric {numeric:.6e} rel {err:.3e}"
                ));
            }
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("slot {slot} elem {i}: analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    report
}

/// Gradcheck over plain tensors: slot `i` is `leaf(inputs[i])`.
pub fn gradcheck_op(
    inputs: Vec<Tensor>,
    op: impl Fn(&mut Graph, &[Var]) -> Var + 'static,
    opts: FdOptions,
    seed: u64,
) -> FdReport {
    let mut state = inputs;
    let forward = move |s: &Vec<Tensor>, g: &mut Graph, grad: bool| {
        let vars: Vec<Var> = s
            .iter()
            .map(|t| if grad { g.leaf(t.clone().with_grad()) } else { g.constant(t.clone()) })
            .collect();
        let y = op(g, &vars);
        (vars, y)
    };
    gradcheck(&mut state, |s| s.iter_mut().collect(), &forward, opts, seed)
}

// ---------------------------------------------------------------------------
// Convolution by definition

/// `y[n,co,oy,ox] = b[co] + sum_{ci,ky,kx} x[n,ci,oy*s+ky-p, ox*s+kx-p] * w[co,ci,ky,kx]`,
/// skipping taps that fall in the zero padding. Accumulates in f64.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let xi = |b: usize, c: usize, y: usize, x_: usize| x.data()[((b * cin + c) * h + y) * wd + x_] as f64;
    let wi = |o: usize, c: usize, ky: usize, kx: usize| w.data()[((o * cin + c) * k + ky) * k + kx] as f64;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co] as f64;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xi(bn, ci, iy as usize, ix as usize) * wi(co, ci, ky, kx);
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// Scatter form: every input pixel adds `x[n,ci,iy,ix] * w[ci,co,ky,kx]` to
/// output `(iy*s+ky-p, ix*s+kx-p)` when that lies inside the cropped output.
pub fn conv_transpose2d_reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut acc = vec![0.0f64; n * cout * oh * ow];
    for bn in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data()[((bn * cin + ci) * h + iy) * wd + ix] as f64;
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wv = w.data()[((ci * cout + co) * k + ky) * k + kx] as f64;
                                acc[((bn * cout + co) * oh + oy as usize) * ow + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    let plane = oh * ow;
    let out = acc
        .iter()
        .enumerate()
        .map(|(i, v)| (v + b.data()[(i / plane) % cout] as f64) as f32)
        .collect();
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

// ---------------------------------------------------------------------------
// Mask metrics by pixel counting

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn count(pred: &[bool], truth: &[bool]) -> Counts {
    let mut c = Counts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn iou_ref(c: Counts) -> f64 {
    let union = c.tp + c.fp + c.fn_;
    if union == 0 { 1.0 } else { c.tp as f64 / union as f64 }
}

pub fn dice_ref(c: Counts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 { 1.0 } else { (2 * c.tp) as f64 / denom as f64 }
}

pub fn accuracy_ref(c: Counts) -> f64 {
    (c.tp + c.tn) as f64 / (c.tp + c.fp + c.fn_ + c.tn) as f64
}

/// Largest absolute deviation between `a` and `b`.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Default)]
pub struct ConvSweep {
    pub cases: usize,
    pub max_err_conv: f64,
    pub max_err_transpose: f64,
    /// Hyper-parameter combinations where the library and the reference
    /// disagree about validity.
    pub validity_mismatches: Vec<String>,
}

/// Every `k in 1..=5`, `stride in 1..=3`, `pad in 0..=2` and input
/// `h, w in 1..=max_size`, against the nested-loop references.
pub fn conv_sweep(max_size: usize) -> ConvSweep {
    let mut out = ConvSweep::default();
    let r = &mut rng(17);
    for k in 1..=5 {
        for stride in 1..=3 {
            for pad in 0..=2 {
                for h in 1..=max_size {
                    for w in 1..=max_size {
                        let x = uniform(&[2, 2, h, w], -1.0, 1.0, r);
                        let b = uniform(&[3], -1.0, 1.0, r);

                        let wc = uniform(&[3, 2, k, k], -1.0, 1.0, r);
                        let fits = h + 2 * pad >= k && w + 2 * pad >= k;
                        let mut g = Graph::new();
                        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wc.clone()), g.constant(b.clone()));
                        match (g.conv2d(xv, wv, bv, stride, pad), fits) {
                            (Ok(y), true) => {
                                let e = max_abs_diff(g.value(y), &conv2d_reference(&x, &wc, &b, stride, pad));
                                out.max_err_conv = out.max_err_conv.max(e);
                            }
                            (Err(_), false) => {}
                            (res, _) => out.validity_mismatches.push(format!(
                                "conv2d k{k} s{stride} p{pad} {h}x{w}: library ok={}",
                                res.is_ok()
                            )),
                        }

                        let wt = uniform(&[2, 3, k, k], -1.0, 1.0, r);
                        let fits = (h - 1) * stride + k > 2 * pad && (w - 1) * stride + k > 2 * pad;
                        let mut g = Graph::new();
                        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
                        match (g.conv_transpose2d(xv, wv, bv, stride, pad), fits) {
                            (Ok(y), true) => {
                                let e = max_abs_diff(
                                    g.value(y),
                                    &conv_transpose2d_reference(&x, &wt, &b, stride, pad),
                                );
                                out.max_err_transpose = out.max_err_transpose.max(e);
                            }
                            (Err(_), false) => {}
                            (res, _) => out.validity_mismatches.push(format!(
                                "conv_transpose2d k{k} s{stride} p{pad} {h}x{w}: library ok={}",
                                res.is_ok()
                            )),
                        }
                        out.cases += 1;
                    }
                }
            }
        }
    }
    out
}
