//! Independent reference implementations used as test oracles.
//!
//! Everything here is written as plainly as possible: nested loops, no
//! im2col, no GEMM, no shared code with the library kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rootseg::autodiff::{Graph, LossConfig, Tensor};
use rootseg::net::{layer_table, LayerKind, NetConfig, Network};

pub type Shape4 = [usize; 4];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn at(s: Shape4, c: usize, z: usize, y: usize, x: usize) -> usize {
    ((c * s[1] + z) * s[2] + y) * s[3] + x
}

/// Valid cross-correlation, weight `(O, C, k, k, k)`.
pub fn conv3d(x: &[f64], xs: Shape4, w: &[f64], o: usize, k: usize, b: &[f64]) -> (Vec<f64>, Shape4) {
    let ys = [o, xs[1] + 1 - k, xs[2] + 1 - k, xs[3] + 1 - k];
    let mut y = vec![0.0; ys.iter().product()];
    for oc in 0..o {
        for z in 0..ys[1] {
            for yy in 0..ys[2] {
                for xx in 0..ys[3] {
                    let mut acc = b[oc];
                    for c in 0..xs[0] {
                        for a in 0..k {
                            for bb in 0..k {
                                for e in 0..k {
                                    acc += w[(((oc * xs[0] + c) * k + a) * k + bb) * k + e] * x[at(xs, c, z + a, yy + bb, xx + e)];
                                }
                            }
                        }
                    }
                    y[at(ys, oc, z, yy, xx)] = acc;
                }
            }
        }
    }
    (y, ys)
}

/// Stride-2 kernel-2 transposed convolution by scattering, weight `(C, O, 2, 2, 2)`.
pub fn conv_transpose_x2(x: &[f64], xs: Shape4, w: &[f64], o: usize, b: &[f64]) -> (Vec<f64>, Shape4) {
    let ys = [o, 2 * xs[1], 2 * xs[2], 2 * xs[3]];
    let mut y = vec![0.0; ys.iter().product()];
    for oc in 0..o {
        for z in 0..ys[1] {
            for yy in 0..ys[2] {
                for xx in 0..ys[3] {
                    y[at(ys, oc, z, yy, xx)] = b[oc];
                }
            }
        }
    }
    for c in 0..xs[0] {
        for z in 0..xs[1] {
            for yy in 0..xs[2] {
                for xx in 0..xs[3] {
                    let v = x[at(xs, c, z, yy, xx)];
                    for oc in 0..o {
                        for a in 0..2 {
                            for bb in 0..2 {
                                for e in 0..2 {
                                    y[at(ys, oc, 2 * z + a, 2 * yy + bb, 2 * xx + e)] +=
                                        v * w[(((c * o + oc) * 2 + a) * 2 + bb) * 2 + e];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, ys)
}

/// Blockwise 2x2x2 maximum. With `frozen`, the winners are taken from it
/// instead of being searched; the chosen flat indices are always returned.
pub fn maxpool(x: &[f64], xs: Shape4, frozen: Option<&[usize]>) -> (Vec<f64>, Shape4, Vec<usize>) {
    let ys = [xs[0], xs[1] / 2, xs[2] / 2, xs[3] / 2];
    let n: usize = ys.iter().product();
    let mut y = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..ys[0] {
        for z in 0..ys[1] {
            for yy in 0..ys[2] {
                for xx in 0..ys[3] {
                    let i = match frozen {
                        Some(f) => f[y.len()],
                        None => {
                            let mut best = at(xs, c, 2 * z, 2 * yy, 2 * xx);
                            for a in 0..2 {
                                for bb in 0..2 {
                                    for e in 0..2 {
                                        let j = at(xs, c, 2 * z + a, 2 * yy + bb, 2 * xx + e);
                                        if x[j] > x[best] {
                                            best = j;
                                        }
                                    }
                                }
                            }
                            best
                        }
                    };
                    y.push(x[i]);
                    arg.push(i);
                }
            }
        }
    }
    (y, ys, arg)
}

pub fn blockwise_mean(x: &[f64], xs: Shape4) -> Vec<f64> {
    let ys = [xs[0], xs[1] / 2, xs[2] / 2, xs[3] / 2];
    let mut y = vec![0.0; ys.iter().product()];
    for c in 0..ys[0] {
        for z in 0..ys[1] {
            for yy in 0..ys[2] {
                for xx in 0..ys[3] {
                    let mut s = 0.0;
                    for a in 0..2 {
                        for bb in 0..2 {
                            for e in 0..2 {
                                s += x[at(xs, c, 2 * z + a, 2 * yy + bb, 2 * xx + e)];
                            }
                        }
                    }
                    y[at(ys, c, z, yy, xx)] = s / 8.0;
                }
            }
        }
    }
    y
}

/// Center-crops both inputs to the smaller extent and stacks channels, `a` first.
pub fn crop_concat(a: &[f64], sa: Shape4, b: &[f64], sb: Shape4) -> (Vec<f64>, Shape4) {
    let e = [sa[1].min(sb[1]), sa[2].min(sb[2]), sa[3].min(sb[3])];
    let ys = [sa[0] + sb[0], e[0], e[1], e[2]];
    let mut y = vec![0.0; ys.iter().product()];
    for (src, ss, c0) in [(a, sa, 0), (b, sb, sa[0])] {
        let o = [(ss[1] - e[0]) / 2, (ss[2] - e[1]) / 2, (ss[3] - e[2]) / 2];
        for c in 0..ss[0] {
            for z in 0..e[0] {
                for yy in 0..e[1] {
                    for xx in 0..e[2] {
                        y[at(ys, c0 + c, z, yy, xx)] = src[at(ss, c, z + o[0], yy + o[1], xx + o[2])];
                    }
                }
            }
        }
    }
    (y, ys)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain weighted BCE over cared voxels, divided by the cared count.
pub fn bce(p: &[f64], y: &[u8], dc: Option<&[u8]>, root_weight: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..p.len() {
        if dc.is_some_and(|d| d[i] != 0) {
            continue;
        }
        n += 1;
        let pc = p[i].clamp(1e-7, 1.0 - 1e-7);
        sum -= if y[i] != 0 { root_weight * pc.ln() } else { (1.0 - pc).ln() };
    }
    sum / n as f64
}

/// ReLU on/off masks and max-pool winners of one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pattern {
    pub relu: Vec<Vec<bool>>,
    pub pool: Vec<Vec<usize>>,
}

/// The U-Net forward pass rebuilt from the layer table with the reference
/// kernels. With `frozen`, every ReLU and max-pool follows the recorded
/// pattern, which turns the network into the smooth piece containing the
/// point where the pattern was recorded.
pub fn reference_forward(cfg: &NetConfig, params: &[Vec<f64>], input: &[f64], s: usize, frozen: Option<&Pattern>) -> (Vec<f64>, Pattern) {
    let layers = layer_table(cfg);
    let mut pattern = Pattern::default();
    let mut layer = 0usize;
    let mut apply = |x: &[f64], xs: Shape4| -> (Vec<f64>, Shape4) {
        let spec = &layers[layer];
        let (w, b) = (&params[2 * layer], &params[2 * layer + 1]);
        layer += 1;
        assert_eq!(spec.in_channels, xs[0], "{}", spec.name);
        match spec.kind {
            LayerKind::Conv(k) => conv3d(x, xs, w, spec.out_channels, k, b),
            LayerKind::UpConv => conv_transpose_x2(x, xs, w, spec.out_channels, b),
        }
    };
    let relu = |v: Vec<f64>, pattern: &mut Pattern| -> Vec<f64> {
        let idx = pattern.relu.len();
        let mask: Vec<bool> = match frozen {
            Some(f) => f.relu[idx].clone(),
            None => v.iter().map(|&t| t > 0.0).collect(),
        };
        let out = v.iter().zip(&mask).map(|(&t, &m)| if m { t } else { 0.0 }).collect();
        pattern.relu.push(mask);
        out
    };

    let xs0 = [1, s, s, s];
    let (mut x, mut xs) = (input.to_vec(), xs0);
    let mut skips = Vec::new();
    for level in 0..3 {
        for _ in 0..2 {
            let (y, ys) = apply(&x, xs);
            x = relu(y, &mut pattern);
            xs = ys;
        }
        if level < 2 {
            skips.push((x.clone(), xs));
            let idx = pattern.pool.len();
            let (y, ys, arg) = maxpool(&x, xs, frozen.map(|f| f.pool[idx].as_slice()));
            pattern.pool.push(arg);
            x = y;
            xs = ys;
        }
    }
    for (skip, ss) in skips.into_iter().rev() {
        let (up, us) = apply(&x, xs);
        (x, xs) = crop_concat(&up, us, &skip, ss);
        for _ in 0..2 {
            let (y, ys) = apply(&x, xs);
            x = relu(y, &mut pattern);
            xs = ys;
        }
    }
    let (up, us) = apply(&x, xs);
    let (iu, is) = apply(input, xs0);
    (x, xs) = crop_concat(&up, us, &iu, is);
    for _ in 0..2 {
        let (y, ys) = apply(&x, xs);
        x = relu(y, &mut pattern);
        xs = ys;
    }
    let (logits, _) = apply(&x, xs);
    (logits.into_iter().map(sigmoid).collect(), pattern)
}

/// Outcome of a finite-difference comparison over selected coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdStats {
    pub checked: usize,
    pub max_rel: f64,
}

impl FdStats {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
    }

    pub fn merge(&mut self, other: FdStats) {
        self.checked += other.checked;
        self.max_rel = self.max_rel.max(other.max_rel);
    }
}

/// Floor on the relative-error denominator, so that two numbers that are both
/// round-off sized do not count as a mismatch.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// A seeded full-network gradient problem at input size `s`.
pub struct NetProblem {
    pub net: Network<f64>,
    pub input: Vec<f64>,
    pub target: Vec<u8>,
    pub s: usize,
    pub loss: LossConfig,
}

impl NetProblem {
    pub fn new(seed: u64, base_channels: usize, s: usize) -> Self {
        let mut r = rng(seed);
        let mut net = Network::<f64>::build(NetConfig::with_base(base_channels), seed).unwrap();
        // Non-zero biases so their gradients are exercised away from the init point.
        let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
        for (name, t) in names.iter().zip(net.param_tensors_mut()) {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = r.random_range(-0.05..0.05);
                }
            }
        }
        let input = uniform(&mut r, s * s * s, 0.0, 1.0);
        let out = 2 * s - 84;
        let target = (0..out * out * out).map(|_| r.random_bool(0.3) as u8).collect();
        NetProblem { net, input, target, s, loss: LossConfig { root_weight: 3.0, ..LossConfig::default() } }
    }

    pub fn params(&self) -> Vec<Vec<f64>> {
        self.net.params().iter().map(|(_, t)| t.data().to_vec()).collect()
    }

    /// Loss and parameter gradients from the library graph.
    pub fn analytic(&self) -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars = self.net.attach(&mut g);
        let s = self.s;
        let x = g.constant(Tensor::new(vec![1, s, s, s], self.input.clone()).unwrap());
        let p = self.net.forward_graph(&mut g, &vars, x).unwrap();
        let l = g.weighted_masked_bce(p, &self.target, None, &self.loss).unwrap();
        let value = g.value(l).item();
        g.backward(l).unwrap();
        let grads = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        (value, grads)
    }

    pub fn reference_loss(&self, params: &[Vec<f64>], frozen: Option<&Pattern>) -> (f64, Pattern) {
        let (p, pattern) = reference_forward(self.net.config(), params, &self.input, self.s, frozen);
        (bce(&p, &self.target, None, self.loss.root_weight), pattern)
    }
}

/// Squared distance from every voxel to the nearest set voxel, by exhaustive search.
pub fn brute_edt(mask: &[bool], d: [usize; 3]) -> Vec<u64> {
    let sites: Vec<[i64; 3]> = coords(d).filter(|&(i, _)| mask[i]).map(|(_, c)| c).collect();
    coords(d)
        .map(|(_, c)| {
            sites
                .iter()
                .map(|s| (0..3).map(|a| ((s[a] - c[a]) * (s[a] - c[a])) as u64).sum::<u64>())
                .min()
                .unwrap_or(u64::MAX)
        })
        .collect()
}

pub fn coords(d: [usize; 3]) -> impl Iterator<Item = (usize, [i64; 3])> {
    (0..d[0] * d[1] * d[2]).map(move |i| (i, [(i / (d[1] * d[2])) as i64, ((i / d[2]) % d[1]) as i64, (i % d[2]) as i64]))
}

/// Precision/recall counts by comparing every pair of voxels.
/// Returns `(pred_count, gt_count, pred_matched, gt_matched)`.
pub fn brute_prf(pred: &[bool], gt: &[bool], dc: Option<&[bool]>, d: [usize; 3], tolerance: f64) -> (u64, u64, u64, u64) {
    let keep = |m: &[bool]| -> Vec<[i64; 3]> {
        coords(d).filter(|&(i, _)| m[i] && !dc.is_some_and(|dc| dc[i])).map(|(_, c)| c).collect()
    };
    let (p, g) = (keep(pred), keep(gt));
    let close = |a: &[i64; 3], b: &[i64; 3]| {
        let sq: i64 = (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum();
        (sq as f64) <= tolerance * tolerance
    };
    let pm = p.iter().filter(|a| g.iter().any(|b| close(a, b))).count();
    let gm = g.iter().filter(|a| p.iter().any(|b| close(a, b))).count();
    (p.len() as u64, g.len() as u64, pm as u64, gm as u64)
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(density)).collect()
}

/// Full-network gradient check for one seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct NetFdReport {
    /// Central differences of the network with its activation pattern held fixed.
    pub frozen: FdStats,
    /// Plain central differences, including steps that cross a ReLU or pooling kink.
    pub raw: FdStats,
    /// Plain central differences restricted to kink-free coordinates.
    pub smooth: FdStats,
    /// Coordinates whose `±h` step changed the activation pattern.
    pub kink_crossings: usize,
    /// Largest gap between the library and reference loss at the base point.
    pub forward_gap: f64,
}

/// Checks `per_tensor` random entries of every parameter tensor.
pub fn net_fd_check(seed: u64, base_channels: usize, s: usize, per_tensor: usize, h: f64) -> NetFdReport {
    let prob = NetProblem::new(seed, base_channels, s);
    let (value, grads) = prob.analytic();
    let mut params = prob.params();
    let (ref_value, pattern) = prob.reference_loss(&params, None);
    let mut report = NetFdReport { forward_gap: (value - ref_value).abs(), ..Default::default() };
    let mut r = rng(seed ^ 0x5eed);
    for t in 0..params.len() {
        for _ in 0..per_tensor {
            let j = r.random_range(0..params[t].len());
            let orig = params[t][j];
            let mut eval = |delta: f64, frozen: bool| -> (f64, bool) {
                params[t][j] = orig + delta;
                let (l, p) = prob.reference_loss(&params, frozen.then_some(&pattern));
                params[t][j] = orig;
                (l, p != pattern)
            };
            let (fp, _) = eval(h, true);
            let (fm, _) = eval(-h, true);
            report.frozen.record(grads[t][j], (fp - fm) / (2.0 * h));
            let (rp, cp) = eval(h, false);
            let (rm, cm) = eval(-h, false);
            report.raw.record(grads[t][j], (rp - rm) / (2.0 * h));
            if cp || cm {
                report.kink_crossings += 1;
            } else {
                report.smooth.record(grads[t][j], (rp - rm) / (2.0 * h));
            }
        }
    }
    report
}

/// Differentiable graph operations covered by the per-op gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Conv,
    ConvTranspose,
    MaxPool,
    ConcatCrop,
    Relu,
    Sigmoid,
    Bce,
}

impl GradOp {
    pub const ALL: [GradOp; 7] =
        [GradOp::Conv, GradOp::ConvTranspose, GradOp::MaxPool, GradOp::ConcatCrop, GradOp::Relu, GradOp::Sigmoid, GradOp::Bce];
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// Values spaced at least 0.009 apart in random order, so a `±1e-4` step
/// never changes which entry of a pooling block wins.
fn separated(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, r.random_range(0..=i));
    }
    ranks.into_iter().map(|k| (k as f64 - n as f64 / 2.0) * 0.01 + r.random_range(0.0..0.001)).collect()
}

/// Values at least 0.05 away from zero, so ReLU is smooth within `±1e-4`.
fn away_from_zero(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.05..1.0)).collect()
}

/// Analytic gradients of `op` on a random problem versus central
/// differences of the same graph, over every input entry. Each op feeds a
/// sigmoid and a weighted BCE so the objective is a scalar.
pub fn op_fd_check(op: GradOp, seed: u64, h: f64) -> FdStats {
    let mut r = rng(seed);
    let mut inputs: Vec<Tensor<f64>> = Vec::new();
    let mut push = |shape: Vec<usize>, data: Vec<f64>| inputs.push(Tensor::new(shape, data).unwrap());
    let sp = |r: &mut ChaCha8Rng, lo| [dim(r, lo, 6), dim(r, lo, 6), dim(r, lo, 6)];
    match op {
        GradOp::Conv => {
            let k = if r.random_bool(0.5) { 3 } else { 1 };
            let (c, o) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3));
            let s = sp(&mut r, k);
            push(vec![c, s[0], s[1], s[2]], uniform(&mut r, c * s.iter().product::<usize>(), -1.0, 1.0));
            push(vec![o, c, k, k, k], uniform(&mut r, o * c * k * k * k, -0.5, 0.5));
            push(vec![o], uniform(&mut r, o, -0.2, 0.2));
        }
        GradOp::ConvTranspose => {
            let (c, o) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3));
            let s = [dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3)];
            push(vec![c, s[0], s[1], s[2]], uniform(&mut r, c * s.iter().product::<usize>(), -1.0, 1.0));
            push(vec![c, o, 2, 2, 2], uniform(&mut r, c * o * 8, -0.5, 0.5));
            push(vec![o], uniform(&mut r, o, -0.2, 0.2));
        }
        GradOp::MaxPool => {
            let c = dim(&mut r, 1, 3);
            let s = [2 * dim(&mut r, 1, 3), 2 * dim(&mut r, 1, 3), 2 * dim(&mut r, 1, 3)];
            let n = c * s.iter().product::<usize>();
            push(vec![c, s[0], s[1], s[2]], separated(&mut r, n));
        }
        GradOp::ConcatCrop => {
            let e = [dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
            for _ in 0..2 {
                let c = dim(&mut r, 1, 2);
                let s: Vec<usize> = e.iter().map(|&x| x + 2 * r.random_range(0..=(6 - x) / 2)).collect();
                push(vec![c, s[0], s[1], s[2]], uniform(&mut r, c * s.iter().product::<usize>(), -1.0, 1.0));
            }
        }
        GradOp::Relu => {
            let c = dim(&mut r, 1, 2);
            let s = sp(&mut r, 1);
            push(vec![c, s[0], s[1], s[2]], away_from_zero(&mut r, c * s.iter().product::<usize>()));
        }
        GradOp::Sigmoid => {
            let s = sp(&mut r, 1);
            push(vec![1, s[0], s[1], s[2]], uniform(&mut r, s.iter().product(), -4.0, 4.0));
        }
        GradOp::Bce => {
            let s = sp(&mut r, 1);
            push(vec![1, s[0], s[1], s[2]], uniform(&mut r, s.iter().product(), 0.05, 0.95));
        }
    }
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = apply_op(op, &mut g, &vars);
        g.value(y).numel()
    };
    let target: Vec<u8> = (0..out_len).map(|_| r.random_bool(0.4) as u8).collect();
    let mut dontcare: Vec<u8> = (0..out_len).map(|_| r.random_bool(0.2) as u8).collect();
    dontcare[0] = 0;
    let cfg = LossConfig { root_weight: r.random_range(1.0..10.0), use_dontcare: true, ..LossConfig::default() };
    let objective = |inputs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let mut y = apply_op(op, &mut g, &vars);
        if op != GradOp::Bce {
            y = g.sigmoid(y);
        }
        let l = g.weighted_masked_bce(y, &target, Some(&dontcare), &cfg).unwrap();
        let v = g.value(l).item();
        if !grads {
            return (v, Vec::new());
        }
        g.backward(l).unwrap();
        (v, vars.iter().map(|&x| g.grad(x).unwrap().to_vec()).collect())
    };
    let (_, grads) = objective(&inputs, true);
    let mut stats = FdStats::default();
    for t in 0..inputs.len() {
        for j in 0..inputs[t].numel() {
            let orig = inputs[t].data()[j];
            let numeric = central_difference(h, |d| {
                inputs[t].data_mut()[j] = orig + d;
                let v = objective(&inputs, false).0;
                inputs[t].data_mut()[j] = orig;
                v
            });
            stats.record(grads[t][j], numeric);
        }
    }
    stats
}

fn apply_op(op: GradOp, g: &mut Graph<f64>, v: &[rootseg::autodiff::Var]) -> rootseg::autodiff::Var {
    match op {
        GradOp::Conv => g.conv3d_valid(v[0], v[1], v[2]).unwrap(),
        GradOp::ConvTranspose => g.conv_transpose3d_x2(v[0], v[1], v[2]).unwrap(),
        GradOp::MaxPool => g.maxpool3d(v[0]).unwrap(),
        GradOp::ConcatCrop => g.concat_center_crop(v[0], v[1]).unwrap(),
        GradOp::Relu => g.relu(v[0]),
        GradOp::Sigmoid | GradOp::Bce => v[0],
    }
}
