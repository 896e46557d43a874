//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written as plainly as possible: nested loops, no
//! summed-area tables, no GEMM lowering, exact integer arithmetic where ties
//! matter. The library code is checked against these, never the other way
//! round.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usta::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use usta::{ChangeMap, RasterImage, ScalarMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> RasterImage {
    RasterImage::from_fn(h, w, c, |_, _, _| rng.gen::<f64>()).unwrap()
}

pub fn random_change_map(rng: &mut impl Rng, h: usize, w: usize, p_changed: f64) -> ChangeMap {
    ChangeMap::from_fn(h, w, |_, _| rng.gen_bool(p_changed))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Tensor kernels

/// Cross-correlation, stride 1, zero padding. `x` is (n, c, h, w) and `w` is
/// (o, c, k, k).
pub fn conv2d_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [o, ci, k, _] = w.dims4().unwrap();
    assert_eq!(c, ci);
    let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let xd = x.data();
    let wt = w.data();
    let mut out = vec![0.0; n * o * ho * wo];
    for bn in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (y, xx) = (i + ki, j + kj);
                                if y < pad || xx < pad || y - pad >= h || xx - pad >= wd {
                                    continue;
                                }
                                let xv = xd[((bn * c + ic) * h + y - pad) * wd + xx - pad];
                                acc += xv * wt[((oc * c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((bn * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out).unwrap()
}

/// 2x2 stride-2 transposed convolution. `w` is (c_in, c_out, 2, 2).
pub fn tconv2_oracle(x: &Tensor, w: &Tensor) -> Tensor {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [ci, o, _, _] = w.dims4().unwrap();
    assert_eq!(c, ci);
    let mut out = vec![0.0; n * o * 4 * h * wd];
    for bn in 0..n {
        for oc in 0..o {
            for i in 0..2 * h {
                for j in 0..2 * wd {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        let xv = x.data()[((bn * c + ic) * h + i / 2) * wd + j / 2];
                        acc += xv * w.data()[((ic * o + oc) * 2 + i % 2) * 2 + j % 2];
                    }
                    out[((bn * o + oc) * 2 * h + i) * 2 * wd + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, 2 * h, 2 * wd], out).unwrap()
}

/// 2x2 stride-2 max pool; also returns, per output cell, the input index
/// receiving the gradient (first maximum in row-major window order).
pub fn maxpool2_oracle(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.dims4().unwrap();
    let mut out = Vec::new();
    let mut winners = Vec::new();
    for p in 0..n * c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let cells = [
                    (2 * i, 2 * j),
                    (2 * i, 2 * j + 1),
                    (2 * i + 1, 2 * j),
                    (2 * i + 1, 2 * j + 1),
                ];
                let mut best = None::<(usize, f64)>;
                for (r, cc) in cells {
                    let idx = (p * h + r) * w + cc;
                    let v = x.data()[idx];
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((idx, v));
                    }
                }
                let (idx, v) = best.unwrap();
                out.push(v);
                winners.push(idx);
            }
        }
    }
    (Tensor::new(vec![n, c, h / 2, w / 2], out).unwrap(), winners)
}

// ---------------------------------------------------------------------------
// Confidence filter

/// Agreement ratio by explicit XNOR counting over every window cell.
pub fn filter_oracle(cm: &ChangeMap, w: usize) -> Vec<f64> {
    let (h, wd) = (cm.height(), cm.width());
    let half = w / 2;
    let mut out = vec![0.0; h * wd];
    for r in 0..h {
        for c in 0..wd {
            if r < half || c < half || r + half >= h || c + half >= wd {
                continue;
            }
            let center = cm.get(r, c);
            let mut matches = 0;
            for dr in 0..w {
                for dc in 0..w {
                    let v = cm.get(r + dr - half, c + dc - half);
                    if !(v ^ center) & 1 == 1 {
                        matches += 1;
                    }
                }
            }
            out[r * wd + c] = matches as f64 / (w * w) as f64;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Otsu

/// Between-class variance of the split "bin >= k", as the exact fraction
/// `num / den` (both scaled by the same positive constant). `None` when one
/// class is empty.
pub fn otsu_split_variance(bins: &[usize], k: usize) -> Option<(u128, u128)> {
    let (mut n0, mut n1, mut s0, mut s1) = (0i128, 0i128, 0i128, 0i128);
    for &b in bins {
        if b >= k {
            n1 += 1;
            s1 += b as i128;
        } else {
            n0 += 1;
            s0 += b as i128;
        }
    }
    if n0 == 0 || n1 == 0 {
        return None;
    }
    // n0 n1 (m0 - m1)^2 = (s0 n1 - s1 n0)^2 / (n0 n1)
    let d = (s0 * n1 - s1 * n0).unsigned_abs();
    Some((d * d, (n0 * n1) as u128))
}

pub fn quantize(v: f64) -> usize {
    ((v * 256.0).floor() as usize).min(255)
}

/// Smallest boundary `k` in 1..=255 maximizing between-class variance over
/// the 256-bin quantization, by exhaustive search.
pub fn otsu_oracle(map: &ScalarMap) -> Option<usize> {
    let bins: Vec<usize> = map.data().iter().map(|&v| quantize(v)).collect();
    let mut best: Option<(usize, (u128, u128))> = None;
    for k in 1..256 {
        let Some((num, den)) = otsu_split_variance(&bins, k) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((_, (bn, bd))) => num * bd > bn * den,
        };
        if better {
            best = Some((k, (num, den)));
        }
    }
    best.map(|(k, _)| k)
}

// ---------------------------------------------------------------------------
// Finite differences

/// Step of the finite differences.
pub const FD_STEP: f64 = 1e-5;

/// Largest accepted relative error.
pub const FD_TOL: f64 = 1e-4;

/// Gradients below this magnitude are compared absolutely: the differences
/// themselves carry O(1e-10) truncation and rounding noise.
pub const FD_FLOOR: f64 = 1e-6;

/// Divisors of `FD_STEP` tried when the central stencil crosses a kink.
pub const REDUCED_STEPS: [f64; 2] = [3.0, 10.0];

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    /// Entries compared against a finite difference.
    pub checked: usize,
    /// Of those, entries compared with a central stencil at a reduced step
    /// because the one at `FD_STEP` crossed a kink.
    pub reduced: usize,
    /// Of those, entries compared with a one-sided stencil because every
    /// central one crossed a kink.
    pub one_sided: usize,
    /// Entries with kinks on both sides within one step; no stencil at this
    /// step samples a single smooth piece, so they are not compared.
    pub straddled: usize,
    /// Compared entries beyond tolerance.
    pub failed: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failed == 0
    }

    /// Compare `analytic` with finite differences of `f`, which returns the
    /// loss and the graph's kink signature with an offset added to one
    /// parameter entry.
    ///
    /// ReLU and max-pool make the loss piecewise smooth. A difference quotient
    /// only estimates the derivative when all its sample points lie on the
    /// piece containing the evaluation point, i.e. share its signature. The
    /// central stencil at `FD_STEP` is used when it qualifies, then central
    /// stencils at the steps in `REDUCED_STEPS`, then the second-order forward
    /// or backward stencil (`[0, 2h]` or `[-2h, 0]`) at `FD_STEP`. Next to a
    /// kink the one-sided stencils carry the curvature of the adjacent piece,
    /// so a shorter central step is the more accurate fallback.
    pub fn check(
        &mut self,
        what: impl FnOnce() -> String,
        analytic: f64,
        mut f: impl FnMut(f64) -> (f64, u64),
    ) {
        let h = FD_STEP;
        let (f0, s0) = f(0.0);
        let (up, s_up) = f(h);
        let (down, s_down) = f(-h);
        let numeric = if s_up == s0 && s_down == s0 {
            (up - down) / (2.0 * h)
        } else if let Some(n) = REDUCED_STEPS.iter().find_map(|&k| {
            let hk = h / k;
            let (u, su) = f(hk);
            let (d, sd) = f(-hk);
            (su == s0 && sd == s0).then(|| (u - d) / (2.0 * hk))
        }) {
            self.reduced += 1;
            n
        } else {
            let sided = if s_up == s0 {
                let (up2, s) = f(2.0 * h);
                (s == s0).then(|| (-3.0 * f0 + 4.0 * up - up2) / (2.0 * h))
            } else if s_down == s0 {
                let (down2, s) = f(-2.0 * h);
                (s == s0).then(|| (3.0 * f0 - 4.0 * down + down2) / (2.0 * h))
            } else {
                None
            };
            match sided {
                Some(n) => {
                    self.one_sided += 1;
                    n
                }
                None => {
                    self.straddled += 1;
                    return;
                }
            }
        };
        self.checked += 1;
        let err = rel_err(analytic, numeric);
        if err > FD_TOL {
            self.failed += 1;
        }
        if err > self.worst || self.worst_at.is_empty() {
            self.worst = self.worst.max(err);
            self.worst_at = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.reduced += other.reduced;
        self.one_sided += other.one_sided;
        self.straddled += other.straddled;
        self.failed += other.failed;
        if other.worst >= self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }
}

/// Compare every parameter gradient of the scalar built by `build` with
/// finite differences of its value.
pub fn check_store<F>(store: &mut ParamStore, mut build: F) -> GradCheck
where
    F: FnMut(&ParamStore, &mut Graph) -> Var,
{
    let mut g = Graph::new();
    let loss = build(store, &mut g);
    store.zero_grad();
    g.backward(loss, store).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.grad(id).unwrap().data().to_vec())
        .collect();

    let mut report = GradCheck::default();
    for (id, grad) in ids.iter().zip(&grads) {
        for (k, &analytic) in grad.iter().enumerate() {
            let orig = store.value(*id).data()[k];
            let name = store.name(*id).to_string();
            report.check(
                || format!("{name}[{k}]"),
                analytic,
                |delta| {
                    store.value_mut(*id).data_mut()[k] = orig + delta;
                    let mut g = Graph::new();
                    let v = build(store, &mut g);
                    store.value_mut(*id).data_mut()[k] = orig;
                    (g.value(v).item().unwrap(), g.kink_signature())
                },
            );
        }
    }
    report
}

pub struct LayerCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub build: BuildFn,
}

pub type BuildFn = Box<dyn FnMut(&ParamStore, &mut Graph) -> Var>;

/// Scalar `sum(y * r)` with a fixed random `r`, so every output element
/// receives a distinct upstream gradient.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let r = g.input(random_tensor(&mut rng(seed), &shape));
    let m = g.mul(y, r).unwrap();
    g.sum(m)
}

/// One finite-difference case per differentiable graph operation. Inputs are
/// parameters too, so input gradients are checked alongside weights.
pub fn layer_cases() -> Vec<LayerCase> {
    use usta::tensor::{BatchNormState, LossNormalization, Mode};

    let mut cases = Vec::new();
    let mut r = rng(42);

    for (k, pad, bias) in [(3, 1, true), (3, 0, false), (1, 0, true)] {
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut r, &[2, 3, 5, 6]));
        let w = store.add("w", random_tensor(&mut r, &[4, 3, k, k]));
        let b = store.add("b", random_tensor(&mut r, &[4]));
        cases.push(LayerCase {
            name: match (k, pad) {
                (3, 1) => "conv3x3 pad 1",
                (3, _) => "conv3x3 pad 0",
                _ => "conv1x1",
            },
            store,
            build: Box::new(move |s, g| {
                let (xv, wv) = (g.param(s, x), g.param(s, w));
                let bv = bias.then(|| g.param(s, b));
                let y = g.conv2d(xv, wv, bv, pad).unwrap();
                project(g, y, 1)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut r, &[2, 3, 3, 4]));
        let w = store.add("w", random_tensor(&mut r, &[3, 2, 2, 2]));
        cases.push(LayerCase {
            name: "tconv2",
            store,
            build: Box::new(move |s, g| {
                let (xv, wv) = (g.param(s, x), g.param(s, w));
                let y = g.tconv2(xv, wv).unwrap();
                project(g, y, 2)
            }),
        });
    }

    {
        // distinct values spaced far beyond the step, so no window argmax flips
        let mut store = ParamStore::new();
        let n = 2 * 2 * 4 * 6;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, r.gen_range(0..=i));
        }
        let x = store.add("x", Tensor::new(vec![2, 2, 4, 6], vals).unwrap());
        cases.push(LayerCase {
            name: "maxpool2",
            store,
            build: Box::new(move |s, g| {
                let xv = g.param(s, x);
                let y = g.maxpool2(xv).unwrap();
                project(g, y, 3)
            }),
        });
    }

    for mode in [Mode::Train, Mode::Eval] {
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut r, &[2, 3, 3, 3]));
        let gamma = store.add("gamma", random_tensor(&mut r, &[3]));
        let beta = store.add("beta", random_tensor(&mut r, &[3]));
        let mut state = BatchNormState::new(3);
        state.running_mean = vec![0.1, -0.2, 0.3];
        state.running_var = vec![0.5, 1.5, 2.0];
        cases.push(LayerCase {
            name: if mode == Mode::Train {
                "batchnorm train"
            } else {
                "batchnorm eval"
            },
            store,
            build: Box::new(move |s, g| {
                let (xv, gv, bv) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
                let mut st = state.clone();
                let y = g.batchnorm(xv, gv, bv, &mut st, mode).unwrap();
                project(g, y, 4)
            }),
        });
    }

    {
        // keep inputs away from the kink
        let mut store = ParamStore::new();
        let vals = (0..24)
            .map(|_| {
                let m = r.gen_range(0.05..1.0);
                if r.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let x = store.add("x", Tensor::new(vec![1, 2, 3, 4], vals).unwrap());
        cases.push(LayerCase {
            name: "relu",
            store,
            build: Box::new(move |s, g| {
                let xv = g.param(s, x);
                let y = g.relu(xv);
                project(g, y, 5)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut r, &[1, 2, 3, 4]));
        cases.push(LayerCase {
            name: "sigmoid",
            store,
            build: Box::new(move |s, g| {
                let xv = g.param(s, x);
                let scaled = g.scale(xv, 3.0);
                let y = g.sigmoid(scaled);
                project(g, y, 6)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut r, &[2, 2, 3, 3]));
        let b = store.add("b", random_tensor(&mut r, &[2, 3, 3, 3]));
        cases.push(LayerCase {
            name: "concat_channels",
            store,
            build: Box::new(move |s, g| {
                let (av, bv) = (g.param(s, a), g.param(s, b));
                let y = g.concat_channels(av, bv).unwrap();
                project(g, y, 7)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut r, &[1, 2, 2, 3]));
        let b = store.add("b", random_tensor(&mut r, &[1, 2, 2, 3]));
        cases.push(LayerCase {
            name: "add/mul/scale/sum",
            store,
            build: Box::new(move |s, g| {
                let (av, bv) = (g.param(s, a), g.param(s, b));
                let sum = g.add(av, bv).unwrap();
                let prod = g.mul(sum, av).unwrap();
                let scaled = g.scale(prod, -0.7);
                g.sum(scaled)
            }),
        });
    }

    for norm in [LossNormalization::PositiveWeights, LossNormalization::Sum] {
        let mut store = ParamStore::new();
        let z = store.add("z", random_tensor(&mut r, &[2, 1, 3, 3]));
        let targets: Vec<f64> = (0..18)
            .map(|_| f64::from(u8::from(r.gen_bool(0.4))))
            .collect();
        let weights: Vec<f64> = (0..18)
            .map(|i| {
                if i % 5 == 0 {
                    0.0
                } else {
                    r.gen_range(0.5..1.0)
                }
            })
            .collect();
        cases.push(LayerCase {
            name: if norm == LossNormalization::Sum {
                "weighted bce (sum)"
            } else {
                "weighted bce (mean over weighted pixels)"
            },
            store,
            build: Box::new(move |s, g| {
                let zv = g.param(s, z);
                let p = g.sigmoid(zv);
                g.weighted_bce(p, &targets, &weights, norm).unwrap()
            }),
        });
    }

    cases
}

/// Finite-difference check of a whole change-detection network on a batch of
/// two random `size`x`size` pairs against random targets and weights. Each parameter
/// tensor contributes its largest-gradient entry plus `samples` random
/// entries (or all entries when it is that small).
pub fn network_grad_check(
    mode: usta::network::BranchMode,
    scale: usize,
    size: usize,
    batch: usize,
    samples: usize,
    seed: u64,
) -> GradCheck {
    use usta::network::{ChangeDetector, NetworkConfig};
    use usta::tensor::{LossNormalization, Mode};

    let mut r = rng(seed);
    let cfg = NetworkConfig {
        branch_mode: mode,
        ..NetworkConfig::with_scale(scale)
    };
    let mut net = ChangeDetector::build(cfg, &mut r).unwrap();
    let (n, h, w) = (batch, size, size);
    let x1 = Tensor::new(
        vec![n, 3, h, w],
        (0..n * 3 * h * w).map(|_| r.gen::<f64>()).collect(),
    )
    .unwrap();
    let x2 = Tensor::new(
        vec![n, 3, h, w],
        (0..n * 3 * h * w).map(|_| r.gen::<f64>()).collect(),
    )
    .unwrap();
    let targets: Vec<f64> = (0..n * h * w)
        .map(|_| f64::from(u8::from(r.gen_bool(0.3))))
        .collect();
    let weights: Vec<f64> = (0..n * h * w)
        .map(|_| {
            if r.gen_bool(0.2) {
                0.0
            } else {
                r.gen_range(0.5..1.0)
            }
        })
        .collect();

    let loss_of = |net: &mut ChangeDetector, backward: bool| {
        let mut g = Graph::new();
        let (a, b) = (g.input(x1.clone()), g.input(x2.clone()));
        let p = net.forward(&mut g, a, b, Mode::Train).unwrap();
        let l = g
            .weighted_bce(p, &targets, &weights, LossNormalization::PositiveWeights)
            .unwrap();
        if backward {
            net.params_mut().zero_grad();
            g.backward(l, net.params_mut()).unwrap();
        }
        (g.value(l).item().unwrap(), g.kink_signature())
    };

    loss_of(&mut net, true);
    let ids: Vec<ParamId> = net.params().ids().collect();
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| net.params().grad(id).unwrap().data().to_vec())
        .collect();

    let mut report = GradCheck::default();
    for (&id, grad) in ids.iter().zip(&grads) {
        let mut entries: Vec<usize> = if grad.len() <= samples + 1 {
            (0..grad.len()).collect()
        } else {
            let top = (0..grad.len())
                .max_by(|&i, &j| grad[i].abs().total_cmp(&grad[j].abs()))
                .unwrap();
            let mut e = vec![top];
            e.extend((0..samples).map(|_| r.gen_range(0..grad.len())));
            e
        };
        entries.dedup();
        for k in entries {
            let orig = net.params().value(id).data()[k];
            let name = net.params().name(id).to_string();
            report.check(
                || format!("{name}[{k}]"),
                grad[k],
                |delta| {
                    net.params_mut().value_mut(id).data_mut()[k] = orig + delta;
                    let l = loss_of(&mut net, false);
                    net.params_mut().value_mut(id).data_mut()[k] = orig;
                    l
                },
            );
        }
    }
    report
}
