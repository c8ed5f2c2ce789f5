//! Reverse-mode gradients of the SPN layers, batch norm and the distillation
//! loss against central differences of independent f64 references. Each
//! check returns the worst relative error it saw.

use rand::Rng;
use strassennet::autodiff::Graph;
use strassennet::quantize::QuantState;
use strassennet::spn::{BatchNorm, Ctx, Mode, SpnGemm, StConv2d};
use strassennet::train::{kd_loss, KdConfig};
use strassennet::Tensor;
use strassennet_testkit as tk;

pub const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), tk::to_f32(v)).unwrap()
}

fn msg(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn check(what: &str, seed: u64, analytic: &Tensor, numeric: &[f64]) -> Result<f64, String> {
    let err = tk::rel_err(&tk::to_f64(analytic.data()), numeric);
    if err <= TOL {
        Ok(err)
    } else {
        Err(format!("{what} (seed {seed}): rel err {err:.3e}"))
    }
}

pub fn spn_gemm(seeds: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = tk::rng(seed);
        let (k, m, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
        let (r, batch) = (rng.random_range(1..7), rng.random_range(1..4));
        let (d, o) = (m * n, k * n);
        let x = tk::uniform(&mut rng, batch * d, -1.0, 1.0);
        let wb = tk::uniform(&mut rng, r * d, -1.0, 1.0);
        let a = tk::uniform(&mut rng, r, -1.0, 1.0);
        let wc = tk::uniform(&mut rng, o * r, -1.0, 1.0);
        let probe = tk::uniform(&mut rng, batch * o, -1.0, 1.0);

        let mut spn = SpnGemm::from_parts(k, m, n, t(&[r], &a), QuantState::new(t(&[r, d], &wb)), QuantState::new(t(&[o, r], &wc))).map_err(msg)?;
        spn.w_b.shadow.id = 1;
        spn.a_tilde.id = 2;
        spn.w_c.shadow.id = 3;
        let mut g = Graph::new();
        let xv = g.variable(t(&[batch, d], &x));
        let y = spn.forward_graph(&mut g, xv).map_err(msg)?;
        let pv = g.constant(t(&[batch, o], &probe));
        let prod = g.mul(y, pv).map_err(msg)?;
        let loss = g.sum(prod);
        let grads = g.backward(loss).map_err(msg)?;
        let by = grads.by_param().map_err(msg)?;

        let f = |x: &[f64], wb: &[f64], a: &[f64], wc: &[f64]| tk::probe(&tk::spn(x, batch, wb, a, wc), &probe);
        worst = worst.max(check("x", seed, grads.get(xv).ok_or("missing input gradient")?, &tk::central_diff(&x, STEP, |v| f(v, &wb, &a, &wc)))?);
        worst = worst.max(check("W_b", seed, &by[&1], &tk::central_diff(&wb, STEP, |v| f(&x, v, &a, &wc)))?);
        worst = worst.max(check("a_tilde", seed, &by[&2], &tk::central_diff(&a, STEP, |v| f(&x, &wb, v, &wc)))?);
        worst = worst.max(check("W_c", seed, &by[&3], &tk::central_diff(&wc, STEP, |v| f(&x, &wb, &a, v)))?);
    }
    Ok(worst)
}

pub fn st_conv2d(p: usize, groups: usize, seeds: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    {
        {
            for seed in 0..seeds {
                let mut rng = tk::rng(1000 * p as u64 + 100 * groups as u64 + seed);
                let c_in = groups * rng.random_range(1..3);
                let c_out = rng.random_range(1..4);
                let with_bn = seed % 2 == 0;
                // Batch norm makes the output invariant to the scale of each
                // W_b row; a one-entry row would have a vanishing gradient.
                let kernel = if with_bn { 3 } else { [1, 3][rng.random_range(0..2)] };
                let stride = rng.random_range(1..3);
                let r = groups * rng.random_range(1..3);
                let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
                let batch = 3;

                let kb = StConv2d::wb_kernel(kernel, stride, p);
                let reference = tk::StConvRef {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    p,
                    groups,
                    r,
                    wb: tk::uniform(&mut rng, r * (c_in / groups) * kb * kb, -1.0, 1.0),
                    a: tk::uniform(&mut rng, r, 0.5, 1.5),
                    wc: tk::uniform(&mut rng, r * c_out * p * p, -1.0, 1.0),
                    bn: with_bn.then(|| (tk::uniform(&mut rng, r, 0.5, 1.5), tk::uniform(&mut rng, r, -0.5, 0.5))),
                };
                let x = tk::uniform(&mut rng, batch * c_in * h * w, -1.0, 1.0);
                let xs = [batch, c_in, h, w];
                let (oh, ow) = reference.out_hw(h, w);
                let probe = tk::uniform(&mut rng, batch * c_out * oh * ow, -1.0, 1.0);

                let mut layer = StConv2d::new(c_in, c_out, kernel, stride, p, groups, r, with_bn, &mut tk::rng(0)).map_err(msg)?;
                layer.w_b.shadow.value = t(&[r, c_in / groups, kb, kb], &reference.wb);
                layer.a_tilde.value = t(&[r], &reference.a);
                layer.w_c.shadow.value = t(&[r, c_out, p, p], &reference.wc);
                if let (Some(bn), Some((gamma, beta))) = (&mut layer.bn, &reference.bn) {
                    bn.gamma.value = t(&[r], gamma);
                    bn.beta.value = t(&[r], beta);
                }
                for (id, param) in layer.params_mut().into_iter().enumerate() {
                    param.id = id + 1;
                }
                let mut g = Graph::new();
                let xv = g.variable(t(&xs, &x));
                let mut ctx = Ctx::new(Mode::Train);
                let y = layer.forward_graph(&mut g, xv, &mut ctx).map_err(msg)?;
                if g.value(y).shape() != [batch, c_out, oh, ow] {
                    return Err(format!("st_conv2d output shape {:?}", g.value(y).shape()));
                }
                let pv = g.constant(t(&[batch, c_out, oh, ow], &probe));
                let prod = g.mul(y, pv).map_err(msg)?;
                let loss = g.sum(prod);
                let grads = g.backward(loss).map_err(msg)?;
                let by = grads.by_param().map_err(msg)?;

                let what = |name: &str| format!("{name} p={p} g={groups} k={kernel} s={stride}");
                let eval = |refr: &tk::StConvRef, x: &[f64]| tk::probe(&refr.forward(x, xs).0, &probe);
                worst = worst.max(check(&what("x"), seed, grads.get(xv).ok_or("missing input gradient")?, &tk::central_diff(&x, STEP, |v| eval(&reference, v)))?);
                let mut probe_ref = reference.clone();
                let fd = tk::central_diff(&reference.wb, STEP, |v| {
                    probe_ref.wb = v.to_vec();
                    eval(&probe_ref, &x)
                });
                worst = worst.max(check(&what("W_b"), seed, &by[&1], &fd)?);
                let mut probe_ref = reference.clone();
                let fd = tk::central_diff(&reference.a, STEP, |v| {
                    probe_ref.a = v.to_vec();
                    eval(&probe_ref, &x)
                });
                worst = worst.max(check(&what("a_tilde"), seed, &by[&2], &fd)?);
                let mut probe_ref = reference.clone();
                let fd = tk::central_diff(&reference.wc, STEP, |v| {
                    probe_ref.wc = v.to_vec();
                    eval(&probe_ref, &x)
                });
                worst = worst.max(check(&what("W_c"), seed, &by[&3], &fd)?);
                if let Some((gamma, beta)) = &reference.bn {
                    let mut probe_ref = reference.clone();
                    let fd = tk::central_diff(gamma, STEP, |v| {
                        probe_ref.bn = Some((v.to_vec(), beta.clone()));
                        eval(&probe_ref, &x)
                    });
                    worst = worst.max(check(&what("gamma"), seed, &by[&4], &fd)?);
                    let fd = tk::central_diff(beta, STEP, |v| {
                        probe_ref.bn = Some((gamma.clone(), v.to_vec()));
                        eval(&probe_ref, &x)
                    });
                    worst = worst.max(check(&what("beta"), seed, &by[&5], &fd)?);
                }
            }
        }
    }
    Ok(worst)
}

pub fn batch_norm(seeds: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = tk::rng(7000 + seed);
        // Two samples per channel normalize to ±1 whatever x is, so the
        // input gradient would be pure epsilon; start at three.
        let (b, c) = (rng.random_range(3..6), rng.random_range(1..4));
        let spatial = if seed % 2 == 0 { vec![] } else { vec![rng.random_range(1..4), rng.random_range(1..4)] };
        let shape: Vec<usize> = [b, c].into_iter().chain(spatial).collect();
        let len: usize = shape.iter().product();
        let x = tk::uniform(&mut rng, len, -2.0, 2.0);
        let gamma = tk::uniform(&mut rng, c, 0.5, 1.5);
        let beta = tk::uniform(&mut rng, c, -1.0, 1.0);
        let probe = tk::uniform(&mut rng, len, -1.0, 1.0);

        let mut bn = BatchNorm::new(c);
        bn.gamma.value = t(&[c], &gamma);
        bn.gamma.id = 1;
        bn.beta.value = t(&[c], &beta);
        bn.beta.id = 2;
        let mut g = Graph::new();
        let xv = g.variable(t(&shape, &x));
        let mut ctx = Ctx::new(Mode::Train);
        let y = bn.forward(&mut g, xv, &mut ctx).map_err(msg)?;
        let pv = g.constant(t(&shape, &probe));
        let prod = g.mul(y, pv).map_err(msg)?;
        let loss = g.sum(prod);
        let grads = g.backward(loss).map_err(msg)?;
        let by = grads.by_param().map_err(msg)?;

        let f = |x: &[f64], gm: &[f64], bt: &[f64]| tk::probe(&tk::batch_norm(x, b, c, gm, bt), &probe);
        worst = worst.max(check("bn x", seed, grads.get(xv).ok_or("missing input gradient")?, &tk::central_diff(&x, STEP, |v| f(v, &gamma, &beta)))?);
        worst = worst.max(check("bn gamma", seed, &by[&1], &tk::central_diff(&gamma, STEP, |v| f(&x, v, &beta)))?);
        worst = worst.max(check("bn beta", seed, &by[&2], &tk::central_diff(&beta, STEP, |v| f(&x, &gamma, v)))?);
    }
    Ok(worst)
}

pub fn kd(seeds: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = tk::rng(9000 + seed);
        let (b, c) = (rng.random_range(1..5), rng.random_range(2..6));
        let student = tk::uniform(&mut rng, b * c, -3.0, 3.0);
        let teacher = tk::uniform(&mut rng, b * c, -3.0, 3.0);
        let mut hard = vec![0.0; b * c];
        for row in 0..b {
            hard[row * c + rng.random_range(0..c)] = 1.0;
        }
        let temperature = rng.random_range(0.5..4.0);
        let weight = rng.random_range(0.0..2.0);
        let cfg = KdConfig { enabled: true, temperature: temperature as f32, weight: weight as f32 };
        // Round the knobs through f32 so both sides see the same values.
        let (tf, wf) = (cfg.temperature as f64, cfg.weight as f64);

        let mut g = Graph::new();
        let sv = g.variable(t(&[b, c], &student));
        let loss = kd_loss(&mut g, sv, &t(&[b, c], &teacher), &t(&[b, c], &hard), &cfg).map_err(msg)?;
        let value = g.value(loss).item().map_err(msg)? as f64;
        let grads = g.backward(loss).map_err(msg)?;

        let student32 = tk::to_f64(&tk::to_f32(&student));
        let teacher32 = tk::to_f64(&tk::to_f32(&teacher));
        let expected = tk::kd_loss(&student32, &teacher32, &hard, c, tf, wf);
        if (value - expected).abs() > 1e-5 * expected.abs().max(1.0) {
            return Err(format!("kd value (seed {seed}): {value} vs {expected}"));
        }
        let fd = tk::central_diff(&student32, STEP, |v| tk::kd_loss(v, &teacher32, &hard, c, tf, wf));
        worst = worst.max(check("kd student", seed, grads.get(sv).ok_or("missing input gradient")?, &fd)?);
    }
    Ok(worst)
}
