//! Central finite-difference gradient checking.
//!
//! Runs in `f64` so that the difference quotient is an accurate oracle for
//! the analytic gradient. Coordinates whose ±h perturbation flips a ReLU
//! sign pattern straddle a kink where the gradient is undefined; they are
//! counted separately and excluded from the statistics.

use rand::{Rng, SeedableRng};

use super::graph::Op;
use super::{Graph, Layout, Tensor, Var};
use crate::error::Result;
use crate::model::{ForwardOptions, MultiTaskNet, NetConfig};
use crate::rng::StreamRng;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    /// Coordinates checked (kink stencils excluded).
    pub coords: usize,
    pub passed: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    /// Largest `|analytic - numeric|`, floor not applied.
    pub max_abs_err: f64,
}

impl CheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.coords == 0 {
            1.0
        } else {
            self.passed as f64 / self.coords as f64
        }
    }

    pub fn ok(&self) -> bool {
        self.pass_fraction() >= 0.99 && self.max_rel_err < REL_TOL
    }
}

/// Relative error with the absolute floor: differences below
/// [`ABS_FLOOR`] count as exact.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

fn relu_signature(g: &Graph<f64>) -> Vec<bool> {
    let mut sig = Vec::new();
    for node in &g.nodes {
        if let Op::Relu(x) = node.op {
            sig.extend(g.nodes[x.0].value.iter().map(|&v| v > 0.0));
        }
    }
    sig
}

/// Check `f`'s gradient with respect to every input tensor. `f` builds the
/// scalar loss from leaves registered in order. At most `per_input`
/// coordinates are sampled from each input.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], per_input: usize, seed: u64, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(true);
                g.leaf(&t)
            })
            .collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (g0, vars, loss) = eval(inputs)?;
    let mut grads = g0.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = rng_stream!(seed, "gradcheck", name);
    let mut report = CheckReport {
        name: name.to_string(),
        coords: 0,
        passed: 0,
        kinks: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let mut shifted = inputs.to_vec();
            let base = t.data()[c];
            let mut plus = t.data().to_vec();
            plus[c] = base + STEP;
            shifted[ti] = Tensor::new(t.dims(), plus)?;
            let (gp, _, lp) = eval(&shifted)?;
            let mut minus = t.data().to_vec();
            minus[c] = base - STEP;
            shifted[ti] = Tensor::new(t.dims(), minus)?;
            let (gm, _, lm) = eval(&shifted)?;

            let numeric = (gp.scalar(lp)? - gm.scalar(lm)?) / (2.0 * STEP);
            if relu_signature(&gp) != relu_signature(&gm) {
                report.kinks += 1;
                continue;
            }
            let err = rel_error(analytic[ti][c], numeric);
            report.coords += 1;
            if err < REL_TOL {
                report.passed += 1;
            }
            report.max_rel_err = report.max_rel_err.max(err);
            report.max_abs_err = report.max_abs_err.max((analytic[ti][c] - numeric).abs());
        }
    }
    Ok(report)
}

fn random_tensor(rng: &mut StreamRng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(dims, data).expect("valid dims")
}

/// Fixed random projection to a scalar: `sum(x ⊙ r)`.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let dims = g.dims(x).to_vec();
    let mut rng = StreamRng::seed_from_u64(seed);
    let r = random_tensor(&mut rng, &dims, 1.0);
    let c = g.constant(&dims, r.into_data())?;
    let y = g.mul(x, c)?;
    Ok(g.sum(y))
}

/// Gradient checks for every primitive op plus a full multi-task
/// forward and loss, all seeded by `seed`.
pub fn run_suite(seed: u64, per_input: usize) -> Result<Vec<CheckReport>> {
    let mut rng = rng_stream!(seed, "gradcheck-inputs");
    let mut out = Vec::new();
    let proj = seed ^ 0x5eed;

    let x = random_tensor(&mut rng, &[2, 5, 6], 1.0);
    let k = random_tensor(&mut rng, &[3, 2, 3, 3], 0.5);
    let b = random_tensor(&mut rng, &[3], 0.5);
    out.push(check("conv2d", &[x.clone(), k.clone(), b.clone()], per_input, seed, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1)?;
        project(g, y, proj)
    })?);
    let x4 = random_tensor(&mut rng, &[2, 6, 8], 1.0);
    out.push(check("conv2d_stride2", &[x4, k, b], per_input, seed, |g, v| {
        let y = g.conv2d_strided(v[0], v[1], v[2], 2)?;
        project(g, y, proj)
    })?);
    let k1 = random_tensor(&mut rng, &[4, 2, 1, 1], 0.5);
    let b1 = random_tensor(&mut rng, &[4], 0.5);
    out.push(check("conv2d_1x1", &[x.clone(), k1, b1], per_input, seed, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 0)?;
        project(g, y, proj)
    })?);
    out.push(check("relu", std::slice::from_ref(&x), per_input, seed, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, proj)
    })?);
    let x2 = random_tensor(&mut rng, &[2, 5, 6], 1.0);
    out.push(check("add_mul", &[x.clone(), x2], per_input, seed, |g, v| {
        let s = g.add(v[0], v[1])?;
        let p = g.mul(s, v[0])?;
        let q = g.scale(p, 0.7);
        project(g, q, proj)
    })?);
    out.push(check("upsample_bilinear", std::slice::from_ref(&x), per_input, seed, |g, v| {
        let y = g.upsample_bilinear(v[0], 3)?;
        project(g, y, proj)
    })?);
    out.push(check("global_avg_pool", std::slice::from_ref(&x), per_input, seed, |g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, proj)
    })?);
    let w = random_tensor(&mut rng, &[4, 7], 0.5);
    let lb = random_tensor(&mut rng, &[4], 0.5);
    let li = random_tensor(&mut rng, &[7], 1.0);
    let lx = random_tensor(&mut rng, &[3, 7], 1.0);
    out.push(check("linear", &[li, w.clone(), lb.clone()], per_input, seed, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        project(g, y, proj)
    })?);
    out.push(check("linear_batched", &[lx, w, lb], per_input, seed, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        project(g, y, proj)
    })?);
    out.push(check("channel_dropout", std::slice::from_ref(&x), per_input, seed, |g, v| {
        let mut r = StreamRng::seed_from_u64(proj);
        let y = g.channel_dropout(v[0], 0.5, &mut r, true)?;
        project(g, y, proj)
    })?);
    out.push(check("reductions", std::slice::from_ref(&x), per_input, seed, |g, v| {
        let r = g.reshape(v[0], &[10, 6])?;
        let m = g.mul(r, r)?;
        let a = g.mean(m);
        let s = g.sum(r);
        let s2 = g.mul(s, s)?;
        g.add(a, s2)
    })?);

    let logits = random_tensor(&mut rng, &[6, 5], 2.0);
    let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
    let ignore = vec![false, true, false, false, true, false];
    {
        let (t, i) = (targets.clone(), ignore.clone());
        out.push(check("softmax_cross_entropy", std::slice::from_ref(&logits), per_input, seed, move |g, v| {
            g.softmax_cross_entropy(v[0], &t, &i)
        })?);
    }
    {
        let (t, i) = (targets.clone(), ignore.clone());
        out.push(check("focal_loss", &[logits], per_input, seed, move |g, v| {
            g.focal_loss(v[0], &t, 2.0, &i)
        })?);
    }
    let seg = random_tensor(&mut rng, &[5, 3, 4], 2.0);
    let seg_t: Vec<usize> = (0..12).map(|_| rng.gen_range(0..5)).collect();
    let seg_i: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.25)).collect();
    out.push(check("pixel_focal_loss", &[seg], per_input, seed, move |g, v| {
        g.classification_loss(v[0], Layout::Channels, &seg_t, &seg_i, 1.5)
    })?);

    out.push(network_check(seed, per_input)?);
    Ok(out)
}

/// Full multi-task forward (with the feature-perturbation decode) and a
/// composite loss, differentiated with respect to every parameter.
fn network_check(seed: u64, per_input: usize) -> Result<CheckReport> {
    let config = NetConfig {
        widths: vec![4, 6, 6],
        strides: vec![1, 2, 1],
    };
    let net = MultiTaskNet::<f64>::new(config, seed)?;
    let params: Vec<Tensor<f64>> = net.params().map(|(_, t)| t.clone()).collect();
    let mut rng = rng_stream!(seed, "gradcheck-net");
    let (h, w) = (8, 6);
    let image = random_tensor(&mut rng, &[1, h, w], 1.0)
        .data()
        .iter()
        .map(|v| v.abs())
        .collect::<Vec<_>>();
    let seg_t: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..15)).collect();
    let seg_i: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.2)).collect();
    let chd = rng.gen_range(0..7);
    let view = rng.gen_range(0..4);
    let per_param = (per_input / 4).max(4);
    check("multitask_network", &params, per_param, seed, move |g, v| {
        // the forward reads parameters from the caller's leaves
        let bound = crate::model::Bound::from_vars(v.to_vec());
        let img = g.constant(&[1, h, w], image.clone())?;
        let mut r = StreamRng::seed_from_u64(seed);
        let o = net.forward(
            g,
            &bound,
            img,
            ForwardOptions {
                training: true,
                fp_rate: 0.5,
            },
            &mut r,
        )?;
        let l_seg = g.classification_loss(o.seg, Layout::Channels, &seg_t, &seg_i, 0.0)?;
        let fp = o.seg_fp.expect("fp requested");
        let l_fp = g.classification_loss(fp, Layout::Channels, &seg_t, &seg_i, 2.0)?;
        let l_chd = g.softmax_cross_entropy(o.chd, &[chd], &[false])?;
        let l_view = g.focal_loss(o.view, &[view], 2.0, &[false])?;
        let a = g.add(l_seg, l_fp)?;
        let b = g.scale(l_chd, 0.8);
        let c = g.add(a, b)?;
        g.add(c, l_view)
    })
}
