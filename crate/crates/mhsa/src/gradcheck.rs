//! Central finite-difference verification of analytic gradients.
//!
//! `check_gradients` is the reusable harness; `run_suite` covers every tape
//! operation plus the composed training objective and backs the `gradcheck`
//! CLI command.

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::branch::{self, BranchParams, BranchVars};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::rng::Rng;

/// Builds a scalar loss from leaf vars created from `inputs` (in order).
pub type BuildFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn eval_loss(build: BuildFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("gradient check target must be scalar".into()));
    }
    Ok(tape.value(loss).data()[0])
}

/// Max relative error between analytic and central finite-difference
/// gradients over every element of every input.
pub fn check_gradients(build: BuildFn, inputs: &[Tensor], step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut max_rel = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.dense(vars[idx], input.numel());
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[e] -= step;
            let numeric = (eval_loss(build, &plus)? - eval_loss(build, &minus)?) / (2.0 * step);
            let denom = analytic[e].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[e] - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// One verified component of the suite.
#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Gaussian draw kept away from zero so ReLU/hinge kinks cannot sit inside
/// the finite-difference stencil.
fn randn_offset(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.5;
        }
    }
    t
}

/// Runs the finite-difference suite for every differentiable operation and
/// for the composed total objective. `corrupt` is a test hook: when set to a
/// component name, that component's analytic gradient is perturbed so the
/// suite must report a failure.
pub fn run_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<ComponentReport>> {
    let mut rng = Rng::new(seed);
    let mut reports = Vec::new();

    let mut push = |name: &'static str, err: Result<f64>| -> Result<()> {
        let mut e = err?;
        if corrupt == Some(name) {
            e += 1.0;
        }
        reports.push(ComponentReport { name, max_rel_err: e });
        Ok(())
    };

    // ── Primitive operations ───────────────────────────────────────
    {
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        push(
            "matmul",
            check_gradients(
                &|t, v| {
                    let c = t.matmul(v[0], v[1])?;
                    t.sum_all(c)
                },
                &[a, b],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[3, 4]);
        push(
            "transpose",
            check_gradients(
                &|t, v| {
                    let y = t.transpose(v[0])?;
                    let sq = t.square(y)?;
                    t.sum_all(sq)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[2, 6]);
        push(
            "reshape",
            check_gradients(
                &|t, v| {
                    let y = t.reshape(v[0], &[3, 4])?;
                    let sq = t.square(y)?;
                    t.sum_all(sq)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let a = randn(&mut rng, &[3, 3]);
        let b = randn(&mut rng, &[3, 3]);
        push(
            "add_sub_mul_scale",
            check_gradients(
                &|t, v| {
                    let s = t.add(v[0], v[1])?;
                    let d = t.sub(s, v[1])?;
                    let m = t.mul(d, v[0])?;
                    let sc = t.scale(m, 0.7)?;
                    t.sum_all(sc)
                },
                &[a, b],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn_offset(&mut rng, &[3, 4]);
        push(
            "relu",
            check_gradients(
                &|t, v| {
                    let y = t.relu(v[0])?;
                    t.sum_all(y)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[3, 4]);
        push(
            "square",
            check_gradients(
                &|t, v| {
                    let y = t.square(v[0])?;
                    t.sum_all(y)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        // Threshold far from any sampled value's finite-difference window.
        let x = randn_offset(&mut rng, &[3, 4]);
        push(
            "min_const",
            check_gradients(
                &|t, v| {
                    let y = t.min_const(v[0], 0.012_345)?;
                    let sq = t.square(y)?;
                    t.sum_all(sq)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[4, 3]);
        push(
            "softmax_rows",
            check_gradients(
                &|t, v| {
                    let y = t.softmax_rows(v[0])?;
                    let sq = t.square(y)?;
                    t.sum_all(sq)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[3, 5]);
        push(
            "log_softmax_rows",
            check_gradients(
                &|t, v| {
                    let y = t.log_softmax_rows(v[0])?;
                    let g = t.gather(y, &[(0, 1), (1, 4), (2, 0)])?;
                    let m = t.mean_all(g)?;
                    t.scale(m, -1.0)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[3, 5]);
        let gain = randn(&mut rng, &[1, 5]);
        let bias = randn(&mut rng, &[1, 5]);
        push(
            "layer_norm",
            check_gradients(
                &|t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    let sq = t.square(y)?;
                    t.sum_all(sq)
                },
                &[x, gain, bias],
                FD_STEP,
            ),
        )?;
    }
    {
        // A plain sum of squares is invariant in x for per-column
        // normalization; weight with a fixed matrix to get a real gradient.
        let x = randn(&mut rng, &[4, 3]);
        let gain = randn(&mut rng, &[1, 3]);
        let bias = randn(&mut rng, &[1, 3]);
        let mask = randn(&mut rng, &[4, 3]);
        push(
            "batch_norm",
            check_gradients(
                &|t, v| {
                    let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
                    let m = t.constant(mask.clone())?;
                    let weighted = t.mul(y, m)?;
                    let sq = t.square(weighted)?;
                    t.sum_all(sq)
                },
                &[x, gain, bias],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[4, 3]);
        push(
            "reductions",
            check_gradients(
                &|t, v| {
                    let sr = t.sum_axis(v[0], Axis::Rows)?;
                    let mr = t.mean_axis(v[0], Axis::Rows)?;
                    let sc = t.sum_axis(v[0], Axis::Cols)?;
                    let mc = t.mean_axis(v[0], Axis::Cols)?;
                    let a = t.sum_all(sr)?;
                    let b = t.sum_all(mr)?;
                    let c = t.sum_all(sc)?;
                    let d = t.sum_all(mc)?;
                    let ma = t.mean_all(v[0])?;
                    let ab = t.add(a, b)?;
                    let cd = t.add(c, d)?;
                    let abcd = t.add(ab, cd)?;
                    t.add(abcd, ma)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[1, 4]);
        push(
            "repeat_row",
            check_gradients(
                &|t, v| {
                    let y = t.repeat_row(v[0], 5)?;
                    let sq = t.square(y)?;
                    t.sum_all(sq)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[1, 3]);
        push(
            "concat_rows_and_row",
            check_gradients(
                &|t, v| {
                    let cat = t.concat_rows(&[v[0], v[1], v[0]])?;
                    let r = t.row(cat, 3)?;
                    let sq = t.square(cat)?;
                    let s1 = t.sum_all(sq)?;
                    let s2 = t.sum_all(r)?;
                    t.add(s1, s2)
                },
                &[a, b],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[4, 5]);
        push(
            "gather",
            check_gradients(
                &|t, v| {
                    let g = t.gather(v[0], &[(0, 0), (3, 4), (1, 2), (0, 0)])?;
                    let sq = t.square(g)?;
                    t.sum_all(sq)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[3, 4]);
        push(
            "l2_normalize_rows",
            check_gradients(
                &|t, v| {
                    let y = t.l2_normalize_rows(v[0])?;
                    let w = t.mul(y, y)?;
                    let g = t.gather(w, &[(0, 1), (2, 3)])?;
                    t.sum_all(g)
                },
                &[x],
                FD_STEP,
            ),
        )?;
    }
    {
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[2, 4]);
        push(
            "pairwise_sqdist",
            check_gradients(
                &|t, v| {
                    let d = t.pairwise_sqdist(v[0], v[1])?;
                    let sq = t.square(d)?;
                    t.sum_all(sq)
                },
                &[a, b],
                FD_STEP,
            ),
        )?;
    }
    {
        let x = randn(&mut rng, &[3, 3]);
        push(
            "frobenius_norm",
            check_gradients(&|t, v| t.frobenius_norm(v[0]), &[x], FD_STEP),
        )?;
    }
    {
        let x = randn(&mut rng, &[4, 4, 2]);
        let k = randn(&mut rng, &[3, 3, 2, 2]);
        let b = randn(&mut rng, &[1, 2]);
        push(
            "conv2d_stride2",
            check_gradients(
                &|t, v| {
                    let y = t.conv2d_stride2(v[0], v[1], v[2])?;
                    let flat = t.reshape(y, &[4, 2])?;
                    let sq = t.square(flat)?;
                    t.sum_all(sq)
                },
                &[x, k, b],
                FD_STEP,
            ),
        )?;
    }

    // ── Branch compositions ────────────────────────────────────────
    let dims = branch::BranchDims { j: 6, c: 8, d: 4, k: 2, hidden: 4 };
    {
        let q = randn(&mut rng, &[dims.j, dims.c]);
        let params = BranchParams::init(&dims, &mut rng);
        let mut inputs = vec![q];
        inputs.extend(params.tensors());
        let d = dims.clone();
        push(
            "attention_and_heads",
            check_gradients(
                &|t, v| {
                    let p = BranchVars::from_slice(&v[1..]);
                    let alpha = branch::attention_weights(t, v[0], &p, d.k)?;
                    let heads = branch::head_embeddings(t, alpha, v[0], &p)?;
                    let sq = t.square(heads)?;
                    t.sum_all(sq)
                },
                &inputs,
                FD_STEP,
            ),
        )?;
    }
    {
        let p_perp = randn(&mut rng, &[dims.k, dims.d]);
        let params = BranchParams::init(&dims, &mut rng);
        let mut inputs = vec![p_perp];
        inputs.extend(params.tensors());
        push(
            "saffm_fuse",
            check_gradients(
                &|t, v| {
                    let p = BranchVars::from_slice(&v[1..]);
                    let (_, p_star) = branch::saffm_fuse(t, v[0], &p)?;
                    let sq = t.square(p_star)?;
                    t.sum_all(sq)
                },
                &inputs,
                FD_STEP,
            ),
        )?;
    }
    {
        let q_star = randn(&mut rng, &[1, dims.d]);
        let p_perp = randn(&mut rng, &[dims.k, dims.d]);
        let params = BranchParams::init(&dims, &mut rng);
        let mut inputs = vec![q_star, p_perp];
        inputs.extend(params.tensors());
        push(
            "residual_learn",
            check_gradients(
                &|t, v| {
                    let p = BranchVars::from_slice(&v[2..]);
                    let (z_mat, z) = branch::residual_learn(t, v[0], v[1], &p)?;
                    let s1 = t.square(z_mat)?;
                    let s2 = t.square(z)?;
                    let a = t.sum_all(s1)?;
                    let b = t.sum_all(s2)?;
                    t.add(a, b)
                },
                &inputs,
                FD_STEP,
            ),
        )?;
    }

    // ── Loss terms ─────────────────────────────────────────────────
    {
        let feats = randn(&mut rng, &[4, 3]);
        let w = randn(&mut rng, &[3, 3]);
        let b = randn(&mut rng, &[1, 3]);
        push(
            "ce_loss",
            check_gradients(
                &|t, v| losses::ce_loss(t, v[0], &[0, 1, 2, 1], v[1], v[2]),
                &[feats, w, b],
                FD_STEP,
            ),
        )?;
    }
    {
        let feats = randn(&mut rng, &[6, 4]);
        push(
            "hard_triplet",
            check_gradients(
                &|t, v| losses::hard_triplet(t, v[0], &[0, 0, 1, 1, 2, 2], 3.0),
                &[feats],
                FD_STEP,
            ),
        )?;
    }
    {
        let heads: Vec<Tensor> = (0..4).map(|_| randn(&mut rng, &[2, 4])).collect();
        push(
            "ihtl",
            check_gradients(
                &|t, v| losses::ihtl(t, v, &[0, 0, 1, 1], 3.0),
                &heads,
                FD_STEP,
            ),
        )?;
    }
    {
        let p = randn(&mut rng, &[4, 5]);
        push("fdrt", check_gradients(&|t, v| losses::fdrt(t, v[0]), &[p], FD_STEP))?;
    }
    {
        // Raw positive weights; entries straddle the threshold but stay
        // outside the stencil of the clamp kink.
        let mut alpha = Tensor::zeros(&[6, 2]);
        for v in alpha.data_mut() {
            *v = rng.uniform(0.0, 0.02);
            if (*v - 0.01).abs() < 1e-3 {
                *v += 5e-3;
            }
        }
        push(
            "acm_term",
            check_gradients(&|t, v| losses::acm_term(t, v[0], 0.01), &[alpha], FD_STEP),
        )?;
    }

    // ── Composed total objective (two-image backbone + branch + losses) ──
    {
        let err = total_loss_case(&mut rng)?;
        let mut e = err;
        if corrupt == Some("total_loss") {
            e += 1.0;
        }
        reports.push(ComponentReport { name: "total_loss", max_rel_err: e });
    }

    Ok(reports)
}

/// Finite-difference check of the full composed objective on a tiny batch:
/// pooled/projected global features, branch forward per image, all loss
/// terms combined with the default balance weights.
fn total_loss_case(rng: &mut Rng) -> Result<f64> {
    let dims = branch::BranchDims { j: 6, c: 8, d: 4, k: 2, hidden: 4 };
    let n_classes = 2;
    let batch = 4;
    let labels = [0usize, 0, 1, 1];
    let weights = LossWeights {
        lambda1: 1e-4,
        lambda2: 1.0,
        lambda3: 1e-3,
        gamma: 1e-3,
        margin: 3.0,
    };

    // Feature maps are fixed data (not differentiated).
    let maps: Vec<Tensor> = (0..batch).map(|_| randn(rng, &[dims.j, dims.c])).collect();

    // Differentiated inputs: projection, BN affine, branch params, classifiers.
    let mut inputs = Vec::new();
    inputs.push(randn(rng, &[dims.c, dims.d])); // projection weight
    inputs.push(randn(rng, &[1, dims.d])); // bn gain
    inputs.push(randn(rng, &[1, dims.d])); // bn bias
    let params = BranchParams::init(&dims, rng);
    let n_branch = params.tensors().len();
    inputs.extend(params.tensors());
    for _ in 0..3 {
        inputs.push(randn(rng, &[dims.d, n_classes])); // cls weight (q, p, z)
        inputs.push(randn(rng, &[1, n_classes])); // cls bias
    }

    let d = dims.clone();
    let maps_ref = &maps;
    let labels_ref = &labels;
    check_gradients(
        &move |t, v| {
            let proj = v[0];
            let bn_gain = v[1];
            let bn_bias = v[2];
            let p = BranchVars::from_slice(&v[3..3 + n_branch]);
            let cls = &v[3 + n_branch..];

            // Backbone: pool, project, batch-normalize, relu.
            let mut pooled = Vec::new();
            for map in maps_ref {
                let q = t.constant(map.clone())?;
                pooled.push(t.mean_axis(q, Axis::Rows)?);
            }
            let qmat = t.concat_rows(&pooled)?;
            let projd = t.matmul(qmat, proj)?;
            let (bn, _, _) = t.batch_norm(projd, bn_gain, bn_bias, 1e-5)?;
            let q_stars = t.relu(bn)?;

            // Branch per image.
            let mut p_stars = Vec::new();
            let mut zs = Vec::new();
            let mut head_sets = Vec::new();
            let mut fdrt_terms = Vec::new();
            let mut acm_terms = Vec::new();
            for (i, map) in maps_ref.iter().enumerate() {
                let q = t.constant(map.clone())?;
                let q_star = t.row(q_stars, i)?;
                let out = branch::forward_branch(t, q, q_star, &p, d.k, true)?;
                let alpha = out.alpha;
                p_stars.push(out.fused);
                zs.push(out.z.unwrap());
                head_sets.push(out.heads);
                fdrt_terms.push(losses::fdrt(t, out.heads)?);
                acm_terms.push(losses::acm_term(t, alpha, weights.gamma)?);
            }
            let p_mat = t.concat_rows(&p_stars)?;
            let z_mat = t.concat_rows(&zs)?;

            let ce_q = losses::ce_loss(t, q_stars, labels_ref, cls[0], cls[1])?;
            let ce_p = losses::ce_loss(t, p_mat, labels_ref, cls[2], cls[3])?;
            let ce_z = losses::ce_loss(t, z_mat, labels_ref, cls[4], cls[5])?;
            let trip_p = losses::hard_triplet(t, p_mat, labels_ref, weights.margin)?;
            let trip_z = losses::hard_triplet(t, z_mat, labels_ref, weights.margin)?;
            let ihtl = losses::ihtl(t, &head_sets, labels_ref, weights.margin)?;
            let mut fdrt_rows = Vec::new();
            for &f in &fdrt_terms {
                fdrt_rows.push(t.reshape(f, &[1, 1])?);
            }
            let fdrt_stack = t.concat_rows(&fdrt_rows)?;
            let fdrt_mean = t.mean_all(fdrt_stack)?;
            let mut acm_rows = Vec::new();
            for &a in &acm_terms {
                acm_rows.push(t.reshape(a, &[1, 1])?);
            }
            let acm_stack = t.concat_rows(&acm_rows)?;
            let acm_mean = t.mean_all(acm_stack)?;

            let mut total = t.add(ce_p, trip_p)?;
            let fw = t.scale(fdrt_mean, weights.lambda1)?;
            total = t.add(total, fw)?;
            let ren = t.add(ce_z, trip_z)?;
            total = t.add(total, ren)?;
            let iw = t.scale(ihtl, weights.lambda2)?;
            total = t.add(total, iw)?;
            total = t.add(total, ce_q)?;
            let aw = t.scale(acm_mean, weights.lambda3)?;
            t.add(total, aw)
        },
        &inputs,
        FD_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_default_seed() {
        let reports = run_suite(0, None).unwrap();
        assert!(reports.len() >= 25, "expected full coverage, got {}", reports.len());
        for r in &reports {
            assert!(
                r.max_rel_err < GRAD_TOLERANCE,
                "{} exceeded tolerance: {}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn suite_detects_corrupted_gradient() {
        let reports = run_suite(0, Some("matmul")).unwrap();
        let bad = reports.iter().find(|r| r.name == "matmul").unwrap();
        assert!(bad.max_rel_err > GRAD_TOLERANCE);
    }
}
