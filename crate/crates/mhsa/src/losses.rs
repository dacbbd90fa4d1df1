//! Training objectives: cross entropy, batch-hard triplet, the improved
//! head-pair triplet, the Gram-diversity term, the attention-competition
//! term, and their weighted compositions.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Balance parameters. Defaults are the published operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1e-4, lambda2: 1.0, lambda3: 1e-3, gamma: 1e-3, margin: 3.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::Config("balance weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean over the batch of the negative log-softmax at the true label,
/// through an affine classifier.
pub fn ce_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    cls_weight: Var,
    cls_bias: Var,
) -> Result<Var> {
    let (batch, _) = tape.value(features).dims2()?;
    let (_, n_classes) = tape.value(cls_weight).dims2()?;
    if labels.len() != batch {
        return Err(Error::Data(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Data(format!(
                "label {l} at position {i} outside class range 0..{n_classes}"
            )));
        }
    }
    let logits = tape.matmul(features, cls_weight)?;
    let bias = tape.repeat_row(cls_bias, batch)?;
    let shifted = tape.add(logits, bias)?;
    let log_probs = tape.log_softmax_rows(shifted)?;
    let coords: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let picked = tape.gather(log_probs, &coords)?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -1.0)
}

fn check_triplet_labels(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Data(
            "triplet losses need at least two identities in the batch".into(),
        ));
    }
    for (id, n) in counts {
        if n < 2 {
            return Err(Error::Data(format!(
                "identity {id} appears once; the sampler contract requires >= 2 instances"
            )));
        }
    }
    Ok(())
}

/// Batch-hard triplet on squared Euclidean distances: per anchor, the
/// hardest positive is the farthest same-identity sample (self excluded) and
/// the hardest negative the closest different-identity sample; the loss is
/// the mean hinge over anchors.
pub fn hard_triplet(tape: &mut Tape, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let (batch, _) = tape.value(features).dims2()?;
    if labels.len() != batch {
        return Err(Error::Data(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    check_triplet_labels(labels)?;
    let dist = tape.pairwise_sqdist(features, features)?;
    let dv = tape.value(dist).clone();

    let mut pos_coords = Vec::with_capacity(batch);
    let mut neg_coords = Vec::with_capacity(batch);
    for a in 0..batch {
        let mut hardest_pos: Option<(f64, usize)> = None;
        let mut hardest_neg: Option<(f64, usize)> = None;
        for o in 0..batch {
            let d = dv.at2(a, o);
            if labels[o] == labels[a] {
                if o != a && hardest_pos.is_none_or(|(best, _)| d > best) {
                    hardest_pos = Some((d, o));
                }
            } else if hardest_neg.is_none_or(|(best, _)| d < best) {
                hardest_neg = Some((d, o));
            }
        }
        pos_coords.push((a, hardest_pos.expect("positive guaranteed by label check").1));
        neg_coords.push((a, hardest_neg.expect("negative guaranteed by label check").1));
    }

    let hard_pos = tape.gather(dist, &pos_coords)?;
    let hard_neg = tape.gather(dist, &neg_coords)?;
    let diff = tape.sub(hard_pos, hard_neg)?;
    let m = tape.constant(crate::autodiff::Tensor::row(vec![margin; batch]))?;
    let shifted = tape.add(diff, m)?;
    let hinged = tape.relu(shifted)?;
    tape.mean_all(hinged)
}

/// Improved hard triplet over head embeddings. Each image contributes a
/// [K, D] block; between two images the positive distance is the max over
/// all K x K head pairs and the negative the min, then batch-hard mining
/// runs per anchor image.
pub fn ihtl(tape: &mut Tape, head_sets: &[Var], labels: &[usize], margin: f64) -> Result<Var> {
    let batch = head_sets.len();
    if labels.len() != batch {
        return Err(Error::Data(format!("{} labels for {batch} head sets", labels.len())));
    }
    if batch == 0 {
        return Err(Error::Data("ihtl needs a non-empty batch".into()));
    }
    check_triplet_labels(labels)?;
    let (k, _) = tape.value(head_sets[0]).dims2()?;
    for &h in head_sets {
        let (k2, _) = tape.value(h).dims2()?;
        if k2 != k {
            return Err(Error::Dim(format!("inconsistent head counts {k} vs {k2}")));
        }
    }
    let all = tape.concat_rows(head_sets)?; // [(B*K), D]
    let dist = tape.pairwise_sqdist(all, all)?;
    let dv = tape.value(dist).clone();

    let mut pos_coords = Vec::with_capacity(batch);
    let mut neg_coords = Vec::with_capacity(batch);
    for a in 0..batch {
        let mut hardest_pos: Option<(f64, (usize, usize))> = None;
        let mut hardest_neg: Option<(f64, (usize, usize))> = None;
        for o in 0..batch {
            if o == a {
                continue;
            }
            for i in 0..k {
                for j in 0..k {
                    let r = a * k + i;
                    let c = o * k + j;
                    let d = dv.at2(r, c);
                    if labels[o] == labels[a] {
                        if hardest_pos.is_none_or(|(best, _)| d > best) {
                            hardest_pos = Some((d, (r, c)));
                        }
                    } else if hardest_neg.is_none_or(|(best, _)| d < best) {
                        hardest_neg = Some((d, (r, c)));
                    }
                }
            }
        }
        pos_coords.push(hardest_pos.expect("positive guaranteed by label check").1);
        neg_coords.push(hardest_neg.expect("negative guaranteed by label check").1);
    }

    let hard_pos = tape.gather(dist, &pos_coords)?;
    let hard_neg = tape.gather(dist, &neg_coords)?;
    let diff = tape.sub(hard_pos, hard_neg)?;
    let m = tape.constant(crate::autodiff::Tensor::row(vec![margin; batch]))?;
    let shifted = tape.add(diff, m)?;
    let hinged = tape.relu(shifted)?;
    tape.mean_all(hinged)
}

/// Gram-diversity of the head embeddings: rows are L2-normalized, then
/// ||P P^T - I||_F / K^2.
pub fn fdrt(tape: &mut Tape, heads: Var) -> Result<Var> {
    let (k, _) = tape.value(heads).dims2()?;
    let normalized = tape.l2_normalize_rows(heads)?;
    let nt = tape.transpose(normalized)?;
    let gram = tape.matmul(normalized, nt)?;
    let mut eye = crate::autodiff::Tensor::zeros(&[k, k]);
    for i in 0..k {
        eye.data_mut()[i * k + i] = 1.0;
    }
    let eye = tape.constant(eye)?;
    let deviation = tape.sub(gram, eye)?;
    let norm = tape.frobenius_norm(deviation)?;
    tape.scale(norm, 1.0 / (k * k) as f64)
}

/// Attention competition: sum over all entries of min(alpha, gamma)^2.
pub fn acm_term(tape: &mut Tape, alpha: Var, gamma: f64) -> Result<Var> {
    if gamma <= 0.0 {
        return Err(Error::Config(format!("gamma must be > 0, got {gamma}")));
    }
    let clamped = tape.min_const(alpha, gamma)?;
    let sq = tape.square(clamped)?;
    tape.sum_all(sq)
}

/// Per-image loss inputs gathered from the forward pass of a batch.
pub struct BatchFeatures {
    /// [B, D] global features.
    pub q_stars: Var,
    /// [B, Dp] fused local features.
    pub p_stars: Var,
    /// [B, D] residual-context features; absent when RLM is disabled.
    pub zs: Option<Var>,
    /// Per image: [K, D] head embeddings.
    pub head_sets: Vec<Var>,
    /// Per image: [J, K] attention weights.
    pub alphas: Vec<Var>,
    pub labels: Vec<usize>,
}

/// Classifier heads registered on the tape (weight, bias).
pub struct ClassifierVars {
    pub q: (Var, Var),
    pub p: (Var, Var),
    pub z: Option<(Var, Var)>,
}

/// Scalar values of every component for logging, plus the total var.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossValues {
    pub ce_q: f64,
    pub ce_p: f64,
    pub ce_z: f64,
    pub triplet_p: f64,
    pub triplet_z: f64,
    pub fdrt: f64,
    pub ihtl: f64,
    pub acm: f64,
    pub total: f64,
}

fn mean_of_scalars(tape: &mut Tape, scalars: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(scalars.len());
    for &s in scalars {
        rows.push(tape.reshape(s, &[1, 1])?);
    }
    let stacked = tape.concat_rows(&rows)?;
    tape.mean_all(stacked)
}

/// The branch objective: [CE(p*) + triplet(p*)] + lambda1 * mean FDRT
/// + [CE(z) + triplet(z)] + lambda2 * IHTL. The residual terms drop out when
/// RLM is disabled.
pub fn branch_loss(
    tape: &mut Tape,
    batch: &BatchFeatures,
    cls: &ClassifierVars,
    w: &LossWeights,
) -> Result<(Var, LossValues)> {
    let mut values = LossValues::default();

    let ce_p = ce_loss(tape, batch.p_stars, &batch.labels, cls.p.0, cls.p.1)?;
    let trip_p = hard_triplet(tape, batch.p_stars, &batch.labels, w.margin)?;
    values.ce_p = tape.value(ce_p).data()[0];
    values.triplet_p = tape.value(trip_p).data()[0];
    let mut total = tape.add(ce_p, trip_p)?;

    let fdrt_terms: Vec<Var> = batch
        .head_sets
        .iter()
        .map(|&h| fdrt(tape, h))
        .collect::<Result<_>>()?;
    let fdrt_mean = mean_of_scalars(tape, &fdrt_terms)?;
    values.fdrt = tape.value(fdrt_mean).data()[0];
    let fdrt_weighted = tape.scale(fdrt_mean, w.lambda1)?;
    total = tape.add(total, fdrt_weighted)?;

    if let (Some(zs), Some(cls_z)) = (batch.zs, cls.z.as_ref()) {
        let ce_z = ce_loss(tape, zs, &batch.labels, cls_z.0, cls_z.1)?;
        let trip_z = hard_triplet(tape, zs, &batch.labels, w.margin)?;
        values.ce_z = tape.value(ce_z).data()[0];
        values.triplet_z = tape.value(trip_z).data()[0];
        let ren = tape.add(ce_z, trip_z)?;
        total = tape.add(total, ren)?;
    }

    let ihtl_term = ihtl(tape, &batch.head_sets, &batch.labels, w.margin)?;
    values.ihtl = tape.value(ihtl_term).data()[0];
    let ihtl_weighted = tape.scale(ihtl_term, w.lambda2)?;
    total = tape.add(total, ihtl_weighted)?;

    values.total = tape.value(total).data()[0];
    Ok((total, values))
}

/// Total objective: branch loss + optional global CE + lambda3 * mean ACM.
/// `train_gfb_ce = false` is the dagger variant (global CE dropped).
pub fn total_loss(
    tape: &mut Tape,
    batch: &BatchFeatures,
    cls: &ClassifierVars,
    w: &LossWeights,
    train_gfb_ce: bool,
) -> Result<(Var, LossValues)> {
    let (mut total, mut values) = branch_loss(tape, batch, cls, w)?;

    if train_gfb_ce {
        let ce_q = ce_loss(tape, batch.q_stars, &batch.labels, cls.q.0, cls.q.1)?;
        values.ce_q = tape.value(ce_q).data()[0];
        total = tape.add(total, ce_q)?;
    }

    let acm_terms: Vec<Var> = batch
        .alphas
        .iter()
        .map(|&a| acm_term(tape, a, w.gamma))
        .collect::<Result<_>>()?;
    let acm_mean = mean_of_scalars(tape, &acm_terms)?;
    values.acm = tape.value(acm_mean).data()[0];
    let acm_weighted = tape.scale(acm_mean, w.lambda3)?;
    total = tape.add(total, acm_weighted)?;

    values.total = tape.value(total).data()[0];
    Ok((total, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::Rng;

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::randn(shape, 1.0, &mut r)
    }

    #[test]
    fn ce_uniform_logits_is_ln_n() {
        let mut tape = Tape::new();
        let feats = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let w = tape.constant(Tensor::zeros(&[4, 5])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1, 5])).unwrap();
        let loss = ce_loss(&mut tape, feats, &[0, 2, 4], w, b).unwrap();
        assert!((tape.value(loss).data()[0] - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_dominant_true_logit_approaches_zero() {
        let mut tape = Tape::new();
        let feats = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let mut w = Tensor::zeros(&[2, 3]);
        w.data_mut()[0] = 50.0; // feature dim 0 pushes class 0
        let w = tape.constant(w).unwrap();
        let b = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let loss = ce_loss(&mut tape, feats, &[0], w, b).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let feats = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let w = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(
            ce_loss(&mut tape, feats, &[3], w, b),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn triplet_separated_clusters_is_zero() {
        // Two tight clusters 10 apart: intra distance ~1, inter ~100.
        let mut tape = Tape::new();
        let data = vec![
            0.0, 0.0, //
            1.0, 0.0, //
            10.0, 0.0, //
            11.0, 0.0,
        ];
        let f = tape.constant(Tensor::new(vec![4, 2], data).unwrap()).unwrap();
        let loss = hard_triplet(&mut tape, f, &[0, 0, 1, 1], 3.0).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn triplet_identical_features_is_margin() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(&[4, 3], 0.7)).unwrap();
        let loss = hard_triplet(&mut tape, f, &[0, 0, 1, 1], 3.0).unwrap();
        assert_eq!(tape.value(loss).data()[0], 3.0);
    }

    #[test]
    fn triplet_rejects_singleton_identity() {
        let mut tape = Tape::new();
        let f = tape.constant(randn(1, &[3, 2])).unwrap();
        assert!(matches!(
            hard_triplet(&mut tape, f, &[0, 0, 1], 3.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn triplet_matches_exhaustive_enumeration() {
        // Brute force: per anchor enumerate all positives and negatives and
        // take the batch-hard value, then hinge and average.
        for seed in 0..5u64 {
            let batch = 8;
            let dim = 4;
            let feats = randn(100 + seed, &[batch, dim]);
            let labels = [0usize, 0, 1, 1, 2, 2, 3, 3];
            let margin = 3.0;

            let mut tape = Tape::new();
            let f = tape.constant(feats.clone()).unwrap();
            let loss = hard_triplet(&mut tape, f, &labels, margin).unwrap();

            let d2 = |a: usize, b: usize| -> f64 {
                (0..dim)
                    .map(|t| {
                        let diff = feats.at2(a, t) - feats.at2(b, t);
                        diff * diff
                    })
                    .sum()
            };
            let mut total = 0.0;
            for a in 0..batch {
                let mut hp = f64::NEG_INFINITY;
                let mut hn = f64::INFINITY;
                for o in 0..batch {
                    if o == a {
                        continue;
                    }
                    if labels[o] == labels[a] {
                        hp = hp.max(d2(a, o));
                    } else {
                        hn = hn.min(d2(a, o));
                    }
                }
                total += (margin + hp - hn).max(0.0);
            }
            let expect = total / batch as f64;
            assert!(
                (tape.value(loss).data()[0] - expect).abs() < 1e-10,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn ihtl_k1_reduces_to_hard_triplet() {
        for seed in 0..20u64 {
            let batch = 6;
            let dim = 4;
            let labels = [0usize, 0, 1, 1, 2, 2];
            let feats = randn(200 + seed, &[batch, dim]);

            let mut tape = Tape::new();
            let f = tape.constant(feats.clone()).unwrap();
            let plain = hard_triplet(&mut tape, f, &labels, 3.0).unwrap();

            let heads: Vec<_> = (0..batch)
                .map(|i| {
                    let row: Vec<f64> = (0..dim).map(|t| feats.at2(i, t)).collect();
                    tape.constant(Tensor::row(row)).unwrap()
                })
                .collect();
            let improved = ihtl(&mut tape, &heads, &labels, 3.0).unwrap();
            assert!(
                (tape.value(plain).data()[0] - tape.value(improved).data()[0]).abs() < 1e-12,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn ihtl_identical_embeddings_is_margin() {
        let mut tape = Tape::new();
        let heads: Vec<_> = (0..4)
            .map(|_| tape.constant(Tensor::full(&[2, 3], 1.5)).unwrap())
            .collect();
        let loss = ihtl(&mut tape, &heads, &[0, 0, 1, 1], 3.0).unwrap();
        assert_eq!(tape.value(loss).data()[0], 3.0);
    }

    #[test]
    fn ihtl_matches_quadruple_loop_brute_force() {
        for seed in 0..5u64 {
            let batch = 6;
            let k = 2;
            let dim = 4;
            let labels = [0usize, 0, 1, 1, 2, 2];
            let margin = 3.0;
            let mut rng = Rng::new(300 + seed);
            let sets: Vec<Tensor> =
                (0..batch).map(|_| Tensor::randn(&[k, dim], 1.0, &mut rng)).collect();

            let mut tape = Tape::new();
            let head_vars: Vec<_> =
                sets.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
            let loss = ihtl(&mut tape, &head_vars, &labels, margin).unwrap();

            let d2 = |a: &Tensor, i: usize, b: &Tensor, j: usize| -> f64 {
                (0..dim)
                    .map(|t| {
                        let diff = a.at2(i, t) - b.at2(j, t);
                        diff * diff
                    })
                    .sum()
            };
            let mut total = 0.0;
            for a in 0..batch {
                let mut hp = f64::NEG_INFINITY;
                let mut hn = f64::INFINITY;
                for o in 0..batch {
                    if o == a {
                        continue;
                    }
                    for i in 0..k {
                        for j in 0..k {
                            let d = d2(&sets[a], i, &sets[o], j);
                            if labels[o] == labels[a] {
                                hp = hp.max(d);
                            } else {
                                hn = hn.min(d);
                            }
                        }
                    }
                }
                total += (margin + hp - hn).max(0.0);
            }
            let expect = total / batch as f64;
            assert!(
                (tape.value(loss).data()[0] - expect).abs() < 1e-10,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn fdrt_orthonormal_rows_is_zero() {
        let mut tape = Tape::new();
        let p = tape
            .constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let loss = fdrt(&mut tape, p).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn fdrt_identical_rows_k2() {
        let mut tape = Tape::new();
        let p = tape
            .constant(Tensor::new(vec![2, 3], vec![2.0, 1.0, -1.0, 2.0, 1.0, -1.0]).unwrap())
            .unwrap();
        let loss = fdrt(&mut tape, p).unwrap();
        let expect = 2.0f64.sqrt() / 4.0;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn fdrt_row_rescaling_invariance() {
        let p = randn(7, &[4, 5]);
        let mut scaled = p.clone();
        for c in 0..5 {
            scaled.data_mut()[c] *= 3.5; // row 0
            scaled.data_mut()[2 * 5 + c] *= 0.02; // row 2
        }
        let mut tape = Tape::new();
        let a = tape.constant(p).unwrap();
        let b = tape.constant(scaled).unwrap();
        let la = fdrt(&mut tape, a).unwrap();
        let lb = fdrt(&mut tape, b).unwrap();
        assert!((tape.value(la).data()[0] - tape.value(lb).data()[0]).abs() < 1e-10);
    }

    #[test]
    fn fdrt_rejects_zero_row() {
        let mut tape = Tape::new();
        let p = tape
            .constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        assert!(matches!(fdrt(&mut tape, p), Err(Error::Numeric(_))));
    }

    #[test]
    fn fdrt_matches_explicit_gram_assembly() {
        let p = randn(8, &[4, 6]);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone()).unwrap();
        let loss = fdrt(&mut tape, pv).unwrap();

        // Straight-line recomputation.
        let k = 4;
        let d = 6;
        let mut rows = vec![vec![0.0; d]; k];
        for i in 0..k {
            let norm: f64 = (0..d).map(|t| p.at2(i, t) * p.at2(i, t)).sum::<f64>().sqrt();
            for t in 0..d {
                rows[i][t] = p.at2(i, t) / norm;
            }
        }
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                let g: f64 = (0..d).map(|t| rows[i][t] * rows[j][t]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                acc += (g - target) * (g - target);
            }
        }
        let expect = acc.sqrt() / (k * k) as f64;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn acm_saturated_equals_bound() {
        // K=1 forces alpha to be identically 1, so every entry clamps to
        // gamma and the loss is J * gamma^2 up to summation rounding.
        let mut tape = Tape::new();
        let gamma = 1e-3;
        let alpha = tape.constant(Tensor::full(&[24, 1], 1.0)).unwrap();
        let loss = acm_term(&mut tape, alpha, gamma).unwrap();
        let expect = 24.0 * gamma * gamma;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-18);
        assert!((expect - 2.4e-5).abs() < 1e-18);
    }

    #[test]
    fn acm_below_threshold_is_sum_of_squares() {
        let mut tape = Tape::new();
        let alpha = Tensor::new(vec![2, 2], vec![1e-4, 2e-4, 3e-4, 4e-4]).unwrap();
        let av = tape.constant(alpha.clone()).unwrap();
        let loss = acm_term(&mut tape, av, 1e-3).unwrap();
        let expect: f64 = alpha.data().iter().map(|v| v * v).sum();
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-20);
    }

    #[test]
    fn acm_monotone_in_gamma() {
        let alpha = {
            let mut t = Tensor::zeros(&[6, 3]);
            let mut r = Rng::new(9);
            for v in t.data_mut() {
                *v = r.uniform(0.0, 0.02);
            }
            t
        };
        let mut prev = 0.0;
        for gamma in [1e-4, 1e-3, 5e-3, 1e-2, 0.1, 1.0] {
            let mut tape = Tape::new();
            let av = tape.constant(alpha.clone()).unwrap();
            let loss = acm_term(&mut tape, av, gamma).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v >= prev, "gamma {gamma}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = Rng::new(10);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng)).unwrap();
            let t = hard_triplet(&mut tape, f, &[0, 0, 1, 1], 3.0).unwrap();
            assert!(tape.value(t).data()[0] >= 0.0);
            let p = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
            let fd = fdrt(&mut tape, p).unwrap();
            assert!(tape.value(fd).data()[0] >= 0.0);
            let a = tape.constant(Tensor::randn(&[5, 2], 1.0, &mut rng)).unwrap();
            let sq = tape.square(a).unwrap(); // nonnegative weights
            let ac = acm_term(&mut tape, sq, 1e-3).unwrap();
            let bound = 5.0 * 2.0 * 1e-3 * 1e-3;
            let v = tape.value(ac).data()[0];
            assert!(v >= 0.0 && v <= bound + 1e-18);
        }
    }

    #[test]
    fn ihtl_dominates_single_head_triplet() {
        // Max-max positives dominate any fixed head pairing; min-min
        // negatives are dominated, so IHTL >= hard_triplet on each head.
        let mut rng = Rng::new(11);
        let batch = 6;
        let k = 3;
        let dim = 4;
        let labels = [0usize, 0, 1, 1, 2, 2];
        let sets: Vec<Tensor> =
            (0..batch).map(|_| Tensor::randn(&[k, dim], 1.0, &mut rng)).collect();
        let mut tape = Tape::new();
        let head_vars: Vec<_> = sets.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let improved = ihtl(&mut tape, &head_vars, &labels, 3.0).unwrap();
        let iv = tape.value(improved).data()[0];
        for head in 0..k {
            let rows: Vec<f64> = sets
                .iter()
                .flat_map(|s| (0..dim).map(|t| s.at2(head, t)).collect::<Vec<_>>())
                .collect();
            let f = tape.constant(Tensor::new(vec![batch, dim], rows).unwrap()).unwrap();
            let plain = hard_triplet(&mut tape, f, &labels, 3.0).unwrap();
            assert!(iv >= tape.value(plain).data()[0] - 1e-12, "head {head}");
        }
    }
}
