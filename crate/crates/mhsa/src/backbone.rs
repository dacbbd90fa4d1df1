//! Feature-map providers and the global feature path: average pooling over
//! pixels, a linear projection with batch normalization and ReLU, and a tiny
//! two-stage strided conv encoder standing in for a deep backbone.

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Overall downsampling of the tiny encoder (two stride-2 stages).
pub const ENCODER_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    /// Samples carry precomputed feature maps; the provider is the identity.
    Synthetic,
    /// Samples carry images; two stride-2 3x3 conv + ReLU stages produce the map.
    TinyEncoder,
}

impl Provider {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Provider::Synthetic),
            "tiny_encoder" => Ok(Provider::TinyEncoder),
            other => Err(Error::Config(format!(
                "unknown provider '{other}' (expected synthetic|tiny_encoder)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Provider::Synthetic => "synthetic",
            Provider::TinyEncoder => "tiny_encoder",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub conv1_k: Tensor,
    pub conv1_b: Tensor,
    pub conv2_k: Tensor,
    pub conv2_b: Tensor,
}

impl EncoderParams {
    pub fn init(ci: usize, c: usize, rng: &mut Rng) -> Self {
        let he1 = (2.0 / (9 * ci) as f64).sqrt();
        let he2 = (2.0 / (9 * c) as f64).sqrt();
        EncoderParams {
            conv1_k: Tensor::randn(&[3, 3, ci, c], he1, rng),
            conv1_b: Tensor::zeros(&[1, c]),
            conv2_k: Tensor::randn(&[3, 3, c, c], he2, rng),
            conv2_b: Tensor::zeros(&[1, c]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub conv1_k: Var,
    pub conv1_b: Var,
    pub conv2_k: Var,
    pub conv2_b: Var,
}

/// Mean over the J pixels of a [J, C] map -> [1, C].
pub fn global_pool(tape: &mut Tape, q: Var) -> Result<Var> {
    tape.mean_axis(q, Axis::Rows)
}

/// Batch normalization source at projection time.
pub enum BnMode<'a> {
    /// Use batch statistics; the caller receives them for running updates.
    Train,
    /// Use frozen running statistics.
    Eval { running_mean: &'a [f64], running_var: &'a [f64] },
}

/// Linear projection of pooled features, batch-style normalization over the
/// training batch, then ReLU: [B, C] -> [B, D]. In train mode the returned
/// stats are the batch mean/var per output column.
pub fn project_global(
    tape: &mut Tape,
    pooled: Var,
    proj_w: Var,
    bn_gain: Var,
    bn_bias: Var,
    mode: BnMode,
) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
    let projected = tape.matmul(pooled, proj_w)?;
    match mode {
        BnMode::Train => {
            let (normed, mean, var) = tape.batch_norm(projected, bn_gain, bn_bias, BN_EPS)?;
            let out = tape.relu(normed)?;
            Ok((out, Some((mean, var))))
        }
        BnMode::Eval { running_mean, running_var } => {
            let (batch, d) = tape.value(projected).dims2()?;
            if running_mean.len() != d || running_var.len() != d {
                return Err(Error::Dim(format!(
                    "running statistics of length {}/{} for width {d}",
                    running_mean.len(),
                    running_var.len()
                )));
            }
            let gain = tape.value(bn_gain).data().to_vec();
            let bias = tape.value(bn_bias).data().to_vec();
            let mut scale = vec![0.0; d];
            let mut shift = vec![0.0; d];
            for j in 0..d {
                scale[j] = gain[j] / (running_var[j] + BN_EPS).sqrt();
                shift[j] = bias[j] - running_mean[j] * scale[j];
            }
            let scale = tape.constant(Tensor::row(scale))?;
            let shift = tape.constant(Tensor::row(shift))?;
            let scale_m = tape.repeat_row(scale, batch)?;
            let shift_m = tape.repeat_row(shift, batch)?;
            let scaled = tape.mul(projected, scale_m)?;
            let affine = tape.add(scaled, shift_m)?;
            let out = tape.relu(affine)?;
            Ok((out, None))
        }
    }
}

/// Two stride-2 3x3 conv + ReLU stages: [Hi, Wi, Ci] -> [(Hi/4)*(Wi/4), C].
pub fn tiny_encode(tape: &mut Tape, image: Var, enc: &EncoderVars) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dim(format!("encoder input must be [H,W,C], got {shape:?}")));
    }
    if shape[0] % ENCODER_STRIDE != 0 || shape[1] % ENCODER_STRIDE != 0 {
        return Err(Error::Config(format!(
            "encoder input dims {}x{} must be divisible by {ENCODER_STRIDE}",
            shape[0], shape[1]
        )));
    }
    let h1 = tape.conv2d_stride2(image, enc.conv1_k, enc.conv1_b)?;
    let a1 = tape.relu(h1)?;
    let h2 = tape.conv2d_stride2(a1, enc.conv2_k, enc.conv2_b)?;
    let a2 = tape.relu(h2)?;
    let out_shape = tape.value(a2).shape().to_vec();
    tape.reshape(a2, &[out_shape[0] * out_shape[1], out_shape[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    #[test]
    fn pool_constant_map() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::full(&[6, 4], 2.5)).unwrap();
        let pooled = global_pool(&mut tape, q).unwrap();
        assert_eq!(tape.value(pooled).shape(), &[1, 4]);
        for v in tape.value(pooled).data() {
            assert_eq!(*v, 2.5);
        }
    }

    #[test]
    fn pool_one_hot_pixel() {
        let mut tape = Tape::new();
        let mut m = Tensor::zeros(&[8, 3]);
        m.data_mut()[2 * 3 + 1] = 4.0;
        let q = tape.constant(m).unwrap();
        let pooled = global_pool(&mut tape, q).unwrap();
        assert_eq!(tape.value(pooled).data(), &[0.0, 0.5, 0.0]);
    }

    #[test]
    fn pool_matches_direct_mean() {
        let mut rng = Rng::new(1);
        let m = Tensor::randn(&[10, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(m.clone()).unwrap();
        let pooled = global_pool(&mut tape, q).unwrap();
        for c in 0..5 {
            let mean: f64 = (0..10).map(|j| m.at2(j, c)).sum::<f64>() / 10.0;
            assert!((tape.value(pooled).at2(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_project_permutation_invariant() {
        let mut rng = Rng::new(2);
        let m = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let mut permuted_data = Vec::new();
        for j in [3usize, 0, 5, 1, 4, 2] {
            permuted_data.extend_from_slice(&m.data()[j * 4..(j + 1) * 4]);
        }
        let permuted = Tensor::new(vec![6, 4], permuted_data).unwrap();
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);

        let run = |map: Tensor, w: Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let q = tape.constant(map).unwrap();
            // Batch of two pooled rows so BN has variance.
            let p1 = global_pool(&mut tape, q).unwrap();
            let p2 = tape.scale(p1, -1.0).unwrap();
            let batch = tape.concat_rows(&[p1, p2]).unwrap();
            let wv = tape.constant(w).unwrap();
            let gain = tape.constant(Tensor::full(&[1, 3], 1.0)).unwrap();
            let bias = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
            let (out, _) =
                project_global(&mut tape, batch, wv, gain, bias, BnMode::Train).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run(m, w.clone());
        let b = run(permuted, w);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn project_zero_weight_is_relu_of_normalized_zero() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(3);
        let pooled = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let w = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
        let gain = tape.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
        let bias = tape.constant(Tensor::row(vec![0.5, -0.5])).unwrap();
        let (out, _) = project_global(&mut tape, pooled, w, gain, bias, BnMode::Train).unwrap();
        // Projected zeros: zero-variance batch, eps-regularized -> bias, then ReLU.
        for i in 0..3 {
            assert_eq!(tape.value(out).at2(i, 0), 0.5);
            assert_eq!(tape.value(out).at2(i, 1), 0.0);
        }
    }

    #[test]
    fn project_identical_rows_normalize_to_zero_before_affine() {
        let mut tape = Tape::new();
        let pooled = tape.constant(Tensor::full(&[4, 3], 1.7)).unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.constant(w).unwrap();
        let gain = tape.constant(Tensor::full(&[1, 3], 1.0)).unwrap();
        let bias = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let (out, _) = project_global(&mut tape, pooled, w, gain, bias, BnMode::Train).unwrap();
        for v in tape.value(out).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn pool_project_gradcheck() {
        let mut rng = Rng::new(4);
        let maps: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[6, 4], 1.0, &mut rng)).collect();
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let gain = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let bias = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let mask = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let maps_ref = &maps;
        let err = check_gradients(
            &move |t, v| {
                let mut rows = Vec::new();
                for m in maps_ref {
                    let q = t.constant(m.clone())?;
                    rows.push(global_pool(t, q)?);
                }
                let batch = t.concat_rows(&rows)?;
                let (out, _) = project_global(t, batch, v[0], v[1], v[2], BnMode::Train)?;
                let mk = t.constant(mask.clone())?;
                let weighted = t.mul(out, mk)?;
                let sq = t.square(weighted)?;
                t.sum_all(sq)
            },
            &[w, gain, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn eval_bn_uses_running_stats() {
        let mut tape = Tape::new();
        let pooled = tape.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        let mut w = Tensor::zeros(&[2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let w = tape.constant(w).unwrap();
        let gain = tape.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
        let bias = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let rm = vec![0.5, 0.5];
        let rv = vec![1.0, 4.0];
        let (out, stats) = project_global(
            &mut tape,
            pooled,
            w,
            gain,
            bias,
            BnMode::Eval { running_mean: &rm, running_var: &rv },
        )
        .unwrap();
        assert!(stats.is_none());
        let expect0 = (1.0 - 0.5) / (1.0 + BN_EPS).sqrt();
        let expect1 = (2.0 - 0.5) / (4.0 + BN_EPS).sqrt();
        assert!((tape.value(out).at2(0, 0) - expect0).abs() < 1e-12);
        assert!((tape.value(out).at2(0, 1) - expect1).abs() < 1e-12);
    }

    #[test]
    fn encoder_shape_contract() {
        let mut rng = Rng::new(5);
        let enc = EncoderParams::init(2, 5, &mut rng);
        let mut tape = Tape::new();
        let vars = EncoderVars {
            conv1_k: tape.constant(enc.conv1_k).unwrap(),
            conv1_b: tape.constant(enc.conv1_b).unwrap(),
            conv2_k: tape.constant(enc.conv2_k).unwrap(),
            conv2_b: tape.constant(enc.conv2_b).unwrap(),
        };
        let img = tape.constant(Tensor::randn(&[8, 12, 2], 1.0, &mut rng)).unwrap();
        let q = tiny_encode(&mut tape, img, &vars).unwrap();
        assert_eq!(tape.value(q).shape(), &[(8 / 4) * (12 / 4), 5]);
    }

    #[test]
    fn encoder_zero_image_zero_bias_gives_zero_map() {
        let mut rng = Rng::new(6);
        let enc = EncoderParams::init(2, 3, &mut rng);
        let mut tape = Tape::new();
        let vars = EncoderVars {
            conv1_k: tape.constant(enc.conv1_k).unwrap(),
            conv1_b: tape.constant(enc.conv1_b).unwrap(),
            conv2_k: tape.constant(enc.conv2_k).unwrap(),
            conv2_b: tape.constant(enc.conv2_b).unwrap(),
        };
        let img = tape.constant(Tensor::zeros(&[4, 4, 2])).unwrap();
        let q = tiny_encode(&mut tape, img, &vars).unwrap();
        assert!(tape.value(q).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_rejects_indivisible_dims() {
        let mut rng = Rng::new(7);
        let enc = EncoderParams::init(2, 3, &mut rng);
        let mut tape = Tape::new();
        let vars = EncoderVars {
            conv1_k: tape.constant(enc.conv1_k).unwrap(),
            conv1_b: tape.constant(enc.conv1_b).unwrap(),
            conv2_k: tape.constant(enc.conv2_k).unwrap(),
            conv2_b: tape.constant(enc.conv2_b).unwrap(),
        };
        let img = tape.constant(Tensor::zeros(&[6, 4, 2])).unwrap();
        assert!(matches!(
            tiny_encode(&mut tape, img, &vars),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoder_gradcheck() {
        let mut rng = Rng::new(8);
        let img = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let enc = EncoderParams::init(2, 3, &mut rng);
        let img_ref = img.clone();
        let err = check_gradients(
            &move |t, v| {
                let vars = EncoderVars {
                    conv1_k: v[0],
                    conv1_b: v[1],
                    conv2_k: v[2],
                    conv2_b: v[3],
                };
                let image = t.constant(img_ref.clone())?;
                let q = tiny_encode(t, image, &vars)?;
                let sq = t.square(q)?;
                t.sum_all(sq)
            },
            &[enc.conv1_k, enc.conv1_b, enc.conv2_k, enc.conv2_b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
