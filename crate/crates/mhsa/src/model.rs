//! The trainable model: backbone surrogate + attention branch + one linear
//! classifier per feature stream, with container-backed checkpoints.

use std::path::Path;

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{self, BnMode, EncoderParams, EncoderVars, Provider};
use crate::branch::{self, BranchDims, BranchParams, BranchVars, FusionMode};
use crate::container::{self, Entry};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::losses::{BatchFeatures, ClassifierVars};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub provider: Provider,
    pub hf: usize,
    pub wf: usize,
    pub c: usize,
    pub d: usize,
    pub k: usize,
    /// Attention bottleneck width; scales as C/4 by default.
    pub hidden: usize,
    /// Encoder input channels (tiny-encoder provider only).
    pub ci: usize,
    pub n_classes: usize,
    pub fusion: FusionMode,
    pub rlm_enabled: bool,
    pub train_gfb_ce: bool,
    pub branch_enabled: bool,
}

impl ModelConfig {
    pub fn j(&self) -> usize {
        self.hf * self.wf
    }

    pub fn branch_dims(&self) -> BranchDims {
        BranchDims { j: self.j(), c: self.c, d: self.d, k: self.k, hidden: self.hidden }
    }

    pub fn local_len(&self) -> usize {
        self.fusion.feature_len(self.d, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hf == 0 || self.wf == 0 || self.c == 0 || self.d == 0 || self.ci == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 identity classes, got {}",
                self.n_classes
            )));
        }
        if self.branch_enabled {
            self.branch_dims().validate()?;
        }
        Ok(())
    }
}

/// Named parameters in a fixed registration order.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
}

fn classifier_init(in_dim: usize, n_classes: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    let std = (1.0 / in_dim as f64).sqrt();
    (Tensor::randn(&[in_dim, n_classes], std, rng), Tensor::zeros(&[1, n_classes]))
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, t: Tensor| {
            names.push(name.to_string());
            tensors.push(t);
        };

        let proj_std = (2.0 / cfg.c as f64).sqrt();
        push("backbone.proj_w", Tensor::randn(&[cfg.c, cfg.d], proj_std, rng));
        push("backbone.bn_gain", Tensor::full(&[1, cfg.d], 1.0));
        push("backbone.bn_bias", Tensor::zeros(&[1, cfg.d]));

        if cfg.provider == Provider::TinyEncoder {
            let enc = EncoderParams::init(cfg.ci, cfg.c, rng);
            push("encoder.conv1_k", enc.conv1_k);
            push("encoder.conv1_b", enc.conv1_b);
            push("encoder.conv2_k", enc.conv2_k);
            push("encoder.conv2_b", enc.conv2_b);
        }

        if cfg.branch_enabled {
            let bp = BranchParams::init(&cfg.branch_dims(), rng);
            for (field, tensor) in branch::FIELDS.iter().zip(bp.tensors()) {
                push(&format!("branch.{field}"), tensor);
            }
        }

        let (w, b) = classifier_init(cfg.d, cfg.n_classes, rng);
        push("cls_q.w", w);
        push("cls_q.b", b);
        if cfg.branch_enabled {
            let (w, b) = classifier_init(cfg.local_len(), cfg.n_classes, rng);
            push("cls_p.w", w);
            push("cls_p.b", b);
            let (w, b) = classifier_init(cfg.d, cfg.n_classes, rng);
            push("cls_z.w", w);
            push("cls_z.b", b);
        }

        let d = cfg.d;
        Ok(Model { cfg, names, tensors, bn_mean: vec![0.0; d], bn_var: vec![1.0; d] })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.numel()).collect()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self.index(name)?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::Dim(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                self.tensors[i].shape(),
                t.shape()
            )));
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Raw parameter buffers in registration order, for the optimizer.
    pub fn param_data(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data().to_vec()).collect()
    }

    pub fn apply_param_data(&mut self, data: Vec<Vec<f64>>) -> Result<()> {
        if data.len() != self.tensors.len() {
            return Err(Error::Contract("parameter count mismatch".into()));
        }
        for (t, d) in self.tensors.iter_mut().zip(data) {
            if t.numel() != d.len() {
                return Err(Error::Dim("parameter size mismatch".into()));
            }
            t.data_mut().copy_from_slice(&d);
        }
        Ok(())
    }

    pub fn update_bn_stats(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for j in 0..self.bn_mean.len() {
            self.bn_mean[j] = (1.0 - momentum) * self.bn_mean[j] + momentum * mean[j];
            self.bn_var[j] = (1.0 - momentum) * self.bn_var[j] + momentum * var[j];
        }
    }

    // ── Forward ─────────────────────────────────────────────────────

    /// Run the whole model over a batch of samples. In train phase the
    /// parameters are differentiable leaves and batch normalization uses
    /// batch statistics (returned for the running update).
    pub fn forward_batch(
        &self,
        samples: &[&LabeledSample],
        labels: Vec<usize>,
        train: bool,
    ) -> Result<ForwardPass> {
        if samples.is_empty() {
            return Err(Error::Contract("forward pass needs at least one sample".into()));
        }
        let mut tape = Tape::new();
        let param_vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), train))
            .collect::<Result<_>>()?;
        let at = |name: &str| -> Result<Var> { self.index(name).map(|i| param_vars[i]) };

        let encoder = if self.cfg.provider == Provider::TinyEncoder {
            Some(EncoderVars {
                conv1_k: at("encoder.conv1_k")?,
                conv1_b: at("encoder.conv1_b")?,
                conv2_k: at("encoder.conv2_k")?,
                conv2_b: at("encoder.conv2_b")?,
            })
        } else {
            None
        };

        // Feature maps per image.
        let mut maps = Vec::with_capacity(samples.len());
        for s in samples {
            let input = tape.constant(s.tensor.clone())?;
            let map = match &encoder {
                Some(enc) => backbone::tiny_encode(&mut tape, input, enc)?,
                None => {
                    let (j, c) = tape.value(input).dims2()?;
                    if j != self.cfg.j() || c != self.cfg.c {
                        return Err(Error::Config(format!(
                            "sample map is {j}x{c}, run configuration expects {}x{}",
                            self.cfg.j(),
                            self.cfg.c
                        )));
                    }
                    input
                }
            };
            maps.push(map);
        }

        // Global path: pool, project, normalize, relu.
        let mut pooled = Vec::with_capacity(maps.len());
        for &m in &maps {
            pooled.push(backbone::global_pool(&mut tape, m)?);
        }
        let pooled_mat = tape.concat_rows(&pooled)?;
        let mode = if train {
            BnMode::Train
        } else {
            BnMode::Eval { running_mean: &self.bn_mean, running_var: &self.bn_var }
        };
        let (q_stars, bn_stats) = backbone::project_global(
            &mut tape,
            pooled_mat,
            at("backbone.proj_w")?,
            at("backbone.bn_gain")?,
            at("backbone.bn_bias")?,
            mode,
        )?;

        let cls_q = (at("cls_q.w")?, at("cls_q.b")?);
        let batch = if self.cfg.branch_enabled {
            let bvars = BranchVars::from_slice(
                &branch::FIELDS
                    .iter()
                    .map(|f| at(&format!("branch.{f}")))
                    .collect::<Result<Vec<_>>>()?,
            );
            let mut fused_rows = Vec::with_capacity(samples.len());
            let mut z_rows = Vec::with_capacity(samples.len());
            let mut head_sets = Vec::with_capacity(samples.len());
            let mut alphas = Vec::with_capacity(samples.len());
            let mut betas = Vec::with_capacity(samples.len());
            for (i, &map) in maps.iter().enumerate() {
                let q_star = tape.row(q_stars, i)?;
                let out = branch::forward_branch_with(
                    &mut tape,
                    map,
                    q_star,
                    &bvars,
                    self.cfg.k,
                    self.cfg.fusion,
                    self.cfg.rlm_enabled,
                )?;
                fused_rows.push(out.fused);
                if let Some(z) = out.z {
                    z_rows.push(z);
                }
                head_sets.push(out.heads);
                alphas.push(out.alpha);
                betas.push(out.beta);
            }
            let p_stars = tape.concat_rows(&fused_rows)?;
            let zs = if self.cfg.rlm_enabled {
                Some(tape.concat_rows(&z_rows)?)
            } else {
                None
            };
            let cls = ClassifierVars {
                q: cls_q,
                p: (at("cls_p.w")?, at("cls_p.b")?),
                z: if self.cfg.rlm_enabled {
                    Some((at("cls_z.w")?, at("cls_z.b")?))
                } else {
                    None
                },
            };
            Some(BranchBatch {
                features: BatchFeatures {
                    q_stars,
                    p_stars,
                    zs,
                    head_sets,
                    alphas,
                    labels: labels.clone(),
                },
                betas,
                cls,
            })
        } else {
            None
        };

        Ok(ForwardPass { tape, param_vars, q_stars, batch, cls_q, bn_stats, labels })
    }

    /// Per-sample evaluation features under frozen statistics.
    pub fn eval_features(&self, sample: &LabeledSample) -> Result<EvalFeatures> {
        let pass = self.forward_batch(&[sample], vec![0], false)?;
        let q_star = pass.tape.value(pass.q_stars).data().to_vec();
        match &pass.batch {
            Some(b) => {
                let local = pass.tape.value(b.features.p_stars).data().to_vec();
                let alpha = pass.tape.value(b.features.alphas[0]).clone();
                let beta = b.betas[0].map(|v| pass.tape.value(v).data().to_vec());
                Ok(EvalFeatures { q_star, local: Some(local), alpha: Some(alpha), beta })
            }
            None => Ok(EvalFeatures { q_star, local: None, alpha: None, beta: None }),
        }
    }

    // ── Checkpointing ───────────────────────────────────────────────

    pub fn to_entries(&self) -> Vec<Entry> {
        let cfg = &self.cfg;
        let meta = vec![
            ("meta/provider", provider_code(cfg.provider)),
            ("meta/hf", cfg.hf as f64),
            ("meta/wf", cfg.wf as f64),
            ("meta/c", cfg.c as f64),
            ("meta/d", cfg.d as f64),
            ("meta/k", cfg.k as f64),
            ("meta/hidden", cfg.hidden as f64),
            ("meta/ci", cfg.ci as f64),
            ("meta/n_classes", cfg.n_classes as f64),
            ("meta/fusion", fusion_code(cfg.fusion)),
            ("meta/rlm_enabled", cfg.rlm_enabled as u8 as f64),
            ("meta/train_gfb_ce", cfg.train_gfb_ce as u8 as f64),
            ("meta/branch_enabled", cfg.branch_enabled as u8 as f64),
        ];
        let mut entries: Vec<Entry> = meta
            .into_iter()
            .map(|(name, v)| Entry::new(name, Tensor::scalar(v)))
            .collect();
        entries.push(Entry::new("state/bn_mean", Tensor::row(self.bn_mean.clone())));
        entries.push(Entry::new("state/bn_var", Tensor::row(self.bn_var.clone())));
        for (name, t) in self.names.iter().zip(&self.tensors) {
            entries.push(Entry::new(format!("param/{name}"), t.clone()));
        }
        entries
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        container::save(path, &self.to_entries())
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> {
            Ok(container::find(entries, name)?.data()[0])
        };
        let cfg = ModelConfig {
            provider: provider_from_code(scalar("meta/provider")?)?,
            hf: scalar("meta/hf")? as usize,
            wf: scalar("meta/wf")? as usize,
            c: scalar("meta/c")? as usize,
            d: scalar("meta/d")? as usize,
            k: scalar("meta/k")? as usize,
            hidden: scalar("meta/hidden")? as usize,
            ci: scalar("meta/ci")? as usize,
            n_classes: scalar("meta/n_classes")? as usize,
            fusion: fusion_from_code(scalar("meta/fusion")?)?,
            rlm_enabled: scalar("meta/rlm_enabled")? != 0.0,
            train_gfb_ce: scalar("meta/train_gfb_ce")? != 0.0,
            branch_enabled: scalar("meta/branch_enabled")? != 0.0,
        };
        let mut model = Model::new(cfg, &mut Rng::new(0))?;
        for name in model.names.clone() {
            let t = container::find(entries, &format!("param/{name}"))?.clone();
            model.set_param(&name, t)?;
        }
        model.bn_mean = container::find(entries, "state/bn_mean")?.data().to_vec();
        model.bn_var = container::find(entries, "state/bn_var")?.data().to_vec();
        if model.bn_mean.len() != model.cfg.d || model.bn_var.len() != model.cfg.d {
            return Err(Error::Config(
                "checkpoint batch-norm statistics do not match the model width".into(),
            ));
        }
        Ok(model)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_entries(&container::load(path)?)
    }
}

fn provider_code(p: Provider) -> f64 {
    match p {
        Provider::Synthetic => 0.0,
        Provider::TinyEncoder => 1.0,
    }
}

fn provider_from_code(v: f64) -> Result<Provider> {
    match v as i64 {
        0 => Ok(Provider::Synthetic),
        1 => Ok(Provider::TinyEncoder),
        other => Err(Error::Malformed(format!("unknown provider code {other}"))),
    }
}

fn fusion_code(f: FusionMode) -> f64 {
    match f {
        FusionMode::Saffm => 0.0,
        FusionMode::Concat => 1.0,
        FusionMode::Sum => 2.0,
    }
}

fn fusion_from_code(v: f64) -> Result<FusionMode> {
    match v as i64 {
        0 => Ok(FusionMode::Saffm),
        1 => Ok(FusionMode::Concat),
        2 => Ok(FusionMode::Sum),
        other => Err(Error::Malformed(format!("unknown fusion code {other}"))),
    }
}

/// Branch outputs plus classifier vars for loss composition.
pub struct BranchBatch {
    pub features: BatchFeatures,
    /// Per image: [1, K] fusion weights (saffm fusion only).
    pub betas: Vec<Option<Var>>,
    pub cls: ClassifierVars,
}

pub struct ForwardPass {
    pub tape: Tape,
    pub param_vars: Vec<Var>,
    /// [B, D] global features.
    pub q_stars: Var,
    /// Present when the branch is enabled.
    pub batch: Option<BranchBatch>,
    pub cls_q: (Var, Var),
    /// Batch-norm batch statistics (train phase only).
    pub bn_stats: Option<(Vec<f64>, Vec<f64>)>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalFeatures {
    pub q_star: Vec<f64>,
    pub local: Option<Vec<f64>>,
    pub alpha: Option<Tensor>,
    /// Fusion weights over heads (saffm fusion only).
    pub beta: Option<Vec<f64>>,
}

/// Assemble the matching feature for a variant. `local` comes first in the
/// concatenated modes; the local-only variant never reads the global feature.
pub fn build_feature(
    local: Option<&[f64]>,
    q_star: Option<&[f64]>,
    variant: crate::eval::Variant,
) -> Result<Vec<f64>> {
    use crate::eval::Variant;
    match variant {
        Variant::Local => {
            let l = local.ok_or_else(|| {
                Error::Config("local variant needs the branch feature".into())
            })?;
            Ok(l.to_vec())
        }
        Variant::Global => {
            let q = q_star.ok_or_else(|| {
                Error::Config("global variant needs the global feature".into())
            })?;
            Ok(q.to_vec())
        }
        Variant::Full | Variant::Dagger => {
            let l = local.ok_or_else(|| {
                Error::Config("full variant needs the branch feature".into())
            })?;
            let q = q_star.ok_or_else(|| {
                Error::Config("full variant needs the global feature".into())
            })?;
            let mut out = Vec::with_capacity(l.len() + q.len());
            out.extend_from_slice(l);
            out.extend_from_slice(q);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Variant;

    fn desk_cfg() -> ModelConfig {
        ModelConfig {
            provider: Provider::Synthetic,
            hf: 3,
            wf: 2,
            c: 8,
            d: 4,
            k: 2,
            hidden: 2,
            ci: 2,
            n_classes: 4,
            fusion: FusionMode::Saffm,
            rlm_enabled: true,
            train_gfb_ce: true,
            branch_enabled: true,
        }
    }

    fn sample(seed: u64, cfg: &ModelConfig, id: u32) -> LabeledSample {
        let mut rng = Rng::new(seed);
        LabeledSample {
            tensor: Tensor::randn(&[cfg.j(), cfg.c], 1.0, &mut rng),
            id,
            cam: 0,
            mask: vec![false; cfg.j()],
        }
    }

    #[test]
    fn forward_shapes() {
        let cfg = desk_cfg();
        let mut rng = Rng::new(1);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let s0 = sample(2, &cfg, 0);
        let s1 = sample(3, &cfg, 1);
        let pass = model.forward_batch(&[&s0, &s1], vec![0, 1], true).unwrap();
        assert_eq!(pass.tape.value(pass.q_stars).shape(), &[2, cfg.d]);
        let b = pass.batch.as_ref().unwrap();
        assert_eq!(pass.tape.value(b.features.p_stars).shape(), &[2, cfg.local_len()]);
        assert_eq!(pass.tape.value(b.features.zs.unwrap()).shape(), &[2, cfg.d]);
        assert_eq!(b.features.alphas.len(), 2);
        assert!(pass.bn_stats.is_some());
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval() {
        let cfg = desk_cfg();
        let mut rng = Rng::new(4);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let s = sample(5, &cfg, 0);
        let feats = model.eval_features(&s).unwrap();

        let dir = std::env::temp_dir().join(format!("mhsa-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.bin");
        model.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, cfg);
        let feats2 = loaded.eval_features(&s).unwrap();
        assert_eq!(feats.q_star, feats2.q_star);
        assert_eq!(feats.local, feats2.local);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn variant_feature_assembly() {
        let local = vec![1.0, 2.0];
        let q = vec![3.0, 4.0];
        let full = build_feature(Some(&local), Some(&q), Variant::Full).unwrap();
        assert_eq!(full, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&full[..2], &local[..]);
        // Local never needs the global feature.
        let l = build_feature(Some(&local), None, Variant::Local).unwrap();
        assert_eq!(l, local);
        let g = build_feature(None, Some(&q), Variant::Global).unwrap();
        assert_eq!(g, q);
        assert!(build_feature(None, Some(&q), Variant::Full).is_err());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let cfg = desk_cfg();
        let mut rng = Rng::new(6);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let bad = LabeledSample {
            tensor: Tensor::zeros(&[5, cfg.c]),
            id: 0,
            cam: 0,
            mask: vec![false; 5],
        };
        assert!(matches!(
            model.forward_batch(&[&bad], vec![0], true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn branchless_model_has_no_branch_outputs() {
        let cfg = ModelConfig { branch_enabled: false, rlm_enabled: false, ..desk_cfg() };
        let mut rng = Rng::new(7);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        assert!(model.param_names().iter().all(|n| !n.starts_with("branch")));
        let s = sample(8, &cfg, 0);
        let feats = model.eval_features(&s).unwrap();
        assert!(feats.local.is_none());
        assert_eq!(feats.q_star.len(), cfg.d);
    }

    #[test]
    fn eval_is_deterministic_across_calls() {
        let cfg = desk_cfg();
        let mut rng = Rng::new(9);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let s = sample(10, &cfg, 3);
        let a = model.eval_features(&s).unwrap();
        let b = model.eval_features(&s).unwrap();
        assert_eq!(a.q_star, b.q_star);
        assert_eq!(a.local, b.local);
    }

    #[test]
    fn concat_fusion_changes_local_len() {
        let cfg = ModelConfig { fusion: FusionMode::Concat, ..desk_cfg() };
        assert_eq!(cfg.local_len(), cfg.d * cfg.k);
        let mut rng = Rng::new(11);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let s = sample(12, &cfg, 0);
        let feats = model.eval_features(&s).unwrap();
        assert_eq!(feats.local.unwrap().len(), cfg.d * cfg.k);
    }
}
