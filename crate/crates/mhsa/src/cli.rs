//! Command-line entry point: data generation, training, evaluation, gradient
//! verification, hyper-parameter sweeps, and attention export.
//!
//! Exit codes: 0 success, 2 configuration/data error, 3 numeric failure,
//! 4 verification failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, Dataset, LabeledSample};
use crate::error::{exit_code, Error, Result};
use crate::eval::{self, EmbeddingRecord, EvalReport, Variant};
use crate::export;
use crate::gradcheck::{self, GRAD_TOLERANCE};
use crate::model::{self, Model};
use crate::rng::Rng;
use crate::train::{self, TrainOutcome, TrainSettings};

pub const TRAIN_SPLIT: &str = "train.bin";
pub const QUERY_SPLIT: &str = "query.bin";
pub const GALLERY_SPLIT: &str = "gallery.bin";
pub const MANIFEST: &str = "manifest.toml";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";

const USAGE: &str = "\
usage: mhsa <command> [options]

commands:
  gen-data     --config <path> --out <dir> [--force]
  train        --config <path> --data <dir> --out <dir>
  eval         --checkpoint <path> --data <dir> [--variant full|local|dagger|global]
               [--fusion saffm|concat|sum] [--out <dir>]
  gradcheck    [--seed <n>]
  sweep        --param K|lambda1|lambda2|lambda3|gamma --values <v1,v2,...>
               --config <path> --out <dir>
  export-attn  --checkpoint <path> --data <dir> --sample <index> --out <dir>
";

pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Err(Error::Config("missing command".into()));
    };
    let flags = Flags::parse(&args[1..])?;
    match command.as_str() {
        "gen-data" => cmd_gen_data(&flags),
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "sweep" => cmd_sweep(&flags),
        "export-attn" => cmd_export_attn(&flags),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprint!("{USAGE}");
            Err(Error::Config(format!("unknown command '{other}'")))
        }
    }
}

struct Flags {
    pairs: Vec<(String, Option<String>)>,
}

const VALUE_FLAGS: [&str; 9] = [
    "--config", "--out", "--data", "--checkpoint", "--variant", "--fusion", "--seed", "--param",
    "--values",
];
const BOOL_FLAGS: [&str; 1] = ["--force"];

impl Flags {
    fn parse(args: &[String]) -> Result<Flags> {
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let flag = &args[i];
            if BOOL_FLAGS.contains(&flag.as_str()) {
                pairs.push((flag.clone(), None));
                i += 1;
            } else if VALUE_FLAGS.contains(&flag.as_str()) || flag == "--sample" {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| Error::Config(format!("flag {flag} needs a value")))?;
                pairs.push((flag.clone(), Some(value.clone())));
                i += 2;
            } else {
                return Err(Error::Config(format!("unknown flag '{flag}'")));
            }
        }
        Ok(Flags { pairs })
    }

    fn get(&self, flag: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(f, _)| f == flag)
            .and_then(|(_, v)| v.as_deref())
    }

    fn require(&self, flag: &str) -> Result<&str> {
        self.get(flag)
            .ok_or_else(|| Error::Config(format!("missing required flag {flag}")))
    }

    fn has(&self, flag: &str) -> bool {
        self.pairs.iter().any(|(f, _)| f == flag)
    }

    fn path(&self, flag: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(flag)?))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    counts: ManifestCounts,
    spec: &'a crate::data::SyntheticSpec,
    provider: &'a str,
    hf: usize,
    wf: usize,
    c: usize,
    ci: usize,
}

#[derive(Serialize)]
struct ManifestCounts {
    train: usize,
    query: usize,
    gallery: usize,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(format!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

fn cmd_gen_data(flags: &Flags) -> Result<()> {
    let cfg = RunConfig::load(&flags.path("--config")?)?;
    let out = flags.path("--out")?;
    ensure_dir(&out)?;
    let files = [TRAIN_SPLIT, QUERY_SPLIT, GALLERY_SPLIT, MANIFEST];
    if !flags.has("--force") {
        for f in files {
            let p = out.join(f);
            if p.exists() {
                return Err(Error::Config(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
    }
    let grid = cfg.grid_spec()?;
    let ds = data::generate_dataset(&cfg.data, &grid, cfg.seed)?;
    data::save_split(&out.join(TRAIN_SPLIT), &ds.train)?;
    data::save_split(&out.join(QUERY_SPLIT), &ds.query)?;
    data::save_split(&out.join(GALLERY_SPLIT), &ds.gallery)?;
    let manifest = Manifest {
        seed: cfg.seed,
        counts: ManifestCounts {
            train: ds.train.len(),
            query: ds.query.len(),
            gallery: ds.gallery.len(),
        },
        spec: &cfg.data,
        provider: &cfg.backbone.provider,
        hf: cfg.backbone.hf,
        wf: cfg.backbone.wf,
        c: cfg.backbone.c,
        ci: cfg.backbone.ci,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
    write_text(&out.join(MANIFEST), &text)?;
    println!(
        "wrote {} train / {} query / {} gallery samples to {}",
        ds.train.len(),
        ds.query.len(),
        ds.gallery.len(),
        out.display()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: data::load_split(&dir.join(TRAIN_SPLIT))?,
        query: data::load_split(&dir.join(QUERY_SPLIT))?,
        gallery: data::load_split(&dir.join(GALLERY_SPLIT))?,
    })
}

fn cmd_train(flags: &Flags) -> Result<()> {
    let cfg = RunConfig::load(&flags.path("--config")?)?;
    let data_dir = flags.path("--data")?;
    let out = flags.path("--out")?;
    ensure_dir(&out)?;
    let train_set = data::load_split(&data_dir.join(TRAIN_SPLIT))?;

    let mut rng = Rng::new(cfg.seed);
    let mut model = Model::new(cfg.model_config()?, &mut rng)?;
    let settings = TrainSettings {
        sampler: cfg.sampler_config(),
        schedule: cfg.lr_schedule(),
        weights: cfg.loss_weights(),
        seed: cfg.seed,
    };
    let result = train::train(&mut model, &train_set, &settings)?;
    model.save_checkpoint(&out.join(CHECKPOINT))?;
    write_text(&out.join(METRICS), &result.metrics_csv)?;
    match result.outcome {
        TrainOutcome::Completed => {
            println!(
                "trained {} steps; total loss {} -> {}",
                result.steps,
                result.first_total.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                result.last_total.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            );
            Ok(())
        }
        TrainOutcome::NanAbort { step, message } => {
            eprintln!("aborted at step {step}: {message}; last-good checkpoint retained");
            Err(Error::Numeric(message))
        }
    }
}

/// Embed every sample of a split under the requested variant.
pub fn embed_split(
    model: &Model,
    samples: &[LabeledSample],
    variant: Variant,
) -> Result<Vec<EmbeddingRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let f = model.eval_features(s)?;
        let feature = model::build_feature(f.local.as_deref(), Some(&f.q_star), variant)?;
        records.push(EmbeddingRecord { id: s.id, cam: s.cam, feature });
    }
    Ok(records)
}

/// Resolve the effective variant against checkpoint training properties.
fn effective_variant(requested: Variant, model: &Model) -> Variant {
    match requested {
        Variant::Dagger if model.cfg.train_gfb_ce => {
            eprintln!(
                "warning: dagger is a training-time property but this checkpoint was trained \
                 with the global CE; evaluating as 'full'"
            );
            Variant::Full
        }
        v => v,
    }
}

pub fn evaluate_checkpoint(
    model: &mut Model,
    dataset: &Dataset,
    requested_variant: Variant,
    fusion_override: Option<crate::branch::FusionMode>,
) -> Result<EvalReport> {
    if let Some(fusion) = fusion_override {
        if fusion != model.cfg.fusion {
            eprintln!(
                "note: evaluating with fusion '{}' over a checkpoint trained with '{}'",
                fusion.as_str(),
                model.cfg.fusion.as_str()
            );
            model.cfg.fusion = fusion;
        }
    }
    let variant = effective_variant(requested_variant, model);
    if matches!(variant, Variant::Full | Variant::Local | Variant::Dagger)
        && !model.cfg.branch_enabled
    {
        return Err(Error::Config(format!(
            "variant '{}' needs the attention branch, but this checkpoint is branchless \
             (use --variant global)",
            variant.as_str()
        )));
    }
    let queries = embed_split(model, &dataset.query, variant)?;
    let gallery = embed_split(model, &dataset.gallery, variant)?;
    eval::cmc_map(&queries, &gallery)
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    let mut model = Model::load_checkpoint(&flags.path("--checkpoint")?)?;
    let data_dir = flags.path("--data")?;
    let dataset = load_dataset(&data_dir)?;
    let variant = Variant::parse(flags.get("--variant").unwrap_or("full"))?;
    let fusion = flags
        .get("--fusion")
        .map(crate::branch::FusionMode::parse)
        .transpose()?;
    let report = evaluate_checkpoint(&mut model, &dataset, variant, fusion)?;
    println!("{}", report.summary());
    if let Some(out) = flags.get("--out") {
        let dir = PathBuf::from(out);
        ensure_dir(&dir)?;
        write_text(&dir.join("eval_report.csv"), &report.to_csv())?;
        println!("report written to {}", dir.join("eval_report.csv").display());
    }
    Ok(())
}

fn cmd_gradcheck(flags: &Flags) -> Result<()> {
    let seed: u64 = match flags.get("--seed") {
        Some(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("--seed expects an integer, got '{s}'")))?,
        None => 0,
    };
    let reports = gradcheck::run_suite(seed, None)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.max_rel_err < GRAD_TOLERANCE { "PASS" } else { "FAIL" };
        println!("{:<24} max_rel_err {:>12.3e}  {status}", r.name, r.max_rel_err);
        if r.max_rel_err >= GRAD_TOLERANCE {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("gradcheck: all {} components within {GRAD_TOLERANCE:.0e}", reports.len());
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    K,
    Lambda1,
    Lambda2,
    Lambda3,
    Gamma,
}

impl SweepParam {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(SweepParam::K),
            "lambda1" => Ok(SweepParam::Lambda1),
            "lambda2" => Ok(SweepParam::Lambda2),
            "lambda3" => Ok(SweepParam::Lambda3),
            "gamma" => Ok(SweepParam::Gamma),
            other => Err(Error::Config(format!(
                "unknown sweep parameter '{other}' (expected K|lambda1|lambda2|lambda3|gamma)"
            ))),
        }
    }

    fn apply(&self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("K must be a positive integer, got {value}")));
                }
                cfg.branch.k = value as usize;
            }
            SweepParam::Lambda1 => cfg.loss.lambda1 = value,
            SweepParam::Lambda2 => cfg.loss.lambda2 = value,
            SweepParam::Lambda3 => cfg.loss.lambda3 = value,
            SweepParam::Gamma => cfg.loss.gamma = value,
        }
        cfg.validate()
    }

    fn as_str(&self) -> &'static str {
        match self {
            SweepParam::K => "K",
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
            SweepParam::Lambda3 => "lambda3",
            SweepParam::Gamma => "gamma",
        }
    }
}

/// Train + evaluate one grid point; shared by the sweep command and tests.
pub fn sweep_point(base: &RunConfig, dataset: &Dataset) -> Result<EvalReport> {
    let mut rng = Rng::new(base.seed);
    let mut model = Model::new(base.model_config()?, &mut rng)?;
    let settings = TrainSettings {
        sampler: base.sampler_config(),
        schedule: base.lr_schedule(),
        weights: base.loss_weights(),
        seed: base.seed,
    };
    let result = train::train(&mut model, &dataset.train, &settings)?;
    if let TrainOutcome::NanAbort { message, .. } = result.outcome {
        return Err(Error::Numeric(message));
    }
    evaluate_checkpoint(&mut model, dataset, base.variant()?, None)
}

fn cmd_sweep(flags: &Flags) -> Result<()> {
    let param = SweepParam::parse(flags.require("--param")?)?;
    let values: Vec<f64> = flags
        .require("--values")?
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sweep value '{v}'")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base = RunConfig::load(&flags.path("--config")?)?;
    let out = flags.path("--out")?;
    ensure_dir(&out)?;

    // One dataset shared across grid points so values are comparable.
    let dataset = match flags.get("--data") {
        Some(dir) => load_dataset(Path::new(dir))?,
        None => data::generate_dataset(&base.data, &base.grid_spec()?, base.seed)?,
    };

    let mut csv = String::from("value,rank1,rank5,rank10,mAP\n");
    for &value in &values {
        let mut cfg = base.clone();
        let row = match param.apply(&mut cfg, value).and_then(|()| sweep_point(&cfg, &dataset)) {
            Ok(report) => {
                let line = format!(
                    "{value},{},{},{},{}",
                    report.rank(1),
                    report.rank(5),
                    report.rank(10),
                    report.map
                );
                println!("{} = {value}: {}", param.as_str(), report.summary());
                line
            }
            Err(e) => {
                eprintln!("{} = {value} failed: {e}", param.as_str());
                format!("{value},NaN,NaN,NaN,NaN")
            }
        };
        let _ = writeln!(csv, "{row}");
    }
    let path = out.join(format!("sweep_{}.csv", param.as_str()));
    write_text(&path, &csv)?;
    println!("sweep written to {}", path.display());
    Ok(())
}

fn cmd_export_attn(flags: &Flags) -> Result<()> {
    let model = Model::load_checkpoint(&flags.path("--checkpoint")?)?;
    if !model.cfg.branch_enabled {
        return Err(Error::Config("this checkpoint is branchless; no attention to export".into()));
    }
    let data_dir = flags.path("--data")?;
    let index: usize = flags
        .require("--sample")?
        .parse()
        .map_err(|_| Error::Config("--sample expects an index".into()))?;
    let out = flags.path("--out")?;
    ensure_dir(&out)?;
    let query = data::load_split(&data_dir.join(QUERY_SPLIT))?;
    let sample = query
        .get(index)
        .ok_or_else(|| Error::Config(format!("sample {index} out of range (0..{})", query.len())))?;
    let features = model.eval_features(sample)?;
    let alpha = features.alpha.expect("branch checkpoints produce attention");
    let files = export::export_attention(&alpha, model.cfg.hf, model.cfg.wf, &out.join(format!("sample{index}")))?;
    let score = export::attention_occlusion_score(&alpha, &sample.mask)?;
    println!("exported {} heatmaps + csv for sample {index}", files.len() - 1);
    println!("occlusion attention score: {score}");
    Ok(())
}
