//! Synthetic occluded-retrieval data. Each identity gets a prototype field;
//! samples are the prototype plus per-sample noise, and an occlusion replaces
//! a contiguous rectangle with identity-independent noise so occluded regions
//! carry no matching signal. Queries can be forced occluded while the gallery
//! stays holistic, mirroring the occluded-benchmark protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backbone::{Provider, ENCODER_STRIDE};
use crate::container::{self, Entry};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_ids: usize,
    pub samples_per_id: usize,
    pub eval_ids: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub prototype_std: f64,
    pub within_id_std: f64,
    pub occlusion_prob: f64,
    /// Inclusive range of the occluded area fraction.
    pub area_frac: (f64, f64),
    pub occluder_std: f64,
    /// Distinct occluder fields shared by all identities. A pool keeps the
    /// occluded content identity-free and detectable yet too variable to
    /// cancel out of matching distances as a constant bias.
    #[serde(default = "default_occluder_pool")]
    pub occluder_pool: usize,
    pub cameras: usize,
    /// Queries are generated fully occluded, the gallery holistic.
    pub occluded_benchmark: bool,
}

fn default_occluder_pool() -> usize {
    2
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_ids: 40,
            samples_per_id: 8,
            eval_ids: 10,
            query_per_id: 6,
            gallery_per_id: 6,
            prototype_std: 1.0,
            within_id_std: 0.1,
            occlusion_prob: 1.0,
            area_frac: (0.25, 0.45),
            occluder_std: 4.0,
            occluder_pool: default_occluder_pool(),
            cameras: 2,
            occluded_benchmark: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 4 {
            return Err(Error::Config(format!("need at least 4 train ids, got {}", self.n_ids)));
        }
        if self.eval_ids < 2 || self.query_per_id == 0 || self.gallery_per_id == 0 {
            return Err(Error::Config("infeasible query/gallery split sizes".into()));
        }
        if self.samples_per_id < 2 {
            return Err(Error::Config("need >= 2 samples per train identity".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config(format!(
                "occlusion_prob must be in [0,1], got {}",
                self.occlusion_prob
            )));
        }
        let (lo, hi) = self.area_frac;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "area fractions must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})"
            )));
        }
        if self.cameras == 0 {
            return Err(Error::Config("need at least one camera".into()));
        }
        if self.occluder_pool == 0 {
            return Err(Error::Config("occluder pool must hold at least one field".into()));
        }
        if self.prototype_std <= 0.0 || self.within_id_std < 0.0 || self.occluder_std < 0.0 {
            return Err(Error::Config("noise scales must be positive".into()));
        }
        Ok(())
    }
}

/// One sample: either a precomputed [J, C] feature map or an
/// [Hi, Wi, Ci] image for the tiny encoder, with identity, camera, and the
/// ground-truth occlusion mask at feature-map resolution (length J).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub tensor: Tensor,
    pub id: u32,
    pub cam: u32,
    pub mask: Vec<bool>,
}

impl LabeledSample {
    pub fn occluded(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub query: Vec<LabeledSample>,
    pub gallery: Vec<LabeledSample>,
}

/// Grid geometry the generator needs from the run configuration.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub hf: usize,
    pub wf: usize,
    pub c: usize,
    /// Encoder input channels; used only by the tiny-encoder provider.
    pub ci: usize,
    pub provider: Provider,
}

impl GridSpec {
    pub fn j(&self) -> usize {
        self.hf * self.wf
    }
}

/// Pick a rectangle of exactly `target` feature pixels (closest feasible
/// count) inside the Hf x Wf grid. Returns (row, col, height, width).
fn pick_rectangle(
    hf: usize,
    wf: usize,
    target: usize,
    rng: &mut Rng,
) -> (usize, usize, usize, usize) {
    let target = target.clamp(1, hf * wf);
    // Widen the search until some rectangle h x w with h*w == t fits.
    for delta in 0..(hf * wf) {
        for t in [target.saturating_sub(delta).max(1), target + delta] {
            if t > hf * wf {
                continue;
            }
            let mut options = Vec::new();
            for h in 1..=hf.min(t) {
                if t % h == 0 && t / h <= wf {
                    options.push((h, t / h));
                }
            }
            if !options.is_empty() {
                let (h, w) = options[rng.below(options.len())];
                let row = rng.below(hf - h + 1);
                let col = rng.below(wf - w + 1);
                return (row, col, h, w);
            }
        }
    }
    (0, 0, 1, 1)
}

/// Replace a rectangle with the corresponding block of the shared occluder
/// field plus per-sample noise. One field serves every identity, so occluded
/// regions carry no matching signal and collapse across images.
fn occlude_map(
    map: &mut Tensor,
    mask: &mut [bool],
    occluder: &Tensor,
    grid: &GridSpec,
    spec: &SyntheticSpec,
    rng: &mut Rng,
) {
    let frac = rng.uniform(spec.area_frac.0, spec.area_frac.1);
    let target = (frac * grid.j() as f64).round() as usize;
    let (row, col, h, w) = pick_rectangle(grid.hf, grid.wf, target, rng);
    for r in row..row + h {
        for c in col..col + w {
            mask[r * grid.wf + c] = true;
        }
    }
    let (wi, channels) = match grid.provider {
        Provider::Synthetic => (grid.wf, grid.c),
        Provider::TinyEncoder => (grid.wf * ENCODER_STRIDE, grid.ci),
    };
    let scale = match grid.provider {
        Provider::Synthetic => 1,
        Provider::TinyEncoder => ENCODER_STRIDE,
    };
    for r in row * scale..(row + h) * scale {
        for c in col * scale..(col + w) * scale {
            let pixel = r * wi + c;
            for ch in 0..channels {
                map.data_mut()[pixel * channels + ch] = occluder.data()[pixel * channels + ch]
                    + rng.gaussian() * spec.within_id_std;
            }
        }
    }
}

fn sample_shape(grid: &GridSpec) -> Vec<usize> {
    match grid.provider {
        Provider::Synthetic => vec![grid.j(), grid.c],
        Provider::TinyEncoder => {
            vec![grid.hf * ENCODER_STRIDE, grid.wf * ENCODER_STRIDE, grid.ci]
        }
    }
}

fn draw_sample(
    prototype: &Tensor,
    occluders: &[Tensor],
    id: u32,
    occlusion_prob: f64,
    grid: &GridSpec,
    spec: &SyntheticSpec,
    rng: &mut Rng,
) -> LabeledSample {
    let mut tensor = prototype.clone();
    for v in tensor.data_mut() {
        *v += rng.gaussian() * spec.within_id_std;
    }
    let cam = rng.below(spec.cameras) as u32;
    let mut mask = vec![false; grid.j()];
    if rng.next_f64() < occlusion_prob {
        let occluder = &occluders[rng.below(occluders.len())];
        occlude_map(&mut tensor, &mut mask, occluder, grid, spec, rng);
    }
    LabeledSample { tensor, id, cam, mask }
}

/// Generate train/query/gallery splits. Train identities are disjoint from
/// the eval identities shared by query and gallery; one occluder pool is
/// shared by every split.
pub fn generate_dataset(spec: &SyntheticSpec, grid: &GridSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let shape = sample_shape(grid);
    let occluders: Vec<Tensor> = (0..spec.occluder_pool)
        .map(|_| Tensor::randn(&shape, spec.occluder_std, &mut rng))
        .collect();
    let total_ids = spec.n_ids + spec.eval_ids;
    let prototypes: Vec<Tensor> = (0..total_ids)
        .map(|_| Tensor::randn(&shape, spec.prototype_std, &mut rng))
        .collect();

    let mut train = Vec::with_capacity(spec.n_ids * spec.samples_per_id);
    for id in 0..spec.n_ids {
        for _ in 0..spec.samples_per_id {
            train.push(draw_sample(
                &prototypes[id],
                &occluders,
                id as u32,
                spec.occlusion_prob,
                grid,
                spec,
                &mut rng,
            ));
        }
    }

    let query_occ = if spec.occluded_benchmark { 1.0 } else { spec.occlusion_prob };
    let mut query = Vec::with_capacity(spec.eval_ids * spec.query_per_id);
    let mut gallery = Vec::with_capacity(spec.eval_ids * spec.gallery_per_id);
    for e in 0..spec.eval_ids {
        let id = spec.n_ids + e;
        for _ in 0..spec.query_per_id {
            query.push(draw_sample(
                &prototypes[id],
                &occluders,
                id as u32,
                query_occ,
                grid,
                spec,
                &mut rng,
            ));
        }
        for _ in 0..spec.gallery_per_id {
            gallery.push(draw_sample(
                &prototypes[id],
                &occluders,
                id as u32,
                0.0,
                grid,
                spec,
                &mut rng,
            ));
        }
    }

    Ok(Dataset { train, query, gallery })
}

// ── Container persistence ───────────────────────────────────────────

fn samples_to_entries(samples: &[LabeledSample]) -> Vec<Entry> {
    let mut entries = Vec::with_capacity(samples.len() * 3 + 1);
    entries.push(Entry::new("header/count", Tensor::scalar(samples.len() as f64)));
    for (i, s) in samples.iter().enumerate() {
        entries.push(Entry::new(format!("s{i}/tensor"), s.tensor.clone()));
        entries.push(Entry::new(
            format!("s{i}/meta"),
            Tensor::new(vec![2], vec![s.id as f64, s.cam as f64]).unwrap(),
        ));
        entries.push(Entry::new(
            format!("s{i}/mask"),
            Tensor::new(
                vec![s.mask.len()],
                s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap(),
        ));
    }
    entries
}

fn entries_to_samples(entries: &[Entry]) -> Result<Vec<LabeledSample>> {
    let count = container::find(entries, "header/count")?.data()[0] as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let tensor = container::find(entries, &format!("s{i}/tensor"))?.clone();
        let meta = container::find(entries, &format!("s{i}/meta"))?;
        if meta.numel() != 2 {
            return Err(Error::Malformed(format!("sample {i} meta must hold id and cam")));
        }
        let mask_t = container::find(entries, &format!("s{i}/mask"))?;
        let mask = mask_t.data().iter().map(|&v| v != 0.0).collect();
        samples.push(LabeledSample {
            tensor,
            id: meta.data()[0] as u32,
            cam: meta.data()[1] as u32,
            mask,
        });
    }
    Ok(samples)
}

pub fn save_split(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    container::save(path, &samples_to_entries(samples))
}

pub fn load_split(path: &Path) -> Result<Vec<LabeledSample>> {
    entries_to_samples(&container::load(path)?)
}
