//! Patch sampling, learning-rate schedule, fold plans, training runs with
//! checkpointing, and checkpoint selection for ensembles.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Modality};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::network::{self, NetworkSpec, ParamSet};
use crate::volume_io::{self, LabelMap, PreprocessSettings, Volume, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplier applied every `lr_decay_every` iterations.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub val_every: usize,
    pub patch_shape: [usize; 3],
    pub seeds_per_fold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 32,
            lr0: 1e-3,
            lr_decay_factor: 0.7,
            lr_decay_every: 2000,
            val_every: 500,
            patch_shape: [256, 256, 5],
            seeds_per_fold: 3,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for 64×64×5 patches on a single CPU core.
    pub fn desk() -> Self {
        Self {
            iterations: 600,
            batch_size: 4,
            val_every: 100,
            patch_shape: [64, 64, 5],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("val_every", self.val_every),
            ("seeds_per_fold", self.seeds_per_fold),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1]".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if self.patch_shape.iter().any(|&p| p == 0) {
            return Err(Error::Config("patch_shape has an empty axis".into()));
        }
        Ok(())
    }
}

/// Step schedule: `lr0 · factor^⌊iteration / every⌋`.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((iteration / cfg.lr_decay_every) as i32)
}

/// Cross-validation assignment. Within a fold of size k, member i is validated on
/// members i+1 and i+2 (mod k).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
    pub validation: BTreeMap<String, Vec<String>>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|x| x == id))
    }

    /// Images used for training when `fold` is held out.
    pub fn training_ids(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    pub fn validation_for(&self, id: &str) -> Result<&[String]> {
        self.validation
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::State(format!("{id} has no validation images")))
    }
}

pub fn make_fold_plan(patient_ids: &[String], num_folds: usize, seed: u64) -> Result<FoldPlan> {
    let n = patient_ids.len();
    if num_folds == 0 || n == 0 || n % num_folds != 0 {
        return Err(Error::Argument(format!(
            "{n} patients cannot be split into {num_folds} equal folds"
        )));
    }
    let size = n / num_folds;
    if size < 3 {
        return Err(Error::Argument(format!(
            "folds of {size} leave fewer than two validation images per test image"
        )));
    }
    let mut ids = patient_ids.to_vec();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Argument("duplicate patient ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds: Vec<Vec<String>> = ids.chunks(size).map(<[String]>::to_vec).collect();
    let mut validation = BTreeMap::new();
    for fold in &folds {
        for (i, id) in fold.iter().enumerate() {
            let v = (1..=2).map(|d| fold[(i + d) % size].clone()).collect();
            validation.insert(id.clone(), v);
        }
    }
    Ok(FoldPlan { folds, validation })
}

/// A preprocessed VNC image with its (CCTA-derived) reference labels on the same grid.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    pub image: Volume,
    pub labels: LabelMap,
}

/// Reads the VNC image and CCTA labels of `id` and brings both onto the network grid.
pub fn prepare_image(cohort: &Cohort, id: &str, settings: &PreprocessSettings) -> Result<PreparedImage> {
    let raw = cohort.image(id, Modality::Vnc)?;
    let labels = cohort.labels(id, Modality::Vnc)?;
    if !raw.grid.same_sampling(&labels.grid) {
        return Err(Error::Data(format!("{id}: image and labels are not aligned")));
    }
    let image = volume_io::preprocess(&raw, settings)?;
    let labels = volume_io::resample_labels_to(&labels, &image.grid)?;
    Ok(PreparedImage {
        id: id.to_string(),
        image,
        labels,
    })
}

/// Copies the patch at `origin`, zero-padding (background label) outside the volume.
/// Returns `(input, one-hot target)` laid out `(1, px, py, pz)` and `(8, px, py, pz)`.
pub fn patch_at(image: &Volume, labels: &LabelMap, patch: [usize; 3], origin: [usize; 3]) -> (Vec<f32>, Vec<f32>) {
    let [px, py, pz] = patch;
    let n = px * py * pz;
    let mut input = vec![0f32; n];
    let mut target = vec![0f32; NUM_CLASSES * n];
    let [nx, ny, nz] = image.grid.shape;
    for z in 0..pz {
        for y in 0..py {
            for x in 0..px {
                let (gx, gy, gz) = (origin[0] + x, origin[1] + y, origin[2] + z);
                let i = (z * py + y) * px + x;
                let label = if gx < nx && gy < ny && gz < nz {
                    let g = image.grid.index(gx, gy, gz);
                    input[i] = image.data[g] as f32;
                    labels.data[g] as usize
                } else {
                    0
                };
                target[label * n + i] = 1.0;
            }
        }
    }
    (input, target)
}

/// Uniformly drawn patch; axes shorter than the patch use origin 0 and padding.
pub fn sample_patch(
    image: &Volume,
    labels: &LabelMap,
    patch: [usize; 3],
    rng: &mut impl Rng,
) -> (Vec<f32>, Vec<f32>) {
    let shape = image.grid.shape;
    let origin = [0, 1, 2].map(|a| {
        if shape[a] > patch[a] {
            rng.random_range(0..=shape[a] - patch[a])
        } else {
            0
        }
    });
    patch_at(image, labels, patch, origin)
}

/// Fixed validation grid: eight origins evenly spaced along z, centered in-plane.
pub fn validation_origins(shape: [usize; 3], patch: [usize; 3]) -> Vec<[usize; 3]> {
    let span = |a: usize| shape[a].saturating_sub(patch[a]);
    (0..8)
        .map(|i| [span(0) / 2, span(1) / 2, (span(2) * i + 3) / 7])
        .collect()
}

/// Soft-Dice loss of the network over the validation grid of one image.
pub fn validation_loss(params: &ParamSet, img: &PreparedImage, patch: [usize; 3]) -> Result<f64> {
    let origins = validation_origins(img.image.grid.shape, patch);
    let n: usize = patch.iter().product();
    let mut input = Vec::with_capacity(origins.len() * n);
    let mut target = Vec::with_capacity(origins.len() * NUM_CLASSES * n);
    for o in &origins {
        let (x, t) = patch_at(&img.image, &img.labels, patch, *o);
        input.extend(x);
        target.extend(t);
    }
    let b = origins.len();
    let probs = network::eval_forward(params, &input, [b, 1, patch[0], patch[1], patch[2]])?;
    network::soft_dice_loss(&probs, &target, b, NUM_CLASSES)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub iteration: usize,
    pub val_losses: BTreeMap<String, f64>,
}

/// On-disk companion of a checkpoint's parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: NetworkSpec,
    pub spec_hash: String,
    pub seed: u64,
    pub iteration: usize,
    pub val_loss: BTreeMap<String, f64>,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Updates every tensor that has a gradient (running statistics have none).
    fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (ADAM_EPS * c2.sqrt()) as f32;
        for (i, g) in grads.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, g), m), v) in params.tensors[i].data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Directory of one checkpoint inside a checkpoint store.
pub fn checkpoint_dir(store: &Path, fold: usize, seed: u64, iteration: usize) -> PathBuf {
    run_dir(store, fold, seed).join(format!("iter{iteration}"))
}

pub fn run_dir(store: &Path, fold: usize, seed: u64) -> PathBuf {
    store.join(format!("fold{fold}")).join(format!("seed{seed}"))
}

const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "manifest.json";
const COMPLETE_FILE: &str = "complete.json";

pub fn save_checkpoint(store: &Path, fold: usize, ckpt: &Checkpoint) -> Result<()> {
    let dir = checkpoint_dir(store, fold, ckpt.params.seed, ckpt.iteration);
    ckpt.params.save(&dir.join(PARAMS_FILE))?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &CheckpointManifest {
            spec: ckpt.params.spec.clone(),
            spec_hash: ckpt.params.spec_hash.clone(),
            seed: ckpt.params.seed,
            iteration: ckpt.iteration,
            val_loss: ckpt.val_losses.clone(),
        },
    )
}

/// Loads one checkpoint directory (`…/iter{N}`).
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.spec_hash != manifest.spec.hash() {
        return Err(Error::Integrity(format!(
            "{}: recorded spec hash does not match the recorded spec",
            dir.display()
        )));
    }
    let params = ParamSet::load(&dir.join(PARAMS_FILE), manifest.spec, manifest.seed)?;
    Ok(Checkpoint {
        params,
        iteration: manifest.iteration,
        val_losses: manifest.val_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CompleteMarker {
    iterations: Vec<usize>,
}

/// Checkpoints of a finished run, or `None` when the run never completed.
pub fn load_run(store: &Path, fold: usize, seed: u64, spec: &NetworkSpec) -> Result<Option<Vec<Checkpoint>>> {
    let dir = run_dir(store, fold, seed);
    let marker = dir.join(COMPLETE_FILE);
    if !marker.exists() {
        return Ok(None);
    }
    let marker: CompleteMarker = read_json(&marker)?;
    marker
        .iterations
        .iter()
        .map(|&it| {
            let c = load_checkpoint(&checkpoint_dir(store, fold, seed, it))?;
            if c.iteration != it || c.params.seed != seed || c.params.spec != *spec {
                return Err(Error::Integrity(format!(
                    "checkpoint iter{it} of fold {fold} seed {seed} has mismatching metadata"
                )));
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Trains one network for `fold` from `seed` (initialization and patch sampling).
///
/// `data` must hold every image of the cohort that the fold plan refers to; only
/// the fold's training images feed the optimizer and only its own images are
/// validated. When `store` is given every checkpoint is written there and the run
/// is marked complete at the end.
pub fn train_one(
    fold: usize,
    seed: u64,
    plan: &FoldPlan,
    data: &BTreeMap<String, PreparedImage>,
    cfg: &TrainConfig,
    spec: &NetworkSpec,
    store: Option<&Path>,
) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    if cfg.patch_shape != spec.patch_shape {
        return Err(Error::Config(format!(
            "training patch {:?} differs from network patch {:?}",
            cfg.patch_shape, spec.patch_shape
        )));
    }
    let fold_ids = plan
        .folds
        .get(fold)
        .ok_or_else(|| Error::Argument(format!("fold {fold} not in plan")))?;
    let get = |id: &String| {
        data.get(id)
            .ok_or_else(|| Error::Data(format!("image {id} was not prepared")))
    };
    let train: Vec<&PreparedImage> = plan.training_ids(fold).iter().map(get).collect::<Result<_>>()?;
    let val: Vec<&PreparedImage> = fold_ids.iter().map(get).collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::Data("no training images".into()));
    }

    let mut params = network::build(spec, seed)?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let patch = cfg.patch_shape;
    let n: usize = patch.iter().product();
    let b = cfg.batch_size;
    let shape = [b, 1, patch[0], patch[1], patch[2]];
    let mut checkpoints = Vec::new();
    for it in 0..cfg.iterations {
        let mut input = Vec::with_capacity(b * n);
        let mut target = Vec::with_capacity(b * NUM_CLASSES * n);
        for _ in 0..b {
            let img = train[rng.random_range(0..train.len())];
            let (x, t) = sample_patch(&img.image, &img.labels, patch, &mut rng);
            input.extend(x);
            target.extend(t);
        }
        let step = network::forward_train(&mut params, &input, shape)?;
        let (loss, dprobs) = network::soft_dice_loss_grad(&step.probs, &target, b, NUM_CLASSES)?;
        if !loss.is_finite() || dprobs.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at iteration {it} (fold {fold}, seed {seed}, lr {})",
                lr_at(it, cfg)
            )));
        }
        let dprobs: Vec<f32> = dprobs.into_iter().map(|g| g as f32).collect();
        let grads = network::backward(&params, step.tape, &dprobs);
        adam.step(&mut params, &grads, lr_at(it, cfg));

        let done = it + 1;
        if done % cfg.val_every == 0 {
            let mut val_losses = BTreeMap::new();
            for img in &val {
                let l = validation_loss(&params, img, patch)?;
                if !l.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite validation loss on {} at iteration {done}",
                        img.id
                    )));
                }
                val_losses.insert(img.id.clone(), l);
            }
            let ckpt = Checkpoint {
                params: params.clone(),
                iteration: done,
                val_losses,
            };
            if let Some(store) = store {
                save_checkpoint(store, fold, &ckpt)?;
            }
            checkpoints.push(ckpt);
        }
    }
    if let Some(store) = store {
        write_json(
            &run_dir(store, fold, seed).join(COMPLETE_FILE),
            &CompleteMarker {
                iterations: checkpoints.iter().map(|c| c.iteration).collect(),
            },
        )?;
    }
    Ok(checkpoints)
}

/// Per seed, the checkpoint with the smallest summed loss over `val_ids`; ties go to
/// the earliest iteration.
pub fn select_by_validation<'a>(per_seed: &'a [Vec<Checkpoint>], val_ids: &[String]) -> Result<Vec<&'a Checkpoint>> {
    per_seed
        .iter()
        .map(|ckpts| {
            let mut best: Option<(f64, usize, &Checkpoint)> = None;
            for c in ckpts {
                let mut sum = 0.0;
                for id in val_ids {
                    sum += c.val_losses.get(id).ok_or_else(|| {
                        Error::State(format!("iteration {} has no validation loss for {id}", c.iteration))
                    })?;
                }
                let better = match best {
                    None => true,
                    Some((s, it, _)) => sum < s || (sum == s && c.iteration < it),
                };
                if better {
                    best = Some((sum, c.iteration, c));
                }
            }
            best.map(|(_, _, c)| c)
                .ok_or_else(|| Error::State("a seed has no checkpoints".into()))
        })
        .collect()
}

/// The ensemble used to segment `test_id`: one checkpoint per seed, chosen on the
/// test image's two validation images.
pub fn select_ensemble<'a>(per_seed: &'a [Vec<Checkpoint>], test_id: &str, plan: &FoldPlan) -> Result<Vec<&'a Checkpoint>> {
    select_by_validation(per_seed, plan.validation_for(test_id)?)
}

/// Flattens per-fold ensembles into one list, rejecting incomplete folds and
/// repeated networks.
pub fn assemble_global_ensemble(per_fold: &[Vec<ParamSet>], num_folds: usize, seeds_per_fold: usize) -> Result<Vec<ParamSet>> {
    if per_fold.len() != num_folds {
        return Err(Error::State(format!("{} of {num_folds} folds trained", per_fold.len())));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(num_folds * seeds_per_fold);
    for (k, members) in per_fold.iter().enumerate() {
        if members.len() != seeds_per_fold {
            return Err(Error::State(format!(
                "fold {k} has {} of {seeds_per_fold} networks",
                members.len()
            )));
        }
        for p in members {
            if !seen.insert((p.spec_hash.clone(), p.seed)) {
                return Err(Error::Integrity(format!("network with seed {} appears twice", p.seed)));
            }
            out.push(p.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use crate::volume_io::{Grid, IntensityKind};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(1999, &cfg), 0.001);
        assert!((lr_at(2000, &cfg) - 0.0007).abs() < 1e-15);
        assert!((lr_at(10_000, &cfg) - 0.001 * 0.7f64.powi(5)).abs() < 1e-15);
    }

    #[test]
    fn fold_plan_partitions() {
        for (n, k) in [(18, 6), (12, 3)] {
            let plan = make_fold_plan(&ids(n), k, 42).unwrap();
            assert_eq!(plan.folds.len(), k);
            let mut all: Vec<String> = plan.folds.iter().flatten().cloned().collect();
            all.sort();
            assert_eq!(all, ids(n));
            for fold in &plan.folds {
                assert_eq!(fold.len(), n / k);
                for id in fold {
                    let v = plan.validation_for(id).unwrap();
                    assert_eq!(v.len(), 2);
                    assert!(!v.contains(id));
                    assert!(v.iter().all(|x| fold.contains(x)));
                }
            }
            assert_eq!(plan, make_fold_plan(&ids(n), k, 42).unwrap());
        }
        assert_ne!(
            make_fold_plan(&ids(18), 6, 1).unwrap(),
            make_fold_plan(&ids(18), 6, 2).unwrap()
        );
        assert!(matches!(make_fold_plan(&ids(10), 3, 0), Err(Error::Argument(_))));
    }

    fn grid(shape: [usize; 3]) -> Grid {
        Grid::new(shape, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn exact_size_volume_gives_its_only_patch() {
        let g = grid([4, 4, 2]);
        let image = Volume::new(g, (0..32).map(|i| i as f64 / 32.0).collect(), IntensityKind::Normalized).unwrap();
        let labels = LabelMap::new(g, (0..32).map(|i| (i % 8) as u8).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, t) = sample_patch(&image, &labels, [4, 4, 2], &mut rng);
        let (x2, t2) = sample_patch(&image, &labels, [4, 4, 2], &mut rng);
        assert_eq!((&x, &t), (&x2, &t2));
        assert_eq!(x, image.data.iter().map(|&v| v as f32).collect::<Vec<_>>());
        for i in 0..32 {
            assert_eq!(t[(i % 8) * 32 + i], 1.0);
        }
    }

    #[test]
    fn short_axis_is_padded_with_background() {
        let g = grid([4, 4, 2]);
        let image = Volume::new(g, vec![0.5; 32], IntensityKind::Normalized).unwrap();
        let labels = LabelMap::new(g, vec![3; 32]).unwrap();
        let (x, t) = sample_patch(&image, &labels, [4, 4, 5], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(x.len(), 80);
        assert!(x[..32].iter().all(|&v| v == 0.5));
        assert!(x[32..].iter().all(|&v| v == 0.0));
        assert!(t[3 * 80..3 * 80 + 32].iter().all(|&v| v == 1.0));
        assert!(t[32..80].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn patch_origins_are_uniform() {
        // Label = x position, so the class at the patch center reveals the origin.
        let g = grid([11, 1, 1]);
        let image = Volume::new(g, vec![0.0; 11], IntensityKind::Normalized).unwrap();
        let labels = LabelMap::new(g, (0..11).map(|x| x.min(7) as u8).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let mut hist = [0usize; 8];
        for _ in 0..draws {
            let (_, t) = sample_patch(&image, &labels, [4, 1, 1], &mut rng);
            // Origin 0..=7 → class at patch index 0 equals the origin.
            let c = (0..8).find(|&c| t[c * 4] == 1.0).unwrap();
            hist[c] += 1;
        }
        let p = 1.0 / 8.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hist {
            assert!((h as f64 - mean).abs() < 3.0 * sd, "{hist:?}");
        }
    }

    fn ckpt(seed: u64, iteration: usize, losses: &[(&str, f64)]) -> Checkpoint {
        let spec = NetworkSpec {
            base_width: 1,
            num_resblocks: 1,
            patch_shape: [8, 8, 1],
            ..NetworkSpec::default()
        };
        Checkpoint {
            params: network::build(&spec, seed).unwrap(),
            iteration,
            val_losses: losses.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn plan3() -> FoldPlan {
        FoldPlan {
            folds: vec![vec!["a".into(), "b".into(), "c".into()]],
            validation: [
                ("a", vec!["b", "c"]),
                ("b", vec!["c", "a"]),
                ("c", vec!["a", "b"]),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.into_iter().map(String::from).collect()))
            .collect(),
        }
    }

    #[test]
    fn selection_picks_minimum_with_earliest_tie() {
        let curve = |seed| {
            (1..=10)
                .map(|i| {
                    let it = i * 1000;
                    let l = -1.0 - (1.0 - ((it as f64 - 4000.0) / 6000.0).powi(2));
                    ckpt(seed, it, &[("b", l / 2.0), ("c", l / 2.0), ("a", -7.9)])
                })
                .collect::<Vec<_>>()
        };
        let per_seed = vec![curve(1), curve(2), curve(3)];
        let chosen = select_ensemble(&per_seed, "a", &plan3()).unwrap();
        assert_eq!(chosen.len(), 3);
        assert!(chosen.iter().all(|c| c.iteration == 4000));

        let flat = vec![vec![
            ckpt(1, 500, &[("b", -3.0), ("c", -3.0)]),
            ckpt(1, 1000, &[("b", -3.5), ("c", -2.5)]),
        ]];
        assert_eq!(select_ensemble(&flat, "a", &plan3()).unwrap()[0].iteration, 500);
        let mut reversed = flat.clone();
        reversed[0].reverse();
        assert_eq!(select_ensemble(&reversed, "a", &plan3()).unwrap()[0].iteration, 500);

        let monotone = vec![(1..=4)
            .map(|i| ckpt(1, i * 100, &[("b", -(i as f64)), ("c", 0.0)]))
            .collect()];
        assert_eq!(select_ensemble(&monotone, "a", &plan3()).unwrap()[0].iteration, 400);

        let missing = vec![vec![ckpt(1, 100, &[("b", -1.0)])]];
        assert!(matches!(select_ensemble(&missing, "a", &plan3()), Err(Error::State(_))));
    }

    #[test]
    fn global_ensemble_counts_and_uniqueness() {
        let fold = |base: u64| (0..3).map(|s| ckpt(base + s, 1, &[]).params).collect::<Vec<_>>();
        let six: Vec<_> = (0..6).map(|k| fold(10 * k)).collect();
        assert_eq!(assemble_global_ensemble(&six, 6, 3).unwrap().len(), 18);
        let three: Vec<_> = (0..3).map(|k| fold(10 * k)).collect();
        assert_eq!(assemble_global_ensemble(&three, 3, 3).unwrap().len(), 9);
        assert!(matches!(assemble_global_ensemble(&three, 6, 3), Err(Error::State(_))));
        let dup = vec![fold(0), fold(0), fold(20)];
        assert!(matches!(assemble_global_ensemble(&dup, 3, 3), Err(Error::Integrity(_))));
    }

    #[test]
    fn validation_grid_is_fixed() {
        let o = validation_origins([64, 64, 64], [64, 64, 5]);
        assert_eq!(o.len(), 8);
        assert_eq!(o[0], [0, 0, 0]);
        assert_eq!(o[7], [0, 0, 59]);
        assert!(o.windows(2).all(|w| w[0][2] < w[1][2]));
    }

    fn toy_image(id: &str, seed: u64, poison: bool) -> PreparedImage {
        let g = grid([16, 16, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..g.len())
            .map(|i| {
                let [x, y, _] = g.coords(i);
                ((x / 4 + y / 4) % 8) as u8
            })
            .collect();
        let data = labels
            .iter()
            .map(|&l| 0.05 + 0.1 * l as f64 + rng.random_range(-0.04..0.04))
            .collect();
        let mut image = Volume::new(g, data, IntensityKind::Normalized).unwrap();
        if poison {
            image.data.fill(f64::NAN);
        }
        PreparedImage {
            id: id.into(),
            image,
            labels: LabelMap::new(g, labels).unwrap(),
        }
    }

    fn toy_setup(poison: bool) -> (FoldPlan, BTreeMap<String, PreparedImage>, TrainConfig, NetworkSpec) {
        let plan = FoldPlan {
            folds: vec![vec!["a".into()], vec!["b".into()]],
            validation: BTreeMap::new(),
        };
        let data = [("a", 1), ("b", 2)]
            .into_iter()
            .map(|(id, s)| (id.to_string(), toy_image(id, s, poison)))
            .collect();
        let cfg = TrainConfig {
            iterations: 10,
            val_every: 10,
            batch_size: 2,
            patch_shape: [8, 8, 5],
            ..TrainConfig::default()
        };
        let spec = NetworkSpec {
            base_width: 2,
            num_resblocks: 1,
            patch_shape: [8, 8, 5],
            ..NetworkSpec::default()
        };
        (plan, data, cfg, spec)
    }

    #[test]
    fn one_checkpoint_per_validation_interval() {
        let (plan, data, cfg, spec) = toy_setup(false);
        let ck = train_one(0, 3, &plan, &data, &cfg, &spec, None).unwrap();
        assert_eq!(ck.len(), 1);
        assert_eq!(ck[0].iteration, 10);
        assert_eq!(ck[0].val_losses.keys().collect::<Vec<_>>(), ["a"]);
        let cfg = TrainConfig { iterations: 25, val_every: 10, ..cfg };
        let its: Vec<usize> = train_one(0, 3, &plan, &data, &cfg, &spec, None)
            .unwrap()
            .iter()
            .map(|c| c.iteration)
            .collect();
        assert_eq!(its, [10, 20]);
    }

    #[test]
    fn training_is_reproducible_and_stored() {
        let (plan, data, cfg, spec) = toy_setup(false);
        let dir = tempfile::tempdir().unwrap();
        let a = train_one(1, 8, &plan, &data, &cfg, &spec, Some(dir.path())).unwrap();
        let b = train_one(1, 8, &plan, &data, &cfg, &spec, None).unwrap();
        assert_eq!(a, b);
        let manifest = checkpoint_dir(dir.path(), 1, 8, 10).join(MANIFEST_FILE);
        let first = fs::read(&manifest).unwrap();
        let loaded = load_run(dir.path(), 1, 8, &spec).unwrap().unwrap();
        assert_eq!(loaded, a);
        train_one(1, 8, &plan, &data, &cfg, &spec, Some(dir.path())).unwrap();
        assert_eq!(fs::read(&manifest).unwrap(), first);
        assert!(load_run(dir.path(), 0, 8, &spec).unwrap().is_none());
        fs::write(checkpoint_dir(dir.path(), 1, 8, 10).join(PARAMS_FILE), b"CSPS\x01").unwrap();
        assert!(load_run(dir.path(), 1, 8, &spec).is_err());
    }

    #[test]
    fn nan_input_is_a_numeric_error() {
        let (plan, data, cfg, spec) = toy_setup(true);
        let err = train_one(0, 1, &plan, &data, &cfg, &spec, None).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }
}
