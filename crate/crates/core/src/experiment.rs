//! End-to-end cross-validation runs and the report built from their outputs.
//!
//! Every subordinate seed comes from the run's top-level seed through
//! [`derive_seed`]: counter 0 seeds the phantom cohort, counter 1 the fold plan and
//! counter `100 + fold·seeds_per_fold + replica` each network.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Modality, Resource};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_json, write_json};
use crate::inference::segment;
use crate::metrics::{self, auto_grade, evaluate, MetricsReport};
use crate::network::{NetworkSpec, ParamSet};
use crate::phantom::{generate_cohort, PhantomConfig, MANIFEST_FILE};
use crate::stats::{self, agreement_summary, bland_altman, paired_t_test, tost_equivalence, Confusion};
use crate::training::{
    self, load_run, make_fold_plan, prepare_image, select_ensemble, train_one, Checkpoint, FoldPlan, TrainConfig,
};
use crate::volume_io::{self, PreprocessSettings, ASCENDING_AORTA, FULL_HEART_LABELS, LABEL_NAMES};

/// Environment variable that overrides the configured top-level seed.
pub const SEED_ENV: &str = "CARDISEG_SEED";

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const VOLUMES_FILE: &str = "volumes.csv";
pub const GRADES_FILE: &str = "grades.csv";
const FOLD_PLAN_FILE: &str = "fold_plan.json";
const SELECTION_FILE: &str = "selection.json";
const ACCESS_LOG_FILE: &str = "training_access_log.json";
const REPORTS_DIR: &str = "reports";
const NCCT_REPORTS_DIR: &str = "ncct_reports";
const SEGMENTATIONS_DIR: &str = "segmentations";
const CHECKPOINTS_DIR: &str = "checkpoints";
const REPORT_DIR: &str = "report";

/// Side of the square aortic ROI used for attenuation comparisons.
const ROI_SIDE_MM: f64 = 9.0;

/// The seed in `CARDISEG_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn derive_seed(top: u64, counter: u64) -> u64 {
    top.wrapping_mul(1000).wrapping_add(counter)
}

pub fn training_seed(top: u64, fold: usize, replica: usize, seeds_per_fold: usize) -> u64 {
    derive_seed(top, 100 + (fold * seeds_per_fold + replica) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub cohort_size: usize,
    pub num_folds: usize,
    /// Existing cohort manifest; a phantom cohort is generated when absent.
    pub manifest: Option<PathBuf>,
    pub phantom: PhantomConfig,
    pub network: NetworkSpec,
    pub training: TrainConfig,
    pub preprocess: PreprocessSettings,
    pub overlap: f64,
    pub equivalence_margin_hu: f64,
    pub alpha: f64,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self {
                profile,
                seed: 0,
                cohort_size: 18,
                num_folds: 6,
                manifest: None,
                phantom: PhantomConfig::default(),
                network: NetworkSpec::default(),
                training: TrainConfig::default(),
                preprocess: PreprocessSettings::default(),
                overlap: 0.0,
                equivalence_margin_hu: 15.0,
                alpha: 0.05,
            },
            Profile::Desk => Self {
                profile,
                cohort_size: 12,
                num_folds: 3,
                network: NetworkSpec::desk(),
                training: TrainConfig::desk(),
                preprocess: PreprocessSettings {
                    target_spacing_mm: 1.5,
                    ..PreprocessSettings::default()
                },
                ..Self::for_profile(Profile::Paper)
            },
        }
    }

    /// Profile defaults overlaid with the fields present in `json` (nested objects
    /// merge key by key). The profile itself is read from `json`, else `fallback`.
    /// With `pinned`, values fixed by the profile may not be overridden.
    pub fn from_json(json: &serde_json::Value, fallback: Profile, pinned: bool) -> Result<Self> {
        let profile = match json.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => fallback,
        };
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut base, json);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        if pinned {
            cfg.check_profile()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Profile, pinned: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&json, fallback, pinned)
    }

    /// Applies `CARDISEG_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Some(s) = env_seed()? {
            self.seed = s;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.network.validate()?;
        self.training.validate()?;
        self.preprocess.validate()?;
        if self.training.patch_shape != self.network.patch_shape {
            return Err(Error::Config("training and network patch shapes differ".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if self.num_folds == 0 || self.cohort_size % self.num_folds != 0 || self.cohort_size / self.num_folds < 3 {
            return Err(Error::Config(format!(
                "{} patients do not split into {} folds of at least 3",
                self.cohort_size, self.num_folds
            )));
        }
        Ok(())
    }

    /// Rejects overrides of the values a profile pins down.
    pub fn check_profile(&self) -> Result<()> {
        let fixed = Self::for_profile(self.profile);
        let pinned = [
            ("training.iterations", self.training.iterations == fixed.training.iterations),
            ("training.patch_shape", self.training.patch_shape == fixed.training.patch_shape),
            ("network.base_width", self.network.base_width == fixed.network.base_width),
            ("num_folds", self.num_folds == fixed.num_folds),
            ("training.seeds_per_fold", self.training.seeds_per_fold == fixed.training.seeds_per_fold),
        ];
        if let Some((name, _)) = pinned.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("{name} is fixed by the {:?} profile", self.profile)));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrozenConfig {
    code_version: String,
    config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n: usize,
    pub bland_altman_ml: stats::BlandAltmanResult,
    /// Bland-Altman on `100·(a − b)/b`.
    pub bland_altman_pct: stats::BlandAltmanResult,
    pub t_test: stats::TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeVolumeStats {
    pub reference_ccta: f64,
    pub auto_vnc: f64,
    pub auto_ncct: f64,
    /// Percentage points, NCCT minus CCTA.
    pub ncct_minus_ccta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub profile: Profile,
    pub seed: u64,
    pub code_version: String,
    pub num_patients: usize,
    pub num_folds: usize,
    pub seeds_per_fold: usize,
    pub voxel_spacing_mm: [f64; 3],
    pub vnc_mean_dsc: f64,
    pub vnc_sd_dsc: f64,
    pub vnc_mean_assd_mm: f64,
    pub vnc_sd_assd_mm: f64,
    pub vnc_mean_assd_voxels: f64,
    pub vnc_dsc_per_structure: BTreeMap<String, f64>,
    pub ncct_mean_dsc: f64,
    pub ncct_dsc_per_structure: BTreeMap<String, f64>,
    /// Automatic NCCT volumes vs CCTA reference volumes.
    pub ncct_vs_ccta: BTreeMap<String, AgreementStats>,
    /// Automatic VNC volumes vs CCTA reference volumes.
    pub vnc_vs_ccta: BTreeMap<String, AgreementStats>,
    /// Mean fraction of the full heart per structure.
    pub relative_volumes: BTreeMap<String, RelativeVolumeStats>,
    /// Percentage volume change of the reference labels between acquisitions.
    pub reference_ncct_deficit_pct: BTreeMap<String, f64>,
    /// `100·(1 − scale³)` when the cohort is a generated phantom.
    pub injected_deficit_pct: Option<f64>,
    pub attenuation_vnc_vs_ncct: stats::TostResult,
    pub attenuation_vnc_mean_hu: f64,
    pub attenuation_ncct_mean_hu: f64,
    pub ncct_grade_counts: [u64; 5],
    pub training_resources: Vec<Resource>,
    pub training_read_ncct: bool,
}

fn read_manifest_path(cfg: &RunConfig, exp: &Path) -> Result<PathBuf> {
    if let Some(m) = &cfg.manifest {
        return Ok(m.clone());
    }
    if cfg.profile != Profile::Desk {
        return Err(Error::Config("the paper profile needs an existing cohort manifest".into()));
    }
    let dir = exp.join("cohort");
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        let phantom = PhantomConfig {
            seed: derive_seed(cfg.seed, 0),
            ..cfg.phantom.clone()
        };
        generate_cohort(cfg.cohort_size, &phantom, &dir)?;
    }
    Ok(path)
}

/// Trains every (fold, replica) network not already complete in the checkpoint store.
fn train_all(
    cfg: &RunConfig,
    plan: &FoldPlan,
    data: &BTreeMap<String, training::PreparedImage>,
    store: &Path,
) -> Result<Vec<Vec<Vec<Checkpoint>>>> {
    let spf = cfg.training.seeds_per_fold;
    (0..plan.folds.len())
        .map(|fold| {
            (0..spf)
                .map(|r| {
                    let seed = training_seed(cfg.seed, fold, r, spf);
                    match load_run(store, fold, seed, &cfg.network)? {
                        Some(c) => Ok(c),
                        None => train_one(fold, seed, plan, data, &cfg.training, &cfg.network, Some(store)),
                    }
                })
                .collect()
        })
        .collect()
}

fn per_patient<T: Serialize>(dir: &Path, id: &str, value: &T) -> Result<()> {
    write_json(&dir.join(format!("{id}.json")), value)
}

/// Center of the ascending-aorta label in mm, or `None` if it is absent.
fn aorta_center(labels: &volume_io::LabelMap) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (i, &l) in labels.data.iter().enumerate() {
        if l == ASCENDING_AORTA {
            let [x, y, z] = labels.grid.coords(i);
            let p = labels.grid.position(x, y, z);
            for a in 0..3 {
                sum[a] += p[a];
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

fn agreement(pairs: &[(f64, f64)]) -> Result<AgreementStats> {
    let pct: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (100.0 * (a - b) / b, 0.0)).collect();
    Ok(AgreementStats {
        n: pairs.len(),
        bland_altman_ml: bland_altman(pairs)?,
        bland_altman_pct: bland_altman(&pct)?,
        t_test: paired_t_test(pairs)?,
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let d = stats::describe(xs).expect("nonempty");
    (d.mean, d.sd)
}

fn volume_structures() -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = FULL_HEART_LABELS
        .iter()
        .map(|&l| (LABEL_NAMES[l as usize].to_string(), vec![l]))
        .collect();
    v.push(("full_heart".into(), FULL_HEART_LABELS.to_vec()));
    v
}

/// Runs (or resumes) the full cross-validation protocol into `exp`.
pub fn run_crossval(cfg: &RunConfig, exp: &Path) -> Result<Summary> {
    cfg.validate()?;
    let frozen = FrozenConfig {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
    };
    let cfg_path = exp.join(CONFIG_FILE);
    if cfg_path.exists() {
        let prior: FrozenConfig = read_json(&cfg_path)?;
        if prior != frozen {
            return Err(Error::Config(format!(
                "{} belongs to a different run configuration",
                exp.display()
            )));
        }
    } else {
        write_json(&cfg_path, &frozen)?;
    }

    let manifest_path = read_manifest_path(cfg, exp)?;
    let train_cohort = Cohort::open(&manifest_path)?;
    let ids = train_cohort.ids();
    if ids.len() != cfg.cohort_size {
        return Err(Error::Data(format!(
            "manifest lists {} patients, configuration expects {}",
            ids.len(),
            cfg.cohort_size
        )));
    }
    let plan = make_fold_plan(&ids, cfg.num_folds, derive_seed(cfg.seed, 1))?;
    write_json(&exp.join(FOLD_PLAN_FILE), &plan)?;

    let data: BTreeMap<_, _> = ids
        .iter()
        .map(|id| Ok((id.clone(), prepare_image(&train_cohort, id, &cfg.preprocess)?)))
        .collect::<Result<_>>()?;
    let store = exp.join(CHECKPOINTS_DIR);
    let runs = train_all(cfg, &plan, &data, &store)?;
    drop(data);
    let log = train_cohort.access_log();
    write_json(&exp.join(ACCESS_LOG_FILE), &log)?;
    let mut training_resources: Vec<Resource> = log.iter().map(|r| r.resource).collect();
    training_resources.sort();
    training_resources.dedup();
    let training_read_ncct = training_resources
        .iter()
        .any(|r| matches!(r, Resource::Image(Modality::Ncct) | Resource::Labels(Modality::Ncct)));

    let cohort = Cohort::open(&manifest_path)?;
    let (reports_dir, ncct_dir, seg_dir) = (exp.join(REPORTS_DIR), exp.join(NCCT_REPORTS_DIR), exp.join(SEGMENTATIONS_DIR));
    let mut selection = BTreeMap::new();
    let mut vnc_reports: BTreeMap<String, MetricsReport> = BTreeMap::new();
    let mut ncct_reports: BTreeMap<String, MetricsReport> = BTreeMap::new();
    let mut reference_ncct_volumes = BTreeMap::new();
    let mut grades = BTreeMap::new();
    let mut attenuation = Vec::new();
    let mut spacing = [0.0; 3];
    for (fold, members) in plan.folds.iter().enumerate() {
        for id in members {
            let chosen = select_ensemble(&runs[fold], id, &plan)?;
            selection.insert(
                id.clone(),
                chosen
                    .iter()
                    .map(|c| (c.params.seed, c.iteration))
                    .collect::<Vec<_>>(),
            );
            let ensemble: Vec<ParamSet> = chosen.iter().map(|c| c.params.clone()).collect();

            let vnc = cohort.image(id, Modality::Vnc)?;
            spacing = vnc.grid.spacing;
            let reference = cohort.labels(id, Modality::Ccta)?;
            let seg_vnc = segment(&ensemble, &vnc, &cfg.preprocess, cfg.overlap)?.labels;
            volume_io::write_labels(&seg_vnc, seg_dir.join(format!("{id}_vnc_labels.vol")))?;
            let report = evaluate(&seg_vnc, &reference)?;
            per_patient(&reports_dir, id, &report)?;
            vnc_reports.insert(id.clone(), report);

            let ncct = cohort.image(id, Modality::Ncct)?;
            let reference_ncct = cohort.labels(id, Modality::Ncct)?;
            let seg_ncct = segment(&ensemble, &ncct, &cfg.preprocess, cfg.overlap)?.labels;
            volume_io::write_labels(&seg_ncct, seg_dir.join(format!("{id}_ncct_labels.vol")))?;
            let report = evaluate(&seg_ncct, &reference_ncct)?;
            per_patient(&ncct_dir, id, &report)?;
            ncct_reports.insert(id.clone(), report);
            grades.insert(id.clone(), auto_grade(&seg_ncct, &reference_ncct)?.grade);
            reference_ncct_volumes.insert(id.clone(), metrics::label_volumes(&reference_ncct));

            let roi = |img: &volume_io::Volume, labels: &volume_io::LabelMap| -> Result<f64> {
                let c = aorta_center(labels)
                    .ok_or_else(|| Error::Data(format!("{id}: no aorta in the reference labels")))?;
                Ok(volume_io::roi_mean(img, c, ROI_SIDE_MM)?.mean)
            };
            attenuation.push((roi(&vnc, &reference)?, roi(&ncct, &reference_ncct)?));
        }
    }
    write_json(&exp.join(SELECTION_FILE), &selection)?;

    // Volume table: reference CCTA, automatic VNC, automatic NCCT.
    let mut csv_out = String::from("case_id,structure,ccta_reference_ml,vnc_auto_ml,ncct_auto_ml\n");
    let sum = |v: &[f64; 8], labels: &[u8]| labels.iter().map(|&l| v[l as usize]).sum::<f64>();
    let mut ncct_pairs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut vnc_pairs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut ref_deficit: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for id in &ids {
        let vr = &vnc_reports[id];
        let reference: [f64; 8] = std::array::from_fn(|l| {
            vr.structures
                .values()
                .find(|s| s.label as usize == l)
                .map_or(0.0, |s| s.reference_volume_ml)
        });
        let (va, na) = (vr.volumes(), ncct_reports[id].volumes());
        for (name, labels) in volume_structures() {
            let (r, v, n) = (sum(&reference, &labels), sum(&va, &labels), sum(&na, &labels));
            csv_out.push_str(&format!("{id},{name},{r},{v},{n}\n"));
            ncct_pairs.entry(name.clone()).or_default().push((n, r));
            vnc_pairs.entry(name.clone()).or_default().push((v, r));
            let rn = sum(&reference_ncct_volumes[id], &labels);
            ref_deficit.entry(name).or_default().push(100.0 * (rn - r) / r);
        }
    }
    atomic_write(&exp.join(VOLUMES_FILE), csv_out.as_bytes())?;
    let mut grades_csv = String::from("case_id,grade\n");
    let mut grade_counts = [0u64; 5];
    for (id, g) in &grades {
        grades_csv.push_str(&format!("{id},{g}\n"));
        grade_counts[*g as usize - 1] += 1;
    }
    atomic_write(&exp.join(GRADES_FILE), grades_csv.as_bytes())?;

    let mut relative = BTreeMap::new();
    let rel_of = |v: [f64; 8]| metrics::relative_volumes(&v);
    let mut rel_sums = [[0.0; 5]; 3];
    for id in &ids {
        let vr = &vnc_reports[id];
        let reference: [f64; 8] = std::array::from_fn(|l| {
            vr.structures
                .values()
                .find(|s| s.label as usize == l)
                .map_or(0.0, |s| s.reference_volume_ml)
        });
        for (k, v) in [reference, vr.volumes(), ncct_reports[id].volumes()].into_iter().enumerate() {
            let r = rel_of(v)?;
            for s in 0..5 {
                rel_sums[k][s] += r[s] / ids.len() as f64;
            }
        }
    }
    for (s, &l) in FULL_HEART_LABELS.iter().enumerate() {
        relative.insert(
            LABEL_NAMES[l as usize].to_string(),
            RelativeVolumeStats {
                reference_ccta: rel_sums[0][s],
                auto_vnc: rel_sums[1][s],
                auto_ncct: rel_sums[2][s],
                ncct_minus_ccta_pp: 100.0 * (rel_sums[2][s] - rel_sums[0][s]),
            },
        );
    }

    let per_structure = |reports: &BTreeMap<String, MetricsReport>| -> BTreeMap<String, f64> {
        LABEL_NAMES[1..]
            .iter()
            .map(|name| {
                let m = reports.values().map(|r| r.structures[*name].dsc).sum::<f64>() / reports.len() as f64;
                (name.to_string(), m)
            })
            .collect()
    };
    let vnc_dsc: Vec<f64> = vnc_reports.values().map(|r| r.mean_dsc).collect();
    // A structure missing from the output has no surface distance; count it as the
    // largest distance observed in that patient so it cannot flatter the mean.
    let vnc_assd: Vec<f64> = vnc_reports
        .values()
        .map(|r| {
            let worst = r.structures.values().filter_map(|s| s.assd_mm).fold(0.0, f64::max);
            r.structures.values().map(|s| s.assd_mm.unwrap_or(worst)).sum::<f64>() / r.structures.len() as f64
        })
        .collect();
    let (vnc_mean_dsc, vnc_sd_dsc) = mean_sd(&vnc_dsc);
    let (vnc_mean_assd_mm, vnc_sd_assd_mm) = mean_sd(&vnc_assd);
    let voxel = spacing.iter().sum::<f64>() / 3.0;
    let (att_vnc, _) = mean_sd(&attenuation.iter().map(|a| a.0).collect::<Vec<_>>());
    let (att_ncct, _) = mean_sd(&attenuation.iter().map(|a| a.1).collect::<Vec<_>>());

    let summary = Summary {
        profile: cfg.profile,
        seed: cfg.seed,
        code_version: frozen.code_version,
        num_patients: ids.len(),
        num_folds: cfg.num_folds,
        seeds_per_fold: cfg.training.seeds_per_fold,
        voxel_spacing_mm: spacing,
        vnc_mean_dsc,
        vnc_sd_dsc,
        vnc_mean_assd_mm,
        vnc_sd_assd_mm,
        vnc_mean_assd_voxels: vnc_mean_assd_mm / voxel,
        vnc_dsc_per_structure: per_structure(&vnc_reports),
        ncct_mean_dsc: ncct_reports.values().map(|r| r.mean_dsc).sum::<f64>() / ncct_reports.len() as f64,
        ncct_dsc_per_structure: per_structure(&ncct_reports),
        ncct_vs_ccta: ncct_pairs
            .iter()
            .map(|(k, p)| Ok((k.clone(), agreement(p)?)))
            .collect::<Result<_>>()?,
        vnc_vs_ccta: vnc_pairs
            .iter()
            .map(|(k, p)| Ok((k.clone(), agreement(p)?)))
            .collect::<Result<_>>()?,
        relative_volumes: relative,
        reference_ncct_deficit_pct: ref_deficit.iter().map(|(k, v)| (k.clone(), mean_sd(v).0)).collect(),
        injected_deficit_pct: cfg
            .manifest
            .is_none()
            .then(|| 100.0 * (1.0 - cfg.phantom.ncct_scale.powi(3))),
        attenuation_vnc_vs_ncct: tost_equivalence(&attenuation, cfg.equivalence_margin_hu, cfg.alpha)?,
        attenuation_vnc_mean_hu: att_vnc,
        attenuation_ncct_mean_hu: att_ncct,
        ncct_grade_counts: grade_counts,
        training_resources,
        training_read_ncct,
    };
    write_json(&exp.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Lists the artifacts a completed experiment must contain that are missing.
pub fn missing_artifacts(exp: &Path) -> Vec<PathBuf> {
    let mut missing: Vec<PathBuf> = [CONFIG_FILE, SUMMARY_FILE, VOLUMES_FILE, GRADES_FILE, FOLD_PLAN_FILE]
        .iter()
        .map(|f| exp.join(f))
        .filter(|p| !p.exists())
        .collect();
    if let Ok(plan) = read_json::<FoldPlan>(&exp.join(FOLD_PLAN_FILE)) {
        for id in plan.folds.iter().flatten() {
            let p = exp.join(REPORTS_DIR).join(format!("{id}.json"));
            if !p.exists() {
                missing.push(p);
            }
        }
    }
    missing
}

#[derive(Debug, Deserialize)]
struct VolumeRow {
    case_id: String,
    structure: String,
    ccta_reference_ml: f64,
    vnc_auto_ml: f64,
    ncct_auto_ml: f64,
}

fn bland_altman_svg(path: &Path, title: &str, points: &[(f64, f64)], ba: &stats::BlandAltmanResult) -> Result<()> {
    let render = || -> std::result::Result<String, Box<dyn std::error::Error>> {
        let mut svg = String::new();
        {
            let root = SVGBackend::with_string(&mut svg, (480, 360)).into_drawing_area();
            root.fill(&WHITE)?;
            let xs = points.iter().map(|p| p.0);
            let (xmin, xmax) = xs.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            let ys = points.iter().map(|p| p.1).chain([ba.loa_low, ba.loa_high, 0.0]);
            let (ymin, ymax) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
            let pad = |lo: f64, hi: f64| {
                let d = ((hi - lo) * 0.1).max(1e-3);
                (lo - d)..(hi + d)
            };
            let mut chart = ChartBuilder::on(&root)
                .caption(title, ("sans-serif", 16))
                .margin(10)
                .x_label_area_size(35)
                .y_label_area_size(45)
                .build_cartesian_2d(pad(xmin, xmax), pad(ymin, ymax))?;
            chart
                .configure_mesh()
                .x_desc("mean of NCCT and CCTA (mL)")
                .y_desc("NCCT − CCTA (mL)")
                .draw()?;
            chart.draw_series(points.iter().map(|&(x, y)| Circle::new((x, y), 3, BLUE.filled())))?;
            let xr = pad(xmin, xmax);
            for (y, style) in [(ba.bias, RED.stroke_width(2)), (ba.loa_low, BLACK.stroke_width(1)), (ba.loa_high, BLACK.stroke_width(1))] {
                chart.draw_series(LineSeries::new([(xr.start, y), (xr.end, y)], style))?;
            }
            root.present()?;
        }
        Ok(svg)
    };
    let svg = render().map_err(|e| Error::Format(format!("plot {}: {e}", path.display())))?;
    atomic_write(path, svg.as_bytes())
}

/// Writes CSV tables and SVG plots into `exp/report/`. `grades` optionally supplies
/// a two-observer confusion matrix for the grade-agreement table.
pub fn run_report(exp: &Path, grades: Option<&Confusion>) -> Result<Vec<PathBuf>> {
    let missing = missing_artifacts(exp);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::State(format!("experiment is incomplete; missing: {}", list.join(", "))));
    }
    let out = exp.join(REPORT_DIR);
    let mut written = Vec::new();
    fn emit(written: &mut Vec<PathBuf>, out: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let p = out.join(name);
        atomic_write(&p, bytes)?;
        written.push(p);
        Ok(())
    }

    let mut rdr = csv::Reader::from_path(exp.join(VOLUMES_FILE))
        .map_err(|e| Error::Format(format!("{VOLUMES_FILE}: {e}")))?;
    let rows: Vec<VolumeRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{VOLUMES_FILE}: {e}")))?;
    let mut by_structure: BTreeMap<usize, (String, Vec<&VolumeRow>)> = BTreeMap::new();
    let order: Vec<String> = volume_structures().into_iter().map(|(n, _)| n).collect();
    for r in &rows {
        let k = order
            .iter()
            .position(|n| *n == r.structure)
            .ok_or_else(|| Error::Format(format!("unknown structure {}", r.structure)))?;
        by_structure.entry(k).or_insert_with(|| (r.structure.clone(), Vec::new())).1.push(r);
    }

    let mut ba_csv = String::from("structure,n,bias_ml,sd_ml,loa_low_ml,loa_high_ml,t,p\n");
    let mut scatter = String::from("structure,case_id,mean_ml,difference_ml\n");
    for (name, rs) in by_structure.values() {
        let pairs: Vec<(f64, f64)> = rs.iter().map(|r| (r.ncct_auto_ml, r.ccta_reference_ml)).collect();
        let ba = bland_altman(&pairs)?;
        let t = paired_t_test(&pairs)?;
        ba_csv.push_str(&format!(
            "{name},{},{:.3},{:.3},{:.3},{:.3},{:.4},{:.6}\n",
            ba.n, ba.bias, ba.sd_diff, ba.loa_low, ba.loa_high, t.t, t.p
        ));
        let points: Vec<(f64, f64)> = rs
            .iter()
            .map(|r| ((r.ncct_auto_ml + r.ccta_reference_ml) / 2.0, r.ncct_auto_ml - r.ccta_reference_ml))
            .collect();
        for (r, (m, d)) in rs.iter().zip(&points) {
            scatter.push_str(&format!("{name},{},{m:.4},{d:.4}\n", r.case_id));
        }
        let plot = out.join(format!("bland_altman_{name}.svg"));
        bland_altman_svg(&plot, name, &points, &ba)?;
        written.push(plot);
    }
    emit(&mut written, &out, "bland_altman.csv", ba_csv.as_bytes())?;
    emit(&mut written, &out, "bland_altman_points.csv", scatter.as_bytes())?;

    let mut rel_csv = String::from("case_id,structure,ccta_reference,vnc_auto,ncct_auto\n");
    let mut cases: BTreeMap<&str, Vec<&VolumeRow>> = BTreeMap::new();
    for r in &rows {
        cases.entry(&r.case_id).or_default().push(r);
    }
    for (case, rs) in &cases {
        let full = rs.iter().find(|r| r.structure == "full_heart");
        let Some(full) = full else { continue };
        for r in rs.iter().filter(|r| r.structure != "full_heart") {
            rel_csv.push_str(&format!(
                "{case},{},{:.5},{:.5},{:.5}\n",
                r.structure,
                r.ccta_reference_ml / full.ccta_reference_ml,
                r.vnc_auto_ml / full.vnc_auto_ml,
                r.ncct_auto_ml / full.ncct_auto_ml
            ));
        }
    }
    emit(&mut written, &out, "relative_volumes.csv", rel_csv.as_bytes())?;

    let plan: FoldPlan = read_json(&exp.join(FOLD_PLAN_FILE))?;
    let mut ids: Vec<&String> = plan.folds.iter().flatten().collect();
    ids.sort();
    let mut metrics_csv = String::from("case_id,structure,dsc,assd_mm,hd_mm,volume_ml,reference_volume_ml\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    for id in ids {
        let r: MetricsReport = read_json(&exp.join(REPORTS_DIR).join(format!("{id}.json")))?;
        for name in &LABEL_NAMES[1..] {
            let s = &r.structures[*name];
            metrics_csv.push_str(&format!(
                "{id},{name},{:.4},{},{},{:.4},{:.4}\n",
                s.dsc,
                opt(s.assd_mm),
                opt(s.hd_mm),
                s.volume_ml,
                s.reference_volume_ml
            ));
        }
    }
    emit(&mut written, &out, "structure_metrics.csv", metrics_csv.as_bytes())?;

    if let Some(m) = grades {
        let a = agreement_summary(m)?;
        let mut g = String::from("quantity,value\n");
        g.push_str(&format!("cases,{}\n", a.total));
        g.push_str(&format!("weighted_kappa,{:.2}\n", a.weighted_kappa));
        g.push_str(&format!("raw_agreement,{:.0}%\n", 100.0 * a.raw_agreement));
        g.push_str(&format!(
            "joint_grade_3_or_better,{} ({:.0}%)\n",
            a.joint_leq3_count,
            100.0 * a.joint_leq3_count as f64 / a.total as f64
        ));
        for o in 0..2 {
            g.push_str(&format!("observer_{}_mean_grade,{:.2}\n", o + 1, a.mean_grade_per_observer[o]));
            for (k, c) in a.grade_counts[o].iter().enumerate() {
                g.push_str(&format!(
                    "observer_{}_grade_{},{c} ({:.0}%)\n",
                    o + 1,
                    k + 1,
                    100.0 * *c as f64 / a.total as f64
                ));
            }
        }
        emit(&mut written, &out, "grade_agreement.csv", g.as_bytes())?;
    }
    Ok(written)
}
