//! Manifest-backed access to a patient cohort, with a log of every file read.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::phantom::{Manifest, ManifestEntry};
use crate::volume_io::{self, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ccta,
    Vnc,
    Ncct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Image(Modality),
    /// Reference labels drawn on the given acquisition.
    Labels(Modality),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub patient: String,
    pub resource: Resource,
}

#[derive(Debug)]
pub struct Cohort {
    root: PathBuf,
    pub manifest: Manifest,
    log: Mutex<Vec<AccessRecord>>,
}

impl Cohort {
    /// Opens `manifest.json` (or any manifest path); file paths resolve against its
    /// directory.
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self::new(root, manifest))
    }

    pub fn new(root: PathBuf, manifest: Manifest) -> Self {
        Self {
            root,
            manifest,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.manifest.ids()
    }

    fn path(&self, entry: &ManifestEntry, resource: Resource) -> PathBuf {
        let rel = match resource {
            Resource::Image(Modality::Ccta) => &entry.ccta,
            Resource::Image(Modality::Vnc) => &entry.vnc,
            Resource::Image(Modality::Ncct) => &entry.ncct,
            Resource::Labels(Modality::Ccta | Modality::Vnc) => &entry.labels_ccta,
            Resource::Labels(Modality::Ncct) => &entry.labels_ncct,
        };
        self.root.join(rel)
    }

    fn record(&self, patient: &str, resource: Resource) {
        self.log
            .lock()
            .expect("access log poisoned")
            .push(AccessRecord {
                patient: patient.to_string(),
                resource,
            });
    }

    pub fn image(&self, id: &str, modality: Modality) -> Result<Volume> {
        let entry = self.manifest.get(id)?;
        let resource = Resource::Image(modality);
        self.record(id, resource);
        volume_io::read_volume(self.path(entry, resource))
    }

    /// Reference labels aligned with `modality` (VNC shares the CCTA labels).
    pub fn labels(&self, id: &str, modality: Modality) -> Result<LabelMap> {
        let entry = self.manifest.get(id)?;
        let resource = Resource::Labels(modality);
        self.record(id, resource);
        volume_io::read_labels(self.path(entry, resource))
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("access log poisoned").clear();
    }
}
