//! On-disk workspace layout:
//!
//! ```text
//! root/{id}/image.ppm
//! root/{id}/palette.json
//! root/{id}/labels.pgm        optional
//! root/{id}/semantic.pgm      optional
//! root/{id}/models/seg.json
//! root/{id}/models/fewshot.json
//! root/{id}/models/profile-{name}.json
//! root/{id}/jobs.log          one JSON job record per line
//! ```
//!
//! Every file is written through a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use semnav_core::fewshot::FewshotHead;
use semnav_core::frugal::SegModel;
use semnav_core::irl::RewardWeights;
use semnav_core::raster::{load_image, load_sparse_labels, ImageRaster, LabelPalette, SemanticRaster, SparseLabelRaster};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const IMAGE_FILE: &str = "image.ppm";
pub const PALETTE_FILE: &str = "palette.json";
pub const LABELS_FILE: &str = "labels.pgm";
pub const SEMANTIC_FILE: &str = "semantic.pgm";
pub const JOBS_FILE: &str = "jobs.log";
pub const MODELS_DIR: &str = "models";
pub const SEG_MODEL: &str = "seg.json";
pub const FEWSHOT_MODEL: &str = "fewshot.json";

pub fn profile_file(profile: &str) -> String {
    format!("profile-{profile}.json")
}

/// Profile names become file names, so they are kept to a safe alphabet.
pub fn validate_profile_name(profile: &str) -> Result<()> {
    let ok = !profile.is_empty()
        && profile.len() <= 64
        && profile.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ServiceError::Invalid(format!(
            "profile name '{profile}' must be 1-64 characters of [A-Za-z0-9_-]"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    TrainSeg,
    Fewshot,
    TrainIrl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub workspace: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    /// Registry-relative path of the artifact the job installed.
    pub result: Option<String>,
    /// Workspace model version after installation.
    pub model_version: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Models {
    pub seg: Option<SegModel>,
    pub fewshot: Option<FewshotHead>,
    pub profiles: BTreeMap<String, RewardWeights>,
}

/// Immutable snapshot of one workspace. Jobs build a new snapshot and swap
/// it in whole.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkspaceState {
    pub id: String,
    pub image: ImageRaster,
    pub palette: LabelPalette,
    pub labels: Option<SparseLabelRaster>,
    pub semantic: Option<SemanticRaster>,
    pub models: Models,
    /// Number of completed jobs; every installed model bumps it.
    pub version: u64,
}

impl WorkspaceState {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ServiceError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| ServiceError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ServiceError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ServiceError::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ServiceError::io(path, e)),
    }
}

/// Handle on one workspace directory.
#[derive(Debug, Clone)]
pub struct WorkspaceDir {
    dir: PathBuf,
}

impl WorkspaceDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn model_file(&self, name: &str) -> PathBuf {
        self.dir.join(MODELS_DIR).join(name)
    }

    pub fn save_image(&self, image: &ImageRaster) -> Result<()> {
        write_atomic(&self.file(IMAGE_FILE), &image.save())
    }

    pub fn save_palette(&self, palette: &LabelPalette) -> Result<()> {
        write_atomic(&self.file(PALETTE_FILE), palette.to_json().as_bytes())
    }

    pub fn save_labels(&self, labels: &SparseLabelRaster) -> Result<()> {
        write_atomic(&self.file(LABELS_FILE), &labels.save())
    }

    pub fn save_semantic(&self, semantic: &SemanticRaster) -> Result<()> {
        write_atomic(&self.file(SEMANTIC_FILE), &semantic.save())
    }

    pub fn save_model(&self, name: &str, json: &str) -> Result<()> {
        write_atomic(&self.model_file(name), json.as_bytes())
    }

    pub fn append_job(&self, record: &JobRecord) -> Result<()> {
        let path = self.file(JOBS_FILE);
        let mut line = serde_json::to_string(record).expect("job record serializes");
        line.push('\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| ServiceError::io(&path, e))
    }

    /// Writes every part of `state`; used when a workspace is created.
    pub fn save_all(&self, state: &WorkspaceState) -> Result<()> {
        fs::create_dir_all(self.dir.join(MODELS_DIR)).map_err(|e| ServiceError::io(&self.dir, e))?;
        self.save_image(&state.image)?;
        self.save_palette(&state.palette)?;
        if let Some(labels) = &state.labels {
            self.save_labels(labels)?;
        }
        if let Some(semantic) = &state.semantic {
            self.save_semantic(semantic)?;
        }
        if let Some(seg) = &state.models.seg {
            self.save_model(SEG_MODEL, &seg.to_json())?;
        }
        if let Some(head) = &state.models.fewshot {
            self.save_model(FEWSHOT_MODEL, &head.to_json())?;
        }
        for (name, weights) in &state.models.profiles {
            self.save_model(&profile_file(name), &weights.to_json())?;
        }
        Ok(())
    }

    /// Loads the workspace. Image and palette are required; a broken model
    /// or job log is reported in `errors` and otherwise skipped.
    pub fn load(&self, id: &str) -> Result<LoadReport> {
        let image_path = self.file(IMAGE_FILE);
        let image = load_image(&read(&image_path)?).map_err(|e| ServiceError::corrupt(&image_path, e))?;
        let palette_path = self.file(PALETTE_FILE);
        let palette_text = String::from_utf8(read(&palette_path)?).map_err(|e| ServiceError::corrupt(&palette_path, e))?;
        let palette = LabelPalette::from_json(&palette_text).map_err(|e| ServiceError::corrupt(&palette_path, e))?;

        let mut errors = Vec::new();
        let labels_path = self.file(LABELS_FILE);
        let labels = match read_optional(&labels_path)? {
            Some(bytes) => match load_sparse_labels(&bytes, &palette) {
                Ok(l) if l.dims() == image.dims() => Some(l),
                Ok(l) => {
                    errors.push(ServiceError::corrupt(&labels_path, format!("dimensions {:?} differ from image", l.dims())));
                    None
                }
                Err(e) => {
                    errors.push(ServiceError::corrupt(&labels_path, e));
                    None
                }
            },
            None => None,
        };
        let semantic_path = self.file(SEMANTIC_FILE);
        let semantic = match read_optional(&semantic_path)? {
            Some(bytes) => match SemanticRaster::load(&bytes, &palette) {
                Ok(s) if s.dims() == image.dims() => Some(s),
                Ok(s) => {
                    errors.push(ServiceError::corrupt(&semantic_path, format!("dimensions {:?} differ from image", s.dims())));
                    None
                }
                Err(e) => {
                    errors.push(ServiceError::corrupt(&semantic_path, e));
                    None
                }
            },
            None => None,
        };

        let mut models = Models::default();
        let models_dir = self.dir.join(MODELS_DIR);
        let mut names: Vec<PathBuf> = match fs::read_dir(&models_dir) {
            Ok(entries) => entries.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(ServiceError::io(&models_dir, e)),
        };
        names.sort();
        for path in names {
            let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
                continue;
            };
            if !name.ends_with(".json") {
                continue;
            }
            let text = match read(&path).and_then(|b| String::from_utf8(b).map_err(|e| ServiceError::corrupt(&path, e))) {
                Ok(t) => t,
                Err(e) => {
                    errors.push(e);
                    continue;
                }
            };
            let outcome = if name == SEG_MODEL {
                SegModel::from_json(&text).map(|m| models.seg = Some(m)).map_err(|e| e.to_string())
            } else if name == FEWSHOT_MODEL {
                FewshotHead::from_json(&text).map(|h| models.fewshot = Some(h)).map_err(|e| e.to_string())
            } else if let Some(profile) = name.strip_prefix("profile-").and_then(|n| n.strip_suffix(".json")) {
                RewardWeights::from_json(&text)
                    .map(|w| {
                        models.profiles.insert(profile.to_string(), w);
                    })
                    .map_err(|e| e.to_string())
            } else {
                Err("unrecognized model file".to_string())
            };
            if let Err(reason) = outcome {
                errors.push(ServiceError::corrupt(&path, reason));
            }
        }

        let jobs_path = self.file(JOBS_FILE);
        let mut jobs = Vec::new();
        if let Some(bytes) = read_optional(&jobs_path)? {
            for (n, line) in String::from_utf8_lossy(&bytes).lines().enumerate() {
                match serde_json::from_str::<JobRecord>(line) {
                    Ok(r) => jobs.push(r),
                    Err(e) => errors.push(ServiceError::corrupt(&jobs_path, format!("line {}: {e}", n + 1))),
                }
            }
        }
        let version = jobs.iter().filter(|j| j.status == JobStatus::Done).count() as u64;
        Ok(LoadReport {
            state: WorkspaceState {
                id: id.to_string(),
                image,
                palette,
                labels,
                semantic,
                models,
                version,
            },
            jobs,
            errors,
        })
    }
}

#[derive(Debug)]
pub struct LoadReport {
    pub state: WorkspaceState,
    pub jobs: Vec<JobRecord>,
    pub errors: Vec<ServiceError>,
}
