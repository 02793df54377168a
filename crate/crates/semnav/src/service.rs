//! Workspace registry with background jobs, route queries and overlays.
//!
//! Readers clone the current `Arc<WorkspaceState>`; a finished job builds a
//! new state, persists it and swaps the pointer, so a route query sees
//! either the old or the new models. At most one job runs per workspace.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use semnav_core::fewshot::{episodic_train, segment_query, FewshotHead, SupportExample, SupportSet};
use semnav_core::frugal::{predict, train, FrugalConfig, FrugalDataset};
use semnav_core::irl::{
    costs_from_rewards, irl_train, validate_demos, Cell, CostMap, DemoSet, GridMdp, IrlConfig, RewardWeights,
};
use semnav_core::planner::{plan_and_explain, plan_nearest, profile_lambda, Explanation, RouteQuery, RoutePlan};
use semnav_core::raster::{load_image, load_sparse_labels, ImageRaster, LabelPalette, SemanticRaster};
use semnav_core::synthetic::episode_scenes;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::overlay::{render_cost, render_route, render_semantic, HIGHLIGHT};
use crate::registry::{
    profile_file, validate_profile_name, JobKind, JobRecord, JobStatus, WorkspaceDir, WorkspaceState, FEWSHOT_MODEL,
    SEG_MODEL,
};
use crate::scenario::HeadTraining;

/// Few-shot class request after decoding.
#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub name: String,
    pub color: [u8; 3],
    pub supports: Vec<SupportExample>,
    pub head: Option<FewshotHead>,
    pub training: HeadTraining,
}

#[derive(Debug, Clone)]
pub enum JobSpec {
    TrainSeg(FrugalConfig),
    AddClass(ClassSpec),
    TrainIrl {
        profile: String,
        demos: DemoSet,
        config: IrlConfig,
    },
}

impl JobSpec {
    fn kind(&self) -> JobKind {
        match self {
            Self::TrainSeg(_) => JobKind::TrainSeg,
            Self::AddClass(_) => JobKind::Fewshot,
            Self::TrainIrl { .. } => JobKind::TrainIrl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoalSpec {
    One(Cell),
    Many(Vec<Cell>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRequest {
    pub start: Cell,
    pub goal: GoalSpec,
    /// Weights are looked up under this name unless `weights` is given.
    pub profile: String,
    /// Defaults to the profile's preset (`safe` 1.0, `fast` 0.25).
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub weights: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub route_id: String,
    pub workspace: String,
    pub profile: String,
    pub lambda: f64,
    pub model_version: u64,
    /// Index of the chosen goal in the request's goal list.
    pub goal_index: usize,
    pub plan: RoutePlan,
    pub explanation: Explanation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceSummary {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub palette: LabelPalette,
    pub labeled_fraction: Option<f64>,
    pub has_semantic: bool,
    pub seg_model: bool,
    pub fewshot_head: bool,
    pub profiles: Vec<String>,
    pub model_version: u64,
    pub training_job: Option<String>,
    pub load_errors: Vec<String>,
}

struct Slot {
    dir: WorkspaceDir,
    state: RwLock<Arc<WorkspaceState>>,
    /// Id of the running or queued job, if any.
    busy: Mutex<Option<String>>,
    routes: Mutex<Routes>,
    load_errors: Vec<String>,
}

#[derive(Default)]
struct Routes {
    next: u64,
    items: BTreeMap<String, Vec<Cell>>,
}

impl Slot {
    fn snapshot(&self) -> Arc<WorkspaceState> {
        self.state.read().expect("state lock").clone()
    }

    fn install(&self, state: WorkspaceState) {
        *self.state.write().expect("state lock") = Arc::new(state);
    }
}

struct Inner {
    workspaces: BTreeMap<String, Arc<Slot>>,
    jobs: BTreeMap<String, JobRecord>,
    next_ws: u64,
    next_job: u64,
}

pub struct Service {
    root: PathBuf,
    inner: Mutex<Inner>,
    warnings: Vec<String>,
}

/// An accepted job, ready to run with [`Service::execute`].
pub struct PendingJob {
    id: String,
    slot: Arc<Slot>,
    spec: JobSpec,
}

impl PendingJob {
    pub fn id(&self) -> &str {
        &self.id
    }
}

fn parse_suffix(name: &str, prefix: &str) -> Option<u64> {
    name.strip_prefix(prefix)?.parse().ok()
}

fn check_palette(palette: &LabelPalette) -> Result<()> {
    if let Some(c) = palette.classes().iter().find(|c| c.color == HIGHLIGHT) {
        return Err(ServiceError::Invalid(format!(
            "class '{}' uses the reserved highlight colour {HIGHLIGHT:?}",
            c.name
        )));
    }
    Ok(())
}

impl Service {
    /// Opens (or creates) a registry root and loads every `ws-N` directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| ServiceError::io(&root, e))?;
        let mut dirs: Vec<(u64, String)> = fs::read_dir(&root)
            .map_err(|e| ServiceError::io(&root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| {
                let name = e.file_name().to_str()?.to_string();
                Some((parse_suffix(&name, "ws-")?, name))
            })
            .collect();
        dirs.sort();
        let mut inner = Inner {
            workspaces: BTreeMap::new(),
            jobs: BTreeMap::new(),
            next_ws: 1,
            next_job: 1,
        };
        let mut warnings = Vec::new();
        for (n, id) in dirs {
            inner.next_ws = inner.next_ws.max(n + 1);
            let dir = WorkspaceDir::new(root.join(&id));
            let report = match dir.load(&id) {
                Ok(r) => r,
                Err(e) => {
                    warnings.push(e.to_string());
                    continue;
                }
            };
            for job in report.jobs {
                if let Some(k) = parse_suffix(&job.id, "job-") {
                    inner.next_job = inner.next_job.max(k + 1);
                }
                inner.jobs.insert(job.id.clone(), job);
            }
            let load_errors: Vec<String> = report.errors.iter().map(|e| e.to_string()).collect();
            warnings.extend(load_errors.iter().cloned());
            inner.workspaces.insert(
                id,
                Arc::new(Slot {
                    dir,
                    state: RwLock::new(Arc::new(report.state)),
                    busy: Mutex::new(None),
                    routes: Mutex::new(Routes::default()),
                    load_errors,
                }),
            );
        }
        Ok(Self {
            root,
            inner: Mutex::new(inner),
            warnings,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Problems found while loading; each names the offending file.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>> {
        self.inner
            .lock()
            .expect("registry lock")
            .workspaces
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown workspace '{id}'")))
    }

    pub fn workspace_ids(&self) -> Vec<String> {
        self.inner.lock().expect("registry lock").workspaces.keys().cloned().collect()
    }

    pub fn state(&self, id: &str) -> Result<Arc<WorkspaceState>> {
        Ok(self.slot(id)?.snapshot())
    }

    /// Stores the image at 8-bit precision, exactly as it will reload.
    pub fn create_workspace(&self, image: ImageRaster, palette: LabelPalette) -> Result<String> {
        check_palette(&palette)?;
        let image = load_image(&image.save()).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let mut inner = self.inner.lock().expect("registry lock");
        let id = format!("ws-{}", inner.next_ws);
        let dir = WorkspaceDir::new(self.root.join(&id));
        let state = WorkspaceState {
            id: id.clone(),
            image,
            palette,
            labels: None,
            semantic: None,
            models: Default::default(),
            version: 0,
        };
        dir.save_all(&state)?;
        inner.next_ws += 1;
        inner.workspaces.insert(
            id.clone(),
            Arc::new(Slot {
                dir,
                state: RwLock::new(Arc::new(state)),
                busy: Mutex::new(None),
                routes: Mutex::new(Routes::default()),
                load_errors: Vec::new(),
            }),
        );
        Ok(id)
    }

    pub fn summary(&self, id: &str) -> Result<WorkspaceSummary> {
        let slot = self.slot(id)?;
        let s = slot.snapshot();
        let (width, height) = s.dims();
        let training_job = slot.busy.lock().expect("busy lock").clone();
        Ok(WorkspaceSummary {
            id: s.id.clone(),
            width,
            height,
            channels: s.image.channels(),
            palette: s.palette.clone(),
            labeled_fraction: s.labels.as_ref().map(|l| l.labeled_fraction()),
            has_semantic: s.semantic.is_some(),
            seg_model: s.models.seg.is_some(),
            fewshot_head: s.models.fewshot.is_some(),
            profiles: s.models.profiles.keys().cloned().collect(),
            model_version: s.version,
            training_job,
            load_errors: slot.load_errors.clone(),
        })
    }

    /// Stores a sparse label PGM and returns its labeled fraction.
    pub fn set_labels(&self, id: &str, bytes: &[u8]) -> Result<f64> {
        let slot = self.slot(id)?;
        // A running job would install a state built before this write.
        let busy = slot.busy.lock().expect("busy lock");
        if let Some(running) = busy.as_ref() {
            return Err(ServiceError::Conflict(format!("workspace '{id}' is training ({running})")));
        }
        let state = slot.snapshot();
        let labels = load_sparse_labels(bytes, &state.palette).map_err(ServiceError::invalid)?;
        if labels.dims() != state.dims() {
            return Err(ServiceError::Invalid(format!(
                "label raster is {:?}, image is {:?}",
                labels.dims(),
                state.dims()
            )));
        }
        slot.dir.save_labels(&labels)?;
        let fraction = labels.labeled_fraction();
        slot.install(WorkspaceState {
            labels: Some(labels),
            ..(*state).clone()
        });
        Ok(fraction)
    }

    fn precheck(state: &WorkspaceState, spec: &JobSpec) -> Result<()> {
        match spec {
            JobSpec::TrainSeg(_) => {
                let labels = state
                    .labels
                    .as_ref()
                    .ok_or_else(|| ServiceError::Invalid("workspace has no labels; upload a sparse label raster first".into()))?;
                if labels.labeled_count() == 0 {
                    return Err(ServiceError::Invalid("label raster has no labeled pixels".into()));
                }
            }
            JobSpec::AddClass(c) => {
                if c.name.is_empty() {
                    return Err(ServiceError::Invalid("class name is empty".into()));
                }
                if state.palette.id_of(&c.name).is_some() {
                    return Err(ServiceError::Invalid(format!("class '{}' already exists", c.name)));
                }
                if c.color == HIGHLIGHT {
                    return Err(ServiceError::Invalid(format!("colour {HIGHLIGHT:?} is reserved for routes")));
                }
                if state.semantic.is_none() {
                    return Err(ServiceError::Invalid("workspace has no semantic raster; run train-seg first".into()));
                }
                if c.supports.is_empty() {
                    return Err(ServiceError::Invalid("at least one support pair is required".into()));
                }
                let channels = state.image.channels();
                if let Some(s) = c.supports.iter().find(|s| s.image().channels() != channels) {
                    return Err(ServiceError::Invalid(format!(
                        "support image has {} channels, workspace image has {channels}",
                        s.image().channels()
                    )));
                }
                state.palette.with_class(&c.name, c.color).map_err(ServiceError::invalid)?;
            }
            JobSpec::TrainIrl { profile, demos, config } => {
                validate_profile_name(profile)?;
                config.validate().map_err(ServiceError::invalid)?;
                let semantic = state
                    .semantic
                    .as_ref()
                    .ok_or_else(|| ServiceError::Invalid("workspace has no semantic raster; run train-seg first".into()))?;
                let (w, h) = semantic.dims();
                let horizon = config.horizon.unwrap_or(GridMdp::default_horizon(w, h));
                let mdp = GridMdp::from_semantic(semantic, state.palette.len(), demos.goal, horizon)
                    .map_err(ServiceError::invalid)?;
                validate_demos(&mdp, &demos.demonstrations()).map_err(ServiceError::invalid)?;
            }
        }
        Ok(())
    }

    /// Validates and queues a job. Fails with 409-class `Conflict` while
    /// another job runs on the same workspace.
    pub fn submit(&self, id: &str, spec: JobSpec) -> Result<PendingJob> {
        let slot = self.slot(id)?;
        let mut busy = slot.busy.lock().expect("busy lock");
        if let Some(running) = busy.as_ref() {
            return Err(ServiceError::Conflict(format!("workspace '{id}' is already training ({running})")));
        }
        Self::precheck(&slot.snapshot(), &spec)?;
        let mut inner = self.inner.lock().expect("registry lock");
        let job_id = format!("job-{}", inner.next_job);
        inner.next_job += 1;
        inner.jobs.insert(
            job_id.clone(),
            JobRecord {
                id: job_id.clone(),
                workspace: id.to_string(),
                kind: spec.kind(),
                status: JobStatus::Queued,
                progress: 0.0,
                result: None,
                model_version: None,
                error: None,
            },
        );
        *busy = Some(job_id.clone());
        drop(inner);
        drop(busy);
        Ok(PendingJob { id: job_id, slot, spec })
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobRecord)) -> JobRecord {
        let mut inner = self.inner.lock().expect("registry lock");
        let record = inner.jobs.get_mut(id).expect("job exists");
        if !record.status.is_terminal() {
            f(record);
        }
        record.clone()
    }

    /// Runs a queued job to completion and installs its result.
    pub fn execute(&self, job: PendingJob) -> JobRecord {
        self.update_job(&job.id, |r| r.status = JobStatus::Running);
        let before = job.slot.snapshot();
        let outcome = catch_unwind(AssertUnwindSafe(|| run_job(&before, &job.spec)))
            .unwrap_or_else(|_| Err(ServiceError::Internal("job panicked".into())));
        let outcome = outcome.and_then(|(state, result)| {
            persist(&job.slot.dir, &before, &state)?;
            Ok((state, result))
        });
        let record = match outcome {
            Ok((mut state, result)) => {
                state.version = before.version + 1;
                let version = state.version;
                job.slot.install(state);
                self.update_job(&job.id, |r| {
                    r.status = JobStatus::Done;
                    r.progress = 1.0;
                    r.result = Some(result);
                    r.model_version = Some(version);
                })
            }
            Err(e) => self.update_job(&job.id, |r| {
                r.status = JobStatus::Failed;
                r.error = Some(e.to_string());
            }),
        };
        if let Err(e) = job.slot.dir.append_job(&record) {
            eprintln!("warning: {e}");
        }
        *job.slot.busy.lock().expect("busy lock") = None;
        record
    }

    /// Submits and runs a job on the calling thread.
    pub fn run(&self, id: &str, spec: JobSpec) -> Result<JobRecord> {
        let job = self.submit(id, spec)?;
        Ok(self.execute(job))
    }

    pub fn job(&self, id: &str) -> Result<JobRecord> {
        self.inner
            .lock()
            .expect("registry lock")
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown job '{id}'")))
    }

    pub fn route(&self, id: &str, request: &RouteRequest) -> Result<RouteResponse> {
        let slot = self.slot(id)?;
        let state = slot.snapshot();
        let lambda = match request.lambda {
            Some(l) => l,
            None => profile_lambda(&request.profile).ok_or_else(|| {
                ServiceError::Invalid(format!("profile '{}' has no preset lambda; pass lambda explicitly", request.profile))
            })?,
        };
        let weights_name = request.weights.as_deref().unwrap_or(&request.profile);
        let costs = cost_map_for(&state, weights_name)?;
        let semantic = state.semantic.as_ref().expect("cost_map_for requires a semantic raster");
        let goals = match &request.goal {
            GoalSpec::One(g) => vec![*g],
            GoalSpec::Many(g) => g.clone(),
        };
        if goals.is_empty() {
            return Err(ServiceError::Invalid("goal list is empty".into()));
        }
        let (w, h) = state.dims();
        for &goal in &goals {
            RouteQuery::new(request.start, goal, lambda).validate(w, h).map_err(ServiceError::invalid)?;
        }
        let (goal_index, _) = plan_nearest(&costs, request.start, &goals, lambda).map_err(ServiceError::invalid)?;
        let query = RouteQuery::new(request.start, goals[goal_index], lambda);
        let explanation = plan_and_explain(&costs, &query, semantic, &state.palette).map_err(ServiceError::invalid)?;
        let mut routes = slot.routes.lock().expect("routes lock");
        routes.next += 1;
        let route_id = format!("route-{}", routes.next);
        routes.items.insert(route_id.clone(), explanation.chosen.path.clone());
        Ok(RouteResponse {
            route_id,
            workspace: id.to_string(),
            profile: request.profile.clone(),
            lambda,
            model_version: state.version,
            goal_index,
            plan: explanation.chosen.clone(),
            explanation,
        })
    }

    /// `semantic`, `cost:{profile}` or `route:{routeId}`.
    pub fn overlay(&self, id: &str, layer: &str) -> Result<Vec<u8>> {
        let slot = self.slot(id)?;
        let state = slot.snapshot();
        let semantic = || {
            state
                .semantic
                .as_ref()
                .ok_or_else(|| ServiceError::Invalid("workspace has no semantic raster".into()))
        };
        if layer == "semantic" {
            Ok(render_semantic(semantic()?, &state.palette))
        } else if let Some(profile) = layer.strip_prefix("cost:") {
            Ok(render_cost(&cost_map_for(&state, profile)?))
        } else if let Some(route) = layer.strip_prefix("route:") {
            let path = slot
                .routes
                .lock()
                .expect("routes lock")
                .items
                .get(route)
                .cloned()
                .ok_or_else(|| ServiceError::NotFound(format!("unknown route '{route}'")))?;
            Ok(render_route(semantic()?, &state.palette, &path))
        } else {
            Err(ServiceError::Invalid(format!(
                "unknown layer '{layer}'; expected semantic, cost:{{profile}} or route:{{routeId}}"
            )))
        }
    }
}

/// Cost map of a stored profile over the current semantic raster.
pub fn cost_map_for(state: &WorkspaceState, profile: &str) -> Result<CostMap> {
    let weights = state.models.profiles.get(profile).ok_or_else(|| {
        ServiceError::Invalid(format!("no reward weights for profile '{profile}'; run train-irl first"))
    })?;
    let semantic = state
        .semantic
        .as_ref()
        .ok_or_else(|| ServiceError::Invalid("workspace has no semantic raster; run train-seg first".into()))?;
    cost_map_from(semantic, &state.palette, weights)
        .map_err(|e| ServiceError::Invalid(format!("profile '{profile}': {e}; retrain the profile")))
}

/// Per-cell cost `max_r - r + eps` for one-hot class features. The weight
/// names must match the palette's class names in order.
pub fn cost_map_from(semantic: &SemanticRaster, palette: &LabelPalette, weights: &RewardWeights) -> Result<CostMap> {
    let names: Vec<&str> = palette.classes().iter().map(|c| c.name.as_str()).collect();
    if weights.features.iter().map(String::as_str).ne(names.iter().copied()) {
        return Err(ServiceError::Invalid(format!(
            "reward weights cover classes {:?} but the palette has {names:?}",
            weights.features
        )));
    }
    let rewards: Vec<f64> = semantic.data().iter().map(|&c| weights.values[c as usize]).collect();
    Ok(costs_from_rewards(semantic.width(), semantic.height(), &rewards))
}

/// Computes the post-job state and the relative path of the main artifact.
fn run_job(state: &WorkspaceState, spec: &JobSpec) -> Result<(WorkspaceState, String)> {
    let mut next = state.clone();
    match spec {
        JobSpec::TrainSeg(config) => {
            let labels = state.labels.clone().expect("prechecked");
            let dataset = FrugalDataset::new(state.palette.clone(), vec![(state.image.clone(), labels)])
                .map_err(ServiceError::invalid)?;
            let outcome = train(&dataset, config).map_err(ServiceError::invalid)?;
            next.semantic = Some(predict(&outcome.model, &state.image).map_err(ServiceError::invalid)?);
            next.models.seg = Some(outcome.model);
            Ok((next, format!("models/{SEG_MODEL}")))
        }
        JobSpec::AddClass(c) => {
            let head = match (&c.head, &state.models.fewshot) {
                (Some(h), _) | (None, Some(h)) => h.clone(),
                (None, None) => train_head(&c.training)?,
            };
            let support = SupportSet::new(c.supports.clone()).map_err(ServiceError::invalid)?;
            let mask = segment_query(&head, &support, &state.image).map_err(ServiceError::invalid)?.mask;
            let palette = state.palette.with_class(&c.name, c.color).map_err(ServiceError::invalid)?;
            let class = (palette.len() - 1) as u8;
            let mut semantic = state.semantic.clone().expect("prechecked");
            for (i, &fg) in mask.data().iter().enumerate() {
                if fg {
                    semantic.set(i % semantic.width(), i / semantic.width(), class);
                }
            }
            next.palette = palette;
            next.semantic = Some(semantic);
            next.models.fewshot = Some(head);
            Ok((next, "semantic.pgm".into()))
        }
        JobSpec::TrainIrl { profile, demos, config } => {
            let semantic = state.semantic.as_ref().expect("prechecked");
            let (w, h) = semantic.dims();
            let horizon = config.horizon.unwrap_or(GridMdp::default_horizon(w, h));
            let mdp = GridMdp::from_semantic(semantic, state.palette.len(), demos.goal, horizon)
                .map_err(ServiceError::invalid)?;
            let names = state.palette.classes().iter().map(|c| c.name.clone()).collect();
            let outcome = irl_train(&mdp, &demos.demonstrations(), names, config).map_err(ServiceError::invalid)?;
            next.models.profiles.insert(profile.clone(), outcome.weights);
            Ok((next, format!("models/{}", profile_file(profile))))
        }
    }
}

pub fn train_head(training: &HeadTraining) -> Result<FewshotHead> {
    let (palette, scenes) = episode_scenes(training.scenes, training.appearances, training.seed);
    let items: Vec<_> = scenes.into_iter().map(|s| (s.image, s.truth)).collect();
    let classes: Vec<u8> = (0..palette.len() as u8).collect();
    let config = semnav_core::fewshot::EpisodicConfig {
        sgd: semnav_core::mlp::SgdConfig {
            seed: training.seed,
            ..training.config.sgd.clone()
        },
        ..training.config.clone()
    };
    Ok(episodic_train(&items, &classes, &[], &config).map_err(ServiceError::invalid)?.head)
}

/// Writes the parts of `after` that differ from `before`.
fn persist(dir: &WorkspaceDir, before: &WorkspaceState, after: &WorkspaceState) -> Result<()> {
    if after.palette != before.palette {
        dir.save_palette(&after.palette)?;
    }
    if after.semantic != before.semantic {
        if let Some(s) = &after.semantic {
            dir.save_semantic(s)?;
        }
    }
    if after.models.seg != before.models.seg {
        if let Some(m) = &after.models.seg {
            dir.save_model(SEG_MODEL, &m.to_json())?;
        }
    }
    if after.models.fewshot != before.models.fewshot {
        if let Some(h) = &after.models.fewshot {
            dir.save_model(FEWSHOT_MODEL, &h.to_json())?;
        }
    }
    for (name, w) in &after.models.profiles {
        if before.models.profiles.get(name) != Some(w) {
            dir.save_model(&profile_file(name), &w.to_json())?;
        }
    }
    Ok(())
}
