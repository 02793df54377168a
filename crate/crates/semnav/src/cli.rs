//! `semnav` command line. Results go to stdout as one JSON document; a
//! failure prints `error: <kind>: <message>` on one stderr line and exits 1.
//! Usage errors exit 2.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semnav_core::fewshot::{episodic_train, segment_query, EpisodicConfig, FewshotHead, SupportExample, SupportSet};
use semnav_core::frugal::{predict, train, FrugalConfig, FrugalDataset};
use semnav_core::irl::{irl_train, validate_demos, Cell, CostMap, DemoSet, GridMdp, IrlConfig, RewardWeights};
use semnav_core::mlp::SgdConfig;
use semnav_core::planner::{explain, plan, plan_nearest, profile_lambda, RouteQuery};
use semnav_core::raster::{load_image, load_sparse_labels, BinaryMask, ImageRaster, LabelPalette, SemanticRaster};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::error::{Result, ServiceError};
use crate::registry::write_atomic;
use crate::scenario::{write_synthetic, HeadTraining, SyntheticKind};
use crate::service::{cost_map_from, train_head, Service};

#[derive(Parser, Debug)]
#[command(name = "semnav", version, about = "Semantic navigation over aerial rasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a per-pixel classifier from sparse labels and predict the map.
    TrainSeg(TrainSegArgs),
    /// Train a few-shot head on episodes from a dataset or synthetic scenes.
    FewshotTrain(FewshotTrainArgs),
    /// Segment a query image from support pairs, optionally merging the
    /// mask into a semantic raster as a new class.
    FewshotPredict(FewshotPredictArgs),
    /// Learn reward weights from route demonstrations.
    TrainIrl(TrainIrlArgs),
    /// Plan a least-cost route.
    Plan(RouteArgs),
    /// Plan a route and explain it against the shortest route.
    Explain(RouteArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a seeded synthetic dataset.
    GenSynthetic(GenArgs),
}

#[derive(Args, Debug)]
pub struct TrainSegArgs {
    /// Dataset directory: `images/*.pgm|ppm` and `labels/*.pgm` paired by
    /// file stem.
    #[arg(long, conflicts_with_all = ["image", "labels", "semantic_out"])]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "data", requires = "labels")]
    image: Option<PathBuf>,
    #[arg(long, required_unless_present = "data", requires = "image")]
    labels: Option<PathBuf>,
    #[arg(long)]
    palette: PathBuf,
    /// FrugalConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pixel_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, visible_alias = "out")]
    model_out: PathBuf,
    /// Predicted map of `--image`.
    #[arg(long)]
    semantic_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FewshotTrainArgs {
    /// Dataset directory with `images/` and fully labeled `labels/`; the
    /// head trains on synthetic scenes when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to `<data>/palette.json`.
    #[arg(long, requires = "data")]
    palette: Option<PathBuf>,
    /// Class names to sample episodes from; defaults to every class not
    /// listed under `--test-classes`.
    #[arg(long, value_delimiter = ',', requires = "data")]
    train_classes: Vec<String>,
    /// Held-out class names; images containing them are not trained on.
    #[arg(long, value_delimiter = ',', requires = "data")]
    test_classes: Vec<String>,
    /// Head training JSON (`scenes`, `appearances`, `seed`, `config`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Supports per training episode.
    #[arg(long)]
    k: Option<usize>,
    /// Overrides the number of training episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, visible_alias = "out")]
    head_out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FewshotPredictArgs {
    #[arg(long)]
    head: PathBuf,
    /// `IMAGE:MASK`; repeat or separate with commas for K > 1.
    #[arg(long = "support", required = true, value_delimiter = ',')]
    supports: Vec<String>,
    #[arg(long)]
    query: PathBuf,
    #[arg(long, visible_alias = "out")]
    mask_out: PathBuf,
    /// Semantic raster to merge into; the new class wins on foreground.
    #[arg(long, requires_all = ["palette", "name", "color", "semantic_out", "palette_out"])]
    semantic: Option<PathBuf>,
    #[arg(long)]
    palette: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// `R,G,B`.
    #[arg(long, value_parser = parse_color)]
    color: Option<[u8; 3]>,
    #[arg(long)]
    semantic_out: Option<PathBuf>,
    #[arg(long)]
    palette_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainIrlArgs {
    #[arg(long)]
    semantic: PathBuf,
    #[arg(long)]
    palette: PathBuf,
    /// `{"goal":[r,c],"paths":[[[r,c],...],...]}`.
    #[arg(long)]
    demos: PathBuf,
    /// IrlConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Steps per demonstration; defaults to a bound derived from the map size.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, visible_alias = "out")]
    weights_out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RouteArgs {
    #[arg(long)]
    semantic: PathBuf,
    #[arg(long)]
    palette: PathBuf,
    /// Reward weights; without them every cell costs 1.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// `ROW,COL`.
    #[arg(long, value_parser = parse_cell)]
    start: Cell,
    /// `ROW,COL`; repeat to route to the cheapest of several goals.
    #[arg(long = "goal", value_parser = parse_cell, required = true)]
    goals: Vec<Cell>,
    #[arg(long, default_value = "safe")]
    profile: String,
    /// Overrides the profile's preset.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8787)]
    port: u16,
    #[arg(long, env = "SEMNAV_ROOT")]
    root: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Kind {
    Flood,
    Shapes,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_numbers<const N: usize, T: std::str::FromStr>(text: &str) -> std::result::Result<[T; N], String> {
    let parts: Vec<T> = text
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("'{p}' is not a valid number")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated numbers, got '{text}'"))
}

fn parse_cell(text: &str) -> std::result::Result<Cell, String> {
    let [r, c] = parse_numbers::<2, usize>(text)?;
    Ok((r, c))
}

fn parse_color(text: &str) -> std::result::Result<[u8; 3], String> {
    parse_numbers::<3, u8>(text)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ServiceError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| ServiceError::corrupt(path, e))
}

fn read_image(path: &Path) -> Result<ImageRaster> {
    load_image(&read(path)?).map_err(|e| ServiceError::corrupt(path, e))
}

fn read_palette(path: &Path) -> Result<LabelPalette> {
    let text = String::from_utf8(read(path)?).map_err(|e| ServiceError::corrupt(path, e))?;
    LabelPalette::from_json(&text).map_err(|e| ServiceError::corrupt(path, e))
}

fn read_semantic(path: &Path, palette: &LabelPalette) -> Result<SemanticRaster> {
    SemanticRaster::load(&read(path)?, palette).map_err(|e| ServiceError::corrupt(path, e))
}

fn read_weights(path: &Path) -> Result<RewardWeights> {
    let text = String::from_utf8(read(path)?).map_err(|e| ServiceError::corrupt(path, e))?;
    RewardWeights::from_json(&text).map_err(|e| ServiceError::corrupt(path, e))
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("output serializes"));
}

/// `(image, labels)` paths of a dataset directory, matched by file stem.
fn dataset_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let images = dir.join("images");
    let mut paths = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| ServiceError::io(&images, e))? {
        let path = entry.map_err(|e| ServiceError::io(&images, e))?.path();
        if matches!(path.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(ServiceError::Invalid(format!("{} holds no .pgm or .ppm images", images.display())));
    }
    paths.sort();
    paths
        .into_iter()
        .map(|image| {
            let stem = image.file_stem().unwrap_or_default().to_string_lossy();
            let labels = dir.join("labels").join(format!("{stem}.pgm"));
            if !labels.is_file() {
                return Err(ServiceError::Invalid(format!(
                    "{} has no label raster {}",
                    image.display(),
                    labels.display()
                )));
            }
            Ok((image, labels))
        })
        .collect()
}

fn train_seg(a: &TrainSegArgs) -> Result<()> {
    let palette = read_palette(&a.palette)?;
    let pairs = match (&a.data, &a.image, &a.labels) {
        (Some(dir), _, _) => dataset_pairs(dir)?,
        (None, Some(image), Some(labels)) => vec![(image.clone(), labels.clone())],
        _ => unreachable!("clap requires --data or --image with --labels"),
    };
    let mut items = Vec::with_capacity(pairs.len());
    for (image, labels) in &pairs {
        let l = load_sparse_labels(&read(labels)?, &palette).map_err(|e| ServiceError::corrupt(labels, e))?;
        items.push((read_image(image)?, l));
    }
    let mut config: FrugalConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FrugalConfig::default(),
    };
    config.pixel_fraction = a.pixel_fraction.unwrap_or(config.pixel_fraction);
    config.sgd.epochs = a.epochs.unwrap_or(config.sgd.epochs);
    config.sgd.seed = a.seed.unwrap_or(config.sgd.seed);
    let pixels: usize = items.iter().map(|(i, _)| i.width() * i.height()).sum();
    let labeled: f64 = items
        .iter()
        .map(|(i, l)| l.labeled_fraction() * (i.width() * i.height()) as f64)
        .sum();
    let first = items[0].0.clone();
    let dataset = FrugalDataset::new(palette, items).map_err(ServiceError::invalid)?;
    let outcome = train(&dataset, &config).map_err(ServiceError::invalid)?;
    write_atomic(&a.model_out, outcome.model.to_json().as_bytes())?;
    if let Some(out) = &a.semantic_out {
        let semantic = predict(&outcome.model, &first).map_err(ServiceError::invalid)?;
        write_atomic(out, &semantic.save())?;
    }
    print(&json!({
        "model": a.model_out,
        "images": pairs.len(),
        "labeled_fraction": labeled / pixels as f64,
        "final_loss": outcome.loss_trace.last(),
    }));
    Ok(())
}

fn fewshot_train(a: &FewshotTrainArgs) -> Result<()> {
    let mut training: HeadTraining = match &a.config {
        Some(p) => read_json(p)?,
        None => HeadTraining::default(),
    };
    if let Some(n) = a.episodes {
        training.config.sgd.epochs = n;
    }
    if let Some(seed) = a.seed {
        training.seed = seed;
    }
    if let Some(k) = a.k {
        training.config.k = k;
    }
    let head = match &a.data {
        Some(dir) => train_head_on(dir, a, &training)?,
        None => train_head(&training)?,
    };
    write_atomic(&a.head_out, head.to_json().as_bytes())?;
    print(&json!({"head": a.head_out, "episodes": training.config.sgd.epochs}));
    Ok(())
}

/// Episodic training on a labeled dataset directory.
fn train_head_on(dir: &Path, a: &FewshotTrainArgs, training: &HeadTraining) -> Result<FewshotHead> {
    let palette = read_palette(&a.palette.clone().unwrap_or_else(|| dir.join("palette.json")))?;
    let ids = |names: &[String]| -> Result<Vec<u8>> {
        names
            .iter()
            .map(|n| {
                palette
                    .id_of(n)
                    .ok_or_else(|| ServiceError::Invalid(format!("class '{n}' is not in the palette")))
            })
            .collect()
    };
    let test = ids(&a.test_classes)?;
    let train_ids = match a.train_classes.is_empty() {
        true => (0..palette.len() as u8).filter(|c| !test.contains(c)).collect(),
        false => ids(&a.train_classes)?,
    };
    let mut items = Vec::new();
    for (image, labels) in dataset_pairs(dir)? {
        items.push((read_image(&image)?, read_semantic(&labels, &palette)?));
    }
    let config = EpisodicConfig {
        sgd: SgdConfig {
            seed: training.seed,
            ..training.config.sgd.clone()
        },
        ..training.config.clone()
    };
    let outcome = episodic_train(&items, &train_ids, &test, &config).map_err(ServiceError::invalid)?;
    Ok(outcome.head)
}

fn fewshot_predict(a: &FewshotPredictArgs) -> Result<()> {
    let text = String::from_utf8(read(&a.head)?).map_err(|e| ServiceError::corrupt(&a.head, e))?;
    let head = FewshotHead::from_json(&text).map_err(|e| ServiceError::corrupt(&a.head, e))?;
    let mut examples = Vec::new();
    for pair in &a.supports {
        let (img, mask) = pair
            .split_once(':')
            .ok_or_else(|| ServiceError::Invalid(format!("support '{pair}' is not IMAGE:MASK")))?;
        let image = read_image(Path::new(img))?;
        let mask = BinaryMask::load(&read(Path::new(mask))?).map_err(|e| ServiceError::corrupt(Path::new(mask), e))?;
        examples.push(SupportExample::new(image, mask).map_err(ServiceError::invalid)?);
    }
    let support = SupportSet::new(examples).map_err(ServiceError::invalid)?;
    let query = read_image(&a.query)?;
    let seg = segment_query(&head, &support, &query).map_err(ServiceError::invalid)?;
    write_atomic(&a.mask_out, &seg.mask.save())?;
    if let Some(sem_path) = &a.semantic {
        // clap enforces the companions of --semantic.
        let palette = read_palette(a.palette.as_ref().expect("required"))?;
        let name = a.name.as_deref().expect("required");
        let palette = palette.with_class(name, a.color.expect("required")).map_err(ServiceError::invalid)?;
        let mut semantic = read_semantic(sem_path, &palette)?;
        if semantic.dims() != seg.mask.dims() {
            return Err(ServiceError::Invalid(format!(
                "semantic raster is {:?}, query is {:?}",
                semantic.dims(),
                seg.mask.dims()
            )));
        }
        let class = (palette.len() - 1) as u8;
        for (i, &fg) in seg.mask.data().iter().enumerate() {
            if fg {
                semantic.set(i % semantic.width(), i / semantic.width(), class);
            }
        }
        write_atomic(a.semantic_out.as_ref().expect("required"), &semantic.save())?;
        write_atomic(a.palette_out.as_ref().expect("required"), palette.to_json().as_bytes())?;
    }
    print(&json!({
        "mask": a.mask_out,
        "foreground": seg.mask.count(),
        "weights": seg.weights,
    }));
    Ok(())
}

fn train_irl(a: &TrainIrlArgs) -> Result<()> {
    let palette = read_palette(&a.palette)?;
    let semantic = read_semantic(&a.semantic, &palette)?;
    let demos: DemoSet = read_json(&a.demos)?;
    let mut config: IrlConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => IrlConfig::default(),
    };
    config.iterations = a.iters.unwrap_or(config.iterations);
    config.learning_rate = a.lr.unwrap_or(config.learning_rate);
    config.horizon = a.horizon.or(config.horizon);
    config.validate().map_err(ServiceError::invalid)?;
    let (w, h) = semantic.dims();
    let horizon = config.horizon.unwrap_or(GridMdp::default_horizon(w, h));
    let mdp = GridMdp::from_semantic(&semantic, palette.len(), demos.goal, horizon).map_err(ServiceError::invalid)?;
    let demos = demos.demonstrations();
    validate_demos(&mdp, &demos).map_err(ServiceError::invalid)?;
    let names = palette.classes().iter().map(|c| c.name.clone()).collect();
    let outcome = irl_train(&mdp, &demos, names, &config).map_err(ServiceError::invalid)?;
    write_atomic(&a.weights_out, outcome.weights.to_json().as_bytes())?;
    print(&json!({
        "weights": outcome.weights,
        "moment_gap": outcome.moment_gaps.last(),
    }));
    Ok(())
}

struct RouteInputs {
    semantic: SemanticRaster,
    palette: LabelPalette,
    costs: CostMap,
    query: RouteQuery,
    goal_index: usize,
}

fn route_inputs(a: &RouteArgs) -> Result<RouteInputs> {
    let palette = read_palette(&a.palette)?;
    let semantic = read_semantic(&a.semantic, &palette)?;
    let costs = match &a.weights {
        Some(p) => cost_map_from(&semantic, &palette, &read_weights(p)?)?,
        None => CostMap::uniform(semantic.width(), semantic.height(), 1.0).map_err(ServiceError::invalid)?,
    };
    let lambda = match a.lambda {
        Some(l) => l,
        None => profile_lambda(&a.profile)
            .ok_or_else(|| ServiceError::Invalid(format!("profile '{}' has no preset lambda; pass --lambda", a.profile)))?,
    };
    let (goal_index, _) = plan_nearest(&costs, a.start, &a.goals, lambda).map_err(ServiceError::invalid)?;
    Ok(RouteInputs {
        query: RouteQuery::new(a.start, a.goals[goal_index], lambda),
        semantic,
        palette,
        costs,
        goal_index,
    })
}

fn plan_cmd(a: &RouteArgs) -> Result<()> {
    let r = route_inputs(a)?;
    let plan = plan(&r.costs, &r.query).map_err(ServiceError::invalid)?;
    print(&json!({"goal_index": r.goal_index, "plan": plan}));
    Ok(())
}

fn explain_cmd(a: &RouteArgs) -> Result<()> {
    let r = route_inputs(a)?;
    let chosen = plan(&r.costs, &r.query).map_err(ServiceError::invalid)?;
    let alternative = plan(&r.costs, &RouteQuery { lambda: 0.0, ..r.query }).map_err(ServiceError::invalid)?;
    let e = explain(&chosen, &alternative, &r.costs, r.query.lambda, &r.semantic, &r.palette)
        .map_err(ServiceError::invalid)?;
    print(&json!({"goal_index": r.goal_index, "explanation": e}));
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let service = Service::open(&a.root)?;
    for w in service.warnings() {
        eprintln!("warning: {w}");
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    let addr = SocketAddr::new(a.host, a.port);
    runtime
        .block_on(crate::api::serve(addr, Arc::new(service)))
        .map_err(|e| ServiceError::Internal(format!("server on {addr}: {e}")))
}

fn gen_synthetic(a: &GenArgs) -> Result<()> {
    let kind = match a.kind {
        Kind::Flood => SyntheticKind::Flood,
        Kind::Shapes => SyntheticKind::Shapes,
    };
    let files = write_synthetic(kind, a.seed, &a.out)?;
    print(&json!({"out": a.out, "files": files}));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainSeg(a) => train_seg(a),
        Command::FewshotTrain(a) => fewshot_train(a),
        Command::FewshotPredict(a) => fewshot_predict(a),
        Command::TrainIrl(a) => train_irl(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Serve(a) => serve(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    }
}

/// Parses arguments, runs and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {message}", e.kind());
            1
        }
    }
}
