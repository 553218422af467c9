use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cyto_core::cvt::{
    classify_cells, count_parameters, load_weights, random_weights, CvTConfig, Variant, CLASS_NAMES,
};
use cyto_core::flowseg::{
    compute_gt_flows, export_training_pair, segment, CorrectionPatch, FlowConfig,
    FlowPredictorHandle,
};
use cyto_core::imaging::{
    read_image, read_label_map, write_atomic, write_flows, write_image, write_label_map,
    ChannelSpec,
};
use cyto_core::metrics::{evaluate_cells, evaluate_seg_dirs, read_truth_csv};
use cyto_core::service::{
    generate_fixture, serve, FixtureSpec, Pipeline, PipelineConfig, SlideStore, Stage, StageParams,
};
use cyto_core::stitch::{
    list_frames, sample_frames, stitch, FrameSampleConfig, GraphReport, StitchParams,
};
use cyto_core::style::{
    export_embedding, load_style_vectors, random_projection_features, style_vector, tsne,
    StyleVector, TsneConfig,
};

#[derive(Parser)]
#[command(
    name = "cyto",
    version,
    about = "Cervical cytology slide screening toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stitch a directory of frames into a panorama.
    Stitch(StitchArgs),
    /// Segment cells by following flow fields.
    Segment(SegmentArgs),
    /// Classify every segmented cell with the CvT model.
    Classify(ClassifyArgs),
    /// Dice, sensitivity and specificity of predicted label maps.
    EvaluateSeg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified k-fold classification metrics of classified cells.
    EvaluateCls {
        /// `cells.json` from `classify`.
        #[arg(long)]
        cells: PathBuf,
        /// CSV of `cell_id,class_index`.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// t-SNE embedding of style vectors.
    Embed(EmbedArgs),
    /// Parameter count of a CvT configuration.
    Params {
        #[arg(long, default_value = "original13")]
        variant: Variant,
        #[arg(long, default_value_t = CLASS_NAMES.len())]
        classes: usize,
    },
    /// Write a synthetic slide (frames, oracle labels, config).
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        cols: usize,
        #[arg(long, default_value_t = 2)]
        rows: usize,
        #[arg(long, default_value_t = 192)]
        tile: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Persistent slide store: staged pipeline, corrections and the REST API.
    Slide(SlideArgs),
}

#[derive(Args)]
struct StitchArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    stride: usize,
    #[arg(long, default_value_t = 0.2)]
    confidence: f64,
    #[arg(long, default_value_t = 0.25)]
    min_overlap: f64,
    /// Only match frames at most this many sampled indices apart.
    #[arg(long)]
    match_window: Option<usize>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    image: PathBuf,
    /// Reference label map; flows are synthesized from it.
    #[arg(long, conflicts_with = "flows", required_unless_present = "flows")]
    oracle: Option<PathBuf>,
    /// Predicted flows (`.cytf`) at the image's resolution.
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    flow_threshold: f64,
    #[arg(long, default_value_t = 0.0)]
    cellprob_threshold: f64,
    #[arg(long, default_value_t = 15)]
    min_mask_pixels: usize,
    #[arg(long)]
    diameter: Option<f64>,
    /// Also export an (image, labels, flows) training pair under this name.
    #[arg(long)]
    training_name: Option<String>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weights file; seeded random weights when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "original13")]
    variant: Variant,
    #[arg(long, default_value_t = 224)]
    input_resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    /// Style-vector CSV or directory of `.cyta` activation dumps.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    input: Option<PathBuf>,
    /// Image directory (subdirectories are groups); uses seeded random
    /// projection features instead of network activations.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SlideArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: SlideCommand,
}

#[derive(Subcommand)]
enum SlideCommand {
    /// Create a slide from a frame directory.
    Ingest {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        flows: Option<PathBuf>,
    },
    Stitch(StageArgs),
    Segment(StageArgs),
    Classify(StageArgs),
    Report(StageArgs),
    /// Apply a correction patch (JSON).
    Correct {
        id: String,
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Tar archive of every exported training pair.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
    List,
    /// Serve the REST API (and `/ui` when `ui_dir` is configured).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Args)]
struct StageArgs {
    id: String,
    /// JSON object of per-run overrides.
    #[arg(long)]
    params: Option<String>,
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    use std::io::Write;
    match writeln!(
        std::io::stdout().lock(),
        "{}",
        serde_json::to_string_pretty(v)?
    ) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn run_stitch(a: StitchArgs) -> Result<()> {
    let cfg = FrameSampleConfig {
        stride: a.stride,
        min_overlap_fraction: a.min_overlap,
    };
    let frames = sample_frames(&a.frames, &cfg)?;
    let mut params = StitchParams {
        match_window: a.match_window,
        ..StitchParams::default()
    };
    params.matching.min_confidence = a.confidence;
    let outcome = stitch(&frames, &cfg, &params)?;
    let report = GraphReport::from_outcome(&outcome);
    std::fs::create_dir_all(&a.out)?;
    write_image(&outcome.panorama.image, a.out.join("panorama.png"))?;
    write_json(&a.out.join("graph.json"), &report)?;
    log::info!(
        "{} of {} frames placed, {} rejected; panorama {}x{}",
        report.poses.len(),
        frames.len(),
        report.rejected.len(),
        outcome.panorama.image.width(),
        outcome.panorama.image.height()
    );
    Ok(())
}

fn run_segment(a: SegmentArgs) -> Result<()> {
    let image = read_image(&a.image)?;
    let predictor = match (&a.oracle, &a.flows) {
        (Some(o), _) => FlowPredictorHandle::oracle(read_label_map(o)?),
        (None, Some(f)) => FlowPredictorHandle::file(f),
        (None, None) => bail!("supply --oracle or --flows"),
    };
    let cfg = FlowConfig {
        flow_threshold: a.flow_threshold,
        cellprob_threshold: a.cellprob_threshold,
        min_mask_pixels: a.min_mask_pixels,
        diameter: a.diameter,
        ..FlowConfig::default()
    };
    let (labels, _) = segment(&image, &predictor, &cfg, ChannelSpec::default())?;
    std::fs::create_dir_all(&a.out)?;
    write_label_map(&labels, a.out.join("labels.png"))?;
    write_flows(&compute_gt_flows(&labels)?, a.out.join("flows.cytf"))?;
    if let Some(name) = &a.training_name {
        export_training_pair(&image, &labels, &a.out.join("training"), name)?;
    }
    log::info!(
        "{} instances ({})",
        labels.instance_count(),
        predictor.description
    );
    Ok(())
}

fn run_classify(a: ClassifyArgs) -> Result<()> {
    let image = read_image(&a.image)?;
    let labels = read_label_map(&a.labels)?;
    let mut model = CvTConfig::new(a.variant, CLASS_NAMES.len());
    model.input_resolution = a.input_resolution;
    let weights = match &a.weights {
        Some(p) => load_weights(p)?,
        None => {
            log::warn!("no weights given: seeded random weights (seed {})", a.seed);
            random_weights(&model, a.seed)
        }
    };
    let cells = classify_cells(&image, &labels, &model, &weights)?;
    write_json(&a.out, &cells)?;
    log::info!("{} cells classified", cells.len());
    Ok(())
}

fn image_style_vectors(dir: &Path, seed: u64) -> Result<Vec<StyleVector>> {
    let mut sources = vec![("default".to_string(), dir.to_path_buf())];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    sources.extend(subdirs.into_iter().map(|p| {
        (
            p.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            p,
        )
    }));
    let mut out = Vec::new();
    for (group, d) in sources {
        for file in list_frames(&d)? {
            let features = random_projection_features(&read_image(&file)?, seed)?;
            out.push(StyleVector {
                values: style_vector(&features)?,
                source_id: file
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                group: group.clone(),
            });
        }
    }
    Ok(out)
}

fn run_embed(a: EmbedArgs) -> Result<()> {
    let vectors = match (&a.input, &a.images) {
        (Some(p), _) => load_style_vectors(p)?,
        (None, Some(d)) => image_style_vectors(d, a.seed)?,
        (None, None) => bail!("supply --input or --images"),
    };
    let cfg = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        seed: a.seed,
        ..TsneConfig::default()
    };
    let x: Vec<Vec<f64>> = vectors.iter().map(|v| v.values.clone()).collect();
    let result = tsne(&x, &cfg)?;
    let ids: Vec<String> = vectors.iter().map(|v| v.source_id.clone()).collect();
    let groups: Vec<String> = vectors.iter().map(|v| v.group.clone()).collect();
    export_embedding(&ids, &result.points, &groups, &a.out, a.svg.as_deref())?;
    log::info!(
        "{} points, perplexity {:.2}, final KL {:.4}",
        ids.len(),
        result.perplexity,
        result.final_kl
    );
    Ok(())
}

fn stage_params(json: Option<&str>) -> Result<StageParams> {
    Ok(match json {
        Some(s) => serde_json::from_str(s).context("parsing --params")?,
        None => StageParams::default(),
    })
}

fn run_slide(a: SlideArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let ui_dir = config.ui_dir.clone();
    let pipeline = Pipeline::new(SlideStore::open(&a.root)?, config);
    let stage = |s: Stage, args: StageArgs| -> Result<()> {
        let record = pipeline.run_stage(&args.id, s, &stage_params(args.params.as_deref())?)?;
        print_json(&record)
    };
    match a.command {
        SlideCommand::Ingest {
            frames,
            oracle,
            flows,
        } => print_json(&pipeline.ingest_dir(&frames, oracle.as_deref(), flows.as_deref())?),
        SlideCommand::Stitch(s) => stage(Stage::Stitch, s),
        SlideCommand::Segment(s) => stage(Stage::Segment, s),
        SlideCommand::Classify(s) => stage(Stage::Classify, s),
        SlideCommand::Report(s) => stage(Stage::Report, s),
        SlideCommand::Correct { id, patch, dry_run } => {
            let patch: CorrectionPatch = serde_json::from_slice(&std::fs::read(&patch)?)
                .with_context(|| format!("parsing {}", patch.display()))?;
            print_json(&pipeline.correct(&id, &patch, dry_run)?)
        }
        SlideCommand::Export { out } => Ok(write_atomic(&out, &pipeline.training_export()?)?),
        SlideCommand::List => print_json(&pipeline.store().list()?),
        SlideCommand::Serve { addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            Ok(rt.block_on(serve(Arc::new(pipeline), addr, ui_dir))?)
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Stitch(a) => run_stitch(a),
        Command::Segment(a) => run_segment(a),
        Command::Classify(a) => run_classify(a),
        Command::EvaluateSeg { pred, truth, out } => {
            let eval = evaluate_seg_dirs(&pred, &truth)?;
            match out {
                Some(p) => write_json(&p, &eval),
                None => print_json(&eval),
            }
        }
        Command::EvaluateCls {
            cells,
            truth,
            k,
            seed,
            out,
        } => {
            let cells: Vec<cyto_core::cvt::CellInstance> =
                serde_json::from_slice(&std::fs::read(&cells)?).context("parsing cells")?;
            let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
            let report = evaluate_cells(&cells, &read_truth_csv(&truth)?, &names, k, seed)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            match out {
                Some(p) => write_json(&p, &report),
                None => print_json(&report),
            }
        }
        Command::Embed(a) => run_embed(a),
        Command::Params { variant, classes } => {
            let cfg = CvTConfig::new(variant, classes);
            cfg.validate()?;
            print_json(&count_parameters(&cfg))
        }
        Command::GenFixture {
            out,
            cols,
            rows,
            tile,
            seed,
        } => {
            let spec = FixtureSpec {
                cols,
                rows,
                tile,
                seed,
                ..FixtureSpec::default()
            };
            let info = generate_fixture(&out, &spec)?;
            log::info!(
                "{} instances on a {}x{} slide",
                info.instances,
                info.width,
                info.height
            );
            Ok(())
        }
        Command::Slide(a) => run_slide(a),
    }
}
