//! `sepseg`: phantoms, intensity transforms, training, prediction,
//! ensembling, uncertainty, evaluation and slice export.

mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sepseg_core::infer::{
    ensemble_fuse, entropy_map, predict, rank_members, structure_vvc, uncertainty_report,
    EnsembleSpec, UncertaintyMap,
};
use sepseg_core::metrics::{self, weighted_report};
use sepseg_core::sepnet::{load_checkpoint, param_count};
use sepseg_core::trainer::train;
use sepseg_core::volgrid::{
    export_slice_image, generate_phantom, load_labels, load_volume, read_meta, save_labels,
    save_probs, save_volume, PhantomSpec, SliceSource,
};
use sepseg_core::xform::{apply_transform, make_slf, Preset, TransformRef, TransformSpec};
use sepseg_core::{LabelMap, LossKind, Model, NetworkSpec, Volume};

use config::PipelineConfig;
use error::CliError;

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "sepseg",
    version,
    about = "Volumetric organ segmentation with a separable-convolution network"
)]
struct Cli {
    /// Worker threads for numeric kernels; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic CT phantoms with ground-truth labels.
    Phantom(PhantomArgs),
    /// Map an HU volume to [0, 1] with a piecewise-linear transform.
    Transform(TransformArgs),
    /// Train a network on a directory of cases.
    Train(TrainArgs),
    /// Predict probabilities and labels for one volume.
    Predict(PredictArgs),
    /// Fuse several trained members with class-wise rank weights.
    Ensemble(EnsembleArgs),
    /// Voxel entropy map and structure volume variation of ensemble members.
    Uncertainty(UncertaintyArgs),
    /// DSC, HD95 and ASSD of a prediction against ground truth.
    Evaluate(EvaluateArgs),
    /// Write 2D slices of a grid as PGM images.
    ExportSlices(ExportArgs),
    /// Parameter count of a network and of its plain 3D counterpart.
    ParamCount(ParamCountArgs),
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad component {p:?}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s)
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    parse_triple(s)
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad number {p:?}")))
        .collect()
}

#[derive(Args)]
struct PhantomArgs {
    /// Seed of the first phantom; phantom i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of phantoms.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Grid size D,H,W.
    #[arg(long, default_value = "12,48,48", value_parser = parse_dims)]
    dims: [usize; 3],
    /// Voxel spacing sz,sy,sx in mm.
    #[arg(long, default_value = "3,1,1", value_parser = parse_spacing)]
    spacing: [f64; 3],
    /// Classes including background.
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

#[derive(Args)]
struct TransformArgs {
    /// Preset name: SLF1, SLF2, SLF3, NLF1 or NLF2.
    #[arg(long, conflicts_with_all = ["xs", "hs"])]
    preset: Option<String>,
    /// Inline intensity anchors, e.g. 0,0.2,0.8,1 (requires --hs).
    #[arg(long, value_parser = parse_list, requires = "hs")]
    xs: Option<Vec<f64>>,
    /// Inline HU anchors matching --xs.
    #[arg(long, value_parser = parse_list, requires = "xs")]
    hs: Option<Vec<f64>>,
    /// Input HU volume sidecar (*.vol.json).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output normalized volume sidecar.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Dice,
    Lexp,
    AthLexp,
}

#[derive(Args)]
struct TrainArgs {
    /// Pipeline configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training case directory (paths.data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation case directory (paths.val).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint and log directory (paths.checkpoints).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Transform preset name (transform).
    #[arg(long)]
    transform: Option<String>,
    /// Number of epochs (train.epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Patches per batch (train.batch_size).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate (train.lr0).
    #[arg(long)]
    lr: Option<f64>,
    /// Random seed (train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Patch size D,H,W (train.patch).
    #[arg(long, value_parser = parse_dims)]
    patch: Option<[usize; 3]>,
    /// Objective (train.loss).
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Hard-voxel weighting strength for ath-lexp.
    #[arg(long)]
    alpha: Option<f64>,
    /// Base channel count n0 (network.base_channels).
    #[arg(long)]
    base: Option<usize>,
    /// Number of scales S (network.num_scales).
    #[arg(long)]
    scales: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Pipeline configuration JSON (transform and predict options).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input HU volume sidecar.
    #[arg(long = "in")]
    input: PathBuf,
    /// Transform preset the model was trained with.
    #[arg(long)]
    transform: Option<String>,
    /// Output label map sidecar (*.lab.json).
    #[arg(long)]
    out_labels: PathBuf,
    /// Output probability map sidecar (*.prob.json).
    #[arg(long)]
    out_probs: Option<PathBuf>,
    /// Slices per forward pass.
    #[arg(long)]
    tile_depth: Option<usize>,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Pipeline configuration JSON holding an `ensemble` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ensemble specification JSON (overrides the config's section).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Validation directory used to fill the member DSC table.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Input HU volume sidecar.
    #[arg(long = "in")]
    input: PathBuf,
    /// Fused label map sidecar.
    #[arg(long)]
    out_labels: PathBuf,
    /// Fused probability map sidecar.
    #[arg(long)]
    out_probs: Option<PathBuf>,
    /// Directory for each member's label map (member_<i>.lab.json).
    #[arg(long)]
    member_labels: Option<PathBuf>,
}

#[derive(Args)]
struct UncertaintyArgs {
    /// Member label maps.
    #[arg(long, num_args = 1.., required = true)]
    members: Vec<PathBuf>,
    /// Output entropy map sidecar (*.unc.json).
    #[arg(long)]
    out_map: PathBuf,
    /// Fused prediction, for the error report.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    /// Ground truth, for the error report.
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Pipeline configuration JSON (metric_preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Predicted label map sidecar.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label map sidecar.
    #[arg(long)]
    gt: PathBuf,
    /// Weight preset: uniform or structseg22.
    #[arg(long, conflicts_with = "weights")]
    preset: Option<String>,
    /// Explicit foreground class weights, comma separated.
    #[arg(long, value_parser = parse_list)]
    weights: Option<Vec<f64>>,
    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Volume, label or uncertainty sidecar.
    #[arg(long = "in")]
    input: PathBuf,
    /// Slicing axis: 0 axial, 1 coronal, 2 sagittal.
    #[arg(long, default_value_t = 0)]
    axis: usize,
    /// Single slice index; every slice when omitted.
    #[arg(long)]
    index: Option<usize>,
    /// Output directory for slice_<axis>_<index>.pgm files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetArg {
    Sepnet,
    Unet,
}

#[derive(Args)]
struct ParamCountArgs {
    /// Network family.
    #[arg(long, value_enum, default_value = "sepnet")]
    net: NetArg,
    /// Base channel count n0.
    #[arg(long, default_value_t = 16)]
    base: usize,
    /// Number of scales S.
    #[arg(long, default_value_t = 4)]
    scales: usize,
    /// Classes including background.
    #[arg(long, default_value_t = 23)]
    classes: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let msg = first
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(msg.to_string()).to_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Transform(a) => transform(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Ensemble(a) => ensemble_cmd(a),
        Command::Uncertainty(a) => uncertainty_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::ExportSlices(a) => export_cmd(a),
        Command::ParamCount(a) => param_count_cmd(a),
    }
}

fn emit(v: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("json values serialize")
    );
}

fn create_dir(p: &Path) -> CliResult {
    fs::create_dir_all(p).map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display())))
}

fn write_text(p: &Path, s: &str) -> CliResult {
    fs::write(p, s).map_err(|e| CliError::Data(format!("cannot write {}: {e}", p.display())))
}

fn preset_ref(name: &str) -> CliResult<TransformRef> {
    name.parse::<Preset>()
        .map(TransformRef::from)
        .map_err(|e| CliError::Config(e.to_string()))
}

/// `(volume, labels)` pairs `<stem>.vol.json` + `<stem>.lab.json`, sorted by stem.
fn load_cases(dir: &Path) -> CliResult<Vec<(Volume, LabelMap)>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_suffix(".vol.json")
                .map(String::from)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Data(format!(
            "no *.vol.json cases in {}",
            dir.display()
        )));
    }
    stems
        .iter()
        .map(|s| {
            let v = load_volume(dir.join(format!("{s}.vol.json")))?;
            let l = load_labels(dir.join(format!("{s}.lab.json")))?;
            Ok((v, l))
        })
        .collect()
}

fn phantom(a: PhantomArgs) -> CliResult {
    create_dir(&a.out)?;
    let mut files = Vec::new();
    for i in 0..a.count {
        let spec = PhantomSpec::desk_scale(a.dims, a.spacing, a.classes, a.seed + i);
        let (v, l) = generate_phantom(&spec)?;
        let vp = a.out.join(format!("case_{i:03}.vol.json"));
        let lp = a.out.join(format!("case_{i:03}.lab.json"));
        save_volume(&v, &vp)?;
        save_labels(&l, &lp)?;
        files.push(json!({"volume": vp, "labels": lp, "seed": a.seed + i}));
    }
    emit(&json!({"cases": files}));
    Ok(())
}

fn transform(a: TransformArgs) -> CliResult {
    let t: TransformSpec = match (&a.preset, &a.xs, &a.hs) {
        (Some(p), _, _) => preset_ref(p)?.resolve(),
        (None, Some(xs), Some(hs)) => make_slf(xs, hs)?,
        _ => {
            return Err(CliError::Config(
                "give --preset or both --xs and --hs".into(),
            ))
        }
    };
    let v = load_volume(&a.input)?;
    let out = apply_transform(&v, &t)?;
    save_volume(&out, &a.out)?;
    emit(&json!({"out": a.out, "anchors": t}));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg = PipelineConfig::load(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.paths.data = Some(d);
    }
    if let Some(d) = a.val {
        cfg.paths.val = Some(d);
    }
    if let Some(d) = a.out {
        cfg.paths.checkpoints = d;
    }
    if let Some(t) = &a.transform {
        cfg.transform = preset_ref(t)?;
    }
    let tc = &mut cfg.train;
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr0 = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.patch {
        tc.patch = v;
    }
    let alpha = a.alpha.unwrap_or(match tc.loss {
        LossKind::AthLExp { alpha } => alpha,
        _ => 0.5,
    });
    match a.loss {
        Some(LossArg::Dice) => tc.loss = LossKind::Dice,
        Some(LossArg::Lexp) => tc.loss = LossKind::LExp,
        Some(LossArg::AthLexp) => tc.loss = LossKind::AthLExp { alpha },
        None => {
            if let (Some(al), LossKind::AthLExp { .. }) = (a.alpha, tc.loss) {
                tc.loss = LossKind::AthLExp { alpha: al };
            }
        }
    }
    let mut problems = cfg.violations();
    if cfg.paths.data.is_none() {
        problems.push("paths.data is required for training (--data)".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems.join("; ")));
    }

    let data = load_cases(cfg.paths.data.as_ref().expect("checked above"))?;
    let val = match &cfg.paths.val {
        Some(d) => load_cases(d)?,
        None => Vec::new(),
    };
    let classes = data[0].1.num_classes();
    let mut net = cfg
        .network
        .clone()
        .unwrap_or_else(|| NetworkSpec::sepnet(classes, 16, 4));
    if let Some(b) = a.base {
        net.base_channels = b;
    }
    if let Some(s) = a.scales {
        if s != net.num_scales {
            let keep = (net.num_classes, net.base_channels, net.block);
            net = NetworkSpec {
                block: keep.2,
                ..NetworkSpec::sepnet(keep.0, keep.1, s)
            };
        }
    }
    if net.num_classes != classes {
        return Err(CliError::Config(format!(
            "network has {} classes but the data has {classes}",
            net.num_classes
        )));
    }
    net.validate()?;
    let out = cfg.paths.checkpoints.clone();
    create_dir(&out)?;
    cfg.network = Some(net.clone());
    let effective = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_text(&out.join("pipeline.json"), &effective)?;
    let summary = train::<f32>(
        &cfg.effective_train(),
        &net,
        &data,
        &val,
        &cfg.transform.resolve(),
        &out,
    )?;
    let best = &summary.history[summary.best_epoch];
    emit(&json!({
        "best_epoch": summary.best_epoch,
        "best_checkpoint": summary.best_checkpoint,
        "last_checkpoint": summary.last_checkpoint,
        "log": summary.log,
        "train_loss": best.train_loss,
        "val_dsc_per_class": best.val_dsc_per_class,
        "class_weights": summary.class_weights,
    }));
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model<f32>> {
    Ok(load_checkpoint::<f32>(path)?)
}

fn predict_cmd(a: PredictArgs) -> CliResult {
    let mut cfg = PipelineConfig::load(a.config.as_deref())?;
    if let Some(t) = &a.transform {
        cfg.transform = preset_ref(t)?;
    }
    if let Some(d) = a.tile_depth {
        cfg.predict.tile_depth = d;
    }
    cfg.validate()?;
    let m = load_model(&a.checkpoint)?;
    let v = load_volume(&a.input)?;
    let (p, l) = predict(&m, &v, &cfg.transform.resolve(), &cfg.predict)?;
    save_labels(&l, &a.out_labels)?;
    if let Some(op) = &a.out_probs {
        save_probs(&p, op)?;
    }
    emit(&json!({"labels": a.out_labels, "probs": a.out_probs, "class_voxels": l.class_counts()}));
    Ok(())
}

fn ensemble_cmd(a: EnsembleArgs) -> CliResult {
    let cfg = PipelineConfig::load(a.config.as_deref())?;
    let mut spec: EnsembleSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => cfg.ensemble.clone().ok_or_else(|| {
            CliError::Config("no ensemble given (--spec or config.ensemble)".into())
        })?,
    };
    let members: Vec<(Model<f32>, TransformSpec)> = spec
        .members
        .iter()
        .map(|m| Ok((load_model(&m.checkpoint)?, m.transform.resolve())))
        .collect::<CliResult<_>>()?;
    if let Some(dir) = &a.val {
        let val = load_cases(dir)?;
        let mut table = Vec::new();
        for (m, t) in &members {
            let c = m.spec().num_classes;
            let mut row = vec![0.0; c];
            for (v, g) in &val {
                let (_, l) = predict(m, v, t, &cfg.predict)?;
                for (k, r) in row.iter_mut().enumerate() {
                    *r += metrics::dsc(&l, g, k as u8)? / val.len() as f64;
                }
            }
            table.push(row);
        }
        spec.dsc_table = table;
    }
    spec.validate()?;
    let weights = rank_members(&spec.dsc_table, &spec.rank_weights)?;
    let v = load_volume(&a.input)?;
    let mut probs = Vec::new();
    if let Some(d) = &a.member_labels {
        create_dir(d)?;
    }
    for (i, (m, t)) in members.iter().enumerate() {
        let (p, l) = predict(m, &v, t, &cfg.predict)?;
        if let Some(d) = &a.member_labels {
            save_labels(&l, d.join(format!("member_{i}.lab.json")))?;
        }
        probs.push(p);
    }
    let fused = ensemble_fuse(&probs, &weights)?;
    let labels = fused.argmax();
    save_labels(&labels, &a.out_labels)?;
    if let Some(op) = &a.out_probs {
        save_probs(&fused, op)?;
    }
    emit(&json!({
        "labels": a.out_labels,
        "probs": a.out_probs,
        "dsc_table": spec.dsc_table,
        "member_weights": weights,
    }));
    Ok(())
}

fn uncertainty_cmd(a: UncertaintyArgs) -> CliResult {
    let maps: Vec<LabelMap> = a
        .members
        .iter()
        .map(load_labels)
        .collect::<Result<_, _>>()?;
    let u: UncertaintyMap = entropy_map(&maps)?;
    u.save(&a.out_map)?;
    let report = match (&a.pred, &a.gt) {
        (Some(p), Some(g)) => {
            let r = uncertainty_report(&maps, &load_labels(p)?, &load_labels(g)?)?;
            serde_json::to_value(r).expect("report serializes")
        }
        _ => {
            let c = maps[0].num_classes();
            let vvc = (1..c as u8)
                .map(|k| Ok(json!({"class": k, "vvc": structure_vvc(&maps, k)?})))
                .collect::<CliResult<Vec<_>>>()?;
            json!({"members": maps.len(), "levels": u.levels(), "structures": vvc})
        }
    };
    match &a.report {
        Some(p) => write_text(p, &serde_json::to_string_pretty(&report).expect("json"))?,
        None => emit(&report),
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let mut cfg = PipelineConfig::load(a.config.as_deref())?;
    if let Some(p) = &a.preset {
        cfg.metric_preset = p.clone();
    }
    cfg.validate()?;
    let pred = load_labels(&a.pred)?;
    let gt = load_labels(&a.gt)?;
    let c = gt.num_classes();
    let weights = match a.weights {
        Some(w) => w,
        None => cfg.metric_weights(c)?,
    };
    if weights.len() + 1 != c {
        return Err(CliError::Config(format!(
            "{} weights for {} foreground classes",
            weights.len(),
            c - 1
        )));
    }
    let rows = (1..c as u8)
        .map(|k| metrics::class_metrics(&pred, &gt, k))
        .collect::<Result<Vec<_>, _>>()?;
    let report = weighted_report(rows, &weights)?;
    let text = match a.format {
        Format::Json => report.to_json(),
        Format::Table => report.to_table(),
    };
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => println!("{}", text.trim_end()),
    }
    Ok(())
}

fn export_cmd(a: ExportArgs) -> CliResult {
    let meta = read_meta(&a.input)?;
    create_dir(&a.out)?;
    let depth = *meta
        .dims
        .get(a.axis)
        .ok_or_else(|| CliError::Config(format!("axis {} is not 0, 1 or 2", a.axis)))?;
    let indices: Vec<usize> = match a.index {
        Some(i) => vec![i],
        None => (0..depth).collect(),
    };
    let vol;
    let lab;
    let unc;
    let src = match meta.intensity_kind.as_str() {
        "Label" => {
            lab = load_labels(&a.input)?;
            SliceSource::Labels(&lab)
        }
        "Uncertainty" => {
            unc = UncertaintyMap::load(&a.input)?;
            SliceSource::Uncertainty(&unc)
        }
        "Probability" => {
            return Err(CliError::Data(
                "probability maps have no slice rendering; export their labels".into(),
            ))
        }
        _ => {
            vol = load_volume(&a.input)?;
            SliceSource::Volume(&vol)
        }
    };
    let mut files = Vec::new();
    for i in indices {
        let p = a.out.join(format!("slice_{}_{i:03}.pgm", a.axis));
        export_slice_image(src, a.axis, i, &p)?;
        files.push(p);
    }
    emit(&json!({"files": files}));
    Ok(())
}

fn param_count_cmd(a: ParamCountArgs) -> CliResult {
    let sep = NetworkSpec::sepnet(a.classes, a.base, a.scales);
    let unet = NetworkSpec::unet(a.classes, a.base, a.scales);
    let (ps, pu) = (param_count(&sep)?, param_count(&unet)?);
    let params = match a.net {
        NetArg::Sepnet => ps,
        NetArg::Unet => pu,
    };
    emit(&json!({
        "net": match a.net { NetArg::Sepnet => "sepnet", NetArg::Unet => "unet" },
        "params": params,
        "sepnet_params": ps,
        "unet_params": pu,
        "ratio": ps as f64 / pu as f64,
    }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn help_documents_every_flag() {
        let mut root = Cli::command();
        root.build();
        for sub in root.get_subcommands_mut() {
            let name = sub.get_name().to_string();
            let help = sub.render_long_help().to_string();
            for arg in sub.get_arguments() {
                let Some(long) = arg.get_long() else { continue };
                assert!(
                    help.contains(&format!("--{long}")),
                    "{name}: --{long} not in help"
                );
                assert!(
                    arg.get_help().is_some(),
                    "{name}: --{long} has no description"
                );
            }
        }
    }

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
