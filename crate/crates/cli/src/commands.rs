use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use fisheye_hpe::evaluation::{
    ablation_run, curve_csv, curve_svg, mae, radial_error_curve, spearman, split_dataset, write_curve,
    write_report, AblationVariant, EvalRecord, DEFAULT_RADIAL_BINS,
};
use fisheye_hpe::synthesis::{
    generate_marker_dataset, load_sources, save_fisheye_samples, save_sources, synthesize_dataset, warp_canvas,
    write_manifest, ManifestRecord, MarkerSpec, SynthesisConfig, MANIFEST_FILE,
};
use fisheye_hpe::tensor::{op_suite, Checkpoint, GRAD_CHECK_TOL};
use fisheye_hpe::training::{
    evaluate_examples, load_examples, network_gradient_check, prepare_examples, run_training, TrainConfig,
};
use fisheye_hpe::ModelParams;
use image::{Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::Common;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing(path.to_path_buf()),
        _ => CliError::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::BadConfig {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn prepare_out(common: &Common, default: &str) -> Result<PathBuf> {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&out)?;
    Ok(out)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkersConfig {
    pub n: usize,
    pub seed: u64,
    pub marker: MarkerSpec,
}

impl Default for MarkersConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 0,
            marker: MarkerSpec::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenMarkersArgs {
    /// Number of markers to render.
    #[arg(long)]
    n: Option<usize>,
    /// Raster side in pixels.
    #[arg(long)]
    size: Option<u32>,
}

pub fn gen_markers(common: &Common, args: GenMarkersArgs) -> Result<()> {
    let mut cfg: MarkersConfig = load_config(common.config.as_deref())?;
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.n, args.n);
    set(&mut cfg.marker.size_px, args.size);
    if cfg.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let out = prepare_out(common, "markers")?;
    let sources = generate_marker_dataset(cfg.n, &cfg.marker, cfg.seed);
    let manifest = save_sources(&sources, &out)?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    log::info!("wrote {} markers to {}", sources.len(), manifest.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub source: PathBuf,
    pub seed: u64,
    pub synthesis: SynthesisConfig,
    /// Fraction of samples listed in `train.jsonl`; the rest go to `test.jsonl`.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            source: PathBuf::from("markers").join(MANIFEST_FILE),
            seed: 0,
            synthesis: SynthesisConfig::default(),
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Source manifest (images plus pose, optional face boxes).
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Canvas side as a multiple of the face box.
    #[arg(long)]
    canvas_scale: Option<f64>,
    /// Crop margin around the transported face box.
    #[arg(long)]
    margin: Option<f64>,
}

pub fn synth(common: &Common, args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(common.config.as_deref())?;
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.source, args.source);
    set(&mut cfg.train_fraction, args.train_fraction);
    set(&mut cfg.synthesis.canvas.scale, args.canvas_scale);
    set(&mut cfg.synthesis.crop_margin, args.margin);
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(CliError::Usage("--train-fraction must lie in [0, 1]".into()));
    }
    if cfg.synthesis.canvas.scale < 2.0 {
        return Err(CliError::Usage("--canvas-scale must be at least 2".into()));
    }
    require(&cfg.source)?;
    let out = prepare_out(common, "fisheye")?;
    let sources = load_sources(&cfg.source)?;
    if sources.is_empty() {
        return Err(CliError::Usage(format!("{} lists no samples", cfg.source.display())));
    }
    let result = synthesize_dataset(&sources, &cfg.synthesis, cfg.seed);
    let manifest = save_fisheye_samples(&result.samples, &out)?;

    let records = fisheye_hpe::synthesis::read_manifest(&manifest)?;
    let (train, test): (Vec<ManifestRecord>, Vec<ManifestRecord>) =
        split_dataset(&records, cfg.train_fraction, fisheye_hpe::derive_seed(cfg.seed, 1));
    write_manifest(&train, &out.join("train.jsonl"))?;
    write_manifest(&test, &out.join("test.jsonl"))?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    log::info!(
        "synthesized {} samples ({} rejected): {} train, {} test",
        result.samples.len(),
        result.rejected.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Held-out manifest evaluated at the end of training.
    #[arg(long)]
    eval_dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the rho task.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the theta task.
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    /// Network input side in pixels.
    #[arg(long)]
    input_size: Option<usize>,
    /// Drop the location feature module.
    #[arg(long)]
    no_location: bool,
}

fn train_config(common: &Common, args: TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    if common.config.is_none() {
        cfg.dataset = PathBuf::from("fisheye/train.jsonl");
        cfg.eval_dataset = Some(PathBuf::from("fisheye/test.jsonl"));
    }
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.dataset, args.dataset);
    if args.eval_dataset.is_some() {
        cfg.eval_dataset = args.eval_dataset;
    }
    set(&mut cfg.schedule.epochs, args.epochs);
    set(&mut cfg.schedule.batch_size, args.batch_size);
    set(&mut cfg.schedule.lr, args.lr);
    set(&mut cfg.loss.lambda1, args.lambda1);
    set(&mut cfg.loss.lambda2, args.lambda2);
    set(&mut cfg.adam.beta2, args.beta2);
    set(&mut cfg.model.backbone.input_size, args.input_size);
    if args.no_location {
        cfg.model.location_module = false;
    }
    // Milestones at or past a shortened run are dropped rather than rejected.
    let epochs = cfg.schedule.epochs;
    cfg.schedule.milestones.retain(|&m| m < epochs);
    Ok(cfg)
}

pub fn train(common: &Common, args: TrainArgs) -> Result<()> {
    let cfg = train_config(common, args)?;
    cfg.validate()?;
    require(&cfg.dataset)?;
    if let Some(p) = &cfg.eval_dataset {
        require(p)?;
    }
    let out = prepare_out(common, "runs/train")?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;

    let size = cfg.model.backbone.input_size;
    let train = load_examples(&cfg.dataset, size)?;
    let eval = match &cfg.eval_dataset {
        Some(p) => load_examples(p, size)?,
        None => Vec::new(),
    };
    log::info!("training on {} samples, evaluating on {}", train.len(), eval.len());

    let mut log_file = BufWriter::new(File::create(out.join("log.jsonl"))?);
    let mut write_err = None;
    let outcome = run_training(&train, &eval, &cfg, |rec| {
        log::info!(
            "epoch {} {}: mae {:.3}{}",
            rec.epoch,
            rec.split,
            rec.mae,
            rec.loss.map(|l| format!(" loss {:.4}", l.total)).unwrap_or_default()
        );
        let line = serde_json::to_string(rec).expect("log record serializes");
        if let Err(e) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    outcome.params.to_checkpoint().write_to(out.join("checkpoint.bin"))?;
    log::info!("wrote {}", out.join("checkpoint.bin").display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub radial_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("runs/train/checkpoint.bin"),
            manifest: PathBuf::from("fisheye/test.jsonl"),
            radial_bins: DEFAULT_RADIAL_BINS,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fisheye manifest to evaluate on.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of rho bins in the radial error curve.
    #[arg(long)]
    radial_bins: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Metrics {
    samples: usize,
    pitch_err: f64,
    yaw_err: f64,
    roll_err: f64,
    mae: f64,
    radial_spearman: Option<f64>,
}

fn radial_trend(records: &[EvalRecord], bins: usize) -> Result<Option<f64>> {
    let curve = radial_error_curve(records, bins)?;
    let x: Vec<f64> = curve.iter().map(|b| b.index as f64).collect();
    let y: Vec<f64> = curve.iter().map(|b| b.mae).collect();
    Ok(spearman(&x, &y))
}

pub fn eval(common: &Common, args: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = load_config(common.config.as_deref())?;
    set(&mut cfg.checkpoint, args.checkpoint);
    set(&mut cfg.manifest, args.manifest);
    set(&mut cfg.radial_bins, args.radial_bins);
    if cfg.radial_bins == 0 {
        return Err(CliError::Usage("--radial-bins must be positive".into()));
    }
    require(&cfg.checkpoint)?;
    require(&cfg.manifest)?;
    let out = prepare_out(common, "runs/eval")?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;

    let params = ModelParams::from_checkpoint(&Checkpoint::read_from(&cfg.checkpoint)?)?;
    let examples = load_examples(&cfg.manifest, params.config.backbone.input_size)?;
    let records = evaluate_examples(&params, &examples)?;
    let m = mae(&records)?;
    let curve = radial_error_curve(&records, cfg.radial_bins)?;
    let metrics = Metrics {
        samples: records.len(),
        pitch_err: m.pitch_err,
        yaw_err: m.yaw_err,
        roll_err: m.roll_err,
        mae: m.mae,
        radial_spearman: radial_trend(&records, cfg.radial_bins)?,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    let mut pred = BufWriter::new(File::create(out.join("predictions.jsonl"))?);
    for r in &records {
        writeln!(pred, "{}", serde_json::to_string(r).map_err(std::io::Error::from)?)?;
    }
    pred.flush()?;
    write_curve(&curve, &out)?;
    println!(
        "samples {}  pitch {:.3}  yaw {:.3}  roll {:.3}  MAE {:.3}",
        metrics.samples, m.pitch_err, m.yaw_err, m.roll_err, m.mae
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    /// Fisheye manifest split into train and test parts.
    pub dataset: PathBuf,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<AblationVariant>,
    pub radial_bins: usize,
    pub train: TrainConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("fisheye").join(MANIFEST_FILE),
            train_fraction: 0.7,
            split_seed: 0,
            seeds: vec![0, 1, 2],
            variants: AblationVariant::all(),
            radial_bins: DEFAULT_RADIAL_BINS,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `all`, or a comma-separated list of `baseline`, `full` and `m?r?t?` codes
    /// (for example `m1r0t1` keeps the module and theta supervision).
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
}

fn variant_code(v: AblationVariant) -> String {
    format!(
        "m{}r{}t{}",
        u8::from(v.location_module),
        u8::from(v.supervise_rho),
        u8::from(v.supervise_theta)
    )
}

pub fn parse_variants(spec: &str) -> Result<Vec<AblationVariant>> {
    if spec == "all" {
        return Ok(AblationVariant::all());
    }
    spec.split(',')
        .map(|tok| match tok.trim() {
            "baseline" => Ok(AblationVariant::baseline()),
            "full" => Ok(AblationVariant::full()),
            code => AblationVariant::all()
                .into_iter()
                .find(|&v| variant_code(v) == code)
                .ok_or_else(|| CliError::Usage(format!("unknown variant `{code}`"))),
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct TrendRow {
    variant: AblationVariant,
    spearman: Option<f64>,
}

pub fn ablate(common: &Common, args: AblateArgs) -> Result<()> {
    let mut cfg: AblateConfig = load_config(common.config.as_deref())?;
    set(&mut cfg.split_seed, common.seed);
    set(&mut cfg.dataset, args.dataset);
    set(&mut cfg.train_fraction, args.train_fraction);
    set(&mut cfg.seeds, args.seeds);
    if let Some(v) = args.variants {
        cfg.variants = parse_variants(&v)?;
    }
    set(&mut cfg.train.schedule.epochs, args.epochs);
    set(&mut cfg.train.model.backbone.input_size, args.input_size);
    let epochs = cfg.train.schedule.epochs;
    cfg.train.schedule.milestones.retain(|&m| m < epochs);
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(CliError::Usage("need at least one seed and one variant".into()));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(CliError::Usage("--train-fraction must lie strictly between 0 and 1".into()));
    }
    cfg.train.validate()?;
    require(&cfg.dataset)?;
    let out = prepare_out(common, "runs/ablate")?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;

    let samples = fisheye_hpe::synthesis::load_fisheye_samples(&cfg.dataset)?;
    let (examples, dropped) = prepare_examples(&samples, cfg.train.model.backbone.input_size);
    if dropped > 0 {
        log::info!("dropped {dropped} samples with pose outside [-99, 99]");
    }
    let (train, test) = split_dataset(&examples, cfg.train_fraction, cfg.split_seed);
    log::info!("{} train / {} test samples", train.len(), test.len());
    let report = ablation_run(&train, &test, &cfg.train, &cfg.variants, &cfg.seeds, |v, seed, m| {
        log::info!("{} seed {seed}: MAE {:.3}", v.label(), m.mae);
    })?;
    write_report(&report, &out)?;

    let radial = out.join("radial");
    fs::create_dir_all(&radial)?;
    let mut trends = Vec::new();
    for row in &report.rows {
        let pooled: Vec<EvalRecord> = row.per_seed.iter().flat_map(|s| s.records.iter().cloned()).collect();
        if pooled.is_empty() {
            continue;
        }
        let curve = radial_error_curve(&pooled, cfg.radial_bins)?;
        let code = variant_code(row.variant);
        fs::write(radial.join(format!("{code}.csv")), curve_csv(&curve))?;
        fs::write(radial.join(format!("{code}.svg")), curve_svg(&curve))?;
        trends.push(TrendRow {
            variant: row.variant,
            spearman: radial_trend(&pooled, cfg.radial_bins)?,
        });
    }
    write_json(&out.join("radial_trend.json"), &trends)?;

    println!("{:<24} {:>8} {:>8} {:>8} {:>8}", "variant", "yaw", "pitch", "roll", "MAE");
    for row in &report.rows {
        match row.mean {
            Some(m) => println!(
                "{:<24} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                row.variant.label(),
                m.yaw_err,
                m.pitch_err,
                m.roll_err,
                m.mae
            ),
            None => println!("{:<24} failed: {}", row.variant.label(), row.error.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 1 }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {}

#[derive(Debug, Serialize)]
struct GradcheckRow {
    name: String,
    max_rel_error: f64,
    checked: usize,
    pass: bool,
}

pub fn gradcheck(common: &Common, _args: GradcheckArgs) -> Result<()> {
    let mut cfg: GradcheckConfig = load_config(common.config.as_deref())?;
    set(&mut cfg.seed, common.seed);
    let out = prepare_out(common, "runs/gradcheck")?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;

    let mut rows: Vec<GradcheckRow> = op_suite(cfg.seed)?
        .into_iter()
        .map(|(name, r)| GradcheckRow {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            pass: r.max_rel_error < GRAD_CHECK_TOL,
        })
        .collect();
    let net = network_gradient_check(cfg.seed)?;
    rows.push(GradcheckRow {
        name: "network loss (reduced)".into(),
        max_rel_error: net.max_rel_error,
        checked: net.checked,
        pass: net.max_rel_error < GRAD_CHECK_TOL,
    });
    for r in &rows {
        println!(
            "{:<24} max rel error {:.3e}  ({} entries)  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    write_json(&out.join("gradcheck.json"), &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("PASS: all relative errors below {GRAD_CHECK_TOL:e}");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpConfig {
    pub input: PathBuf,
    pub output: Option<PathBuf>,
    pub fill: [u8; 3],
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("input.png"),
            output: None,
            fill: [128, 128, 128],
        }
    }
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    /// Image to warp; non-square images are centered on a square fill canvas.
    input: Option<PathBuf>,
    /// Output PNG (defaults to `<out>/warped.png`).
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn warp(common: &Common, args: WarpArgs) -> Result<()> {
    let mut cfg: WarpConfig = load_config(common.config.as_deref())?;
    set(&mut cfg.input, args.input);
    if args.output.is_some() {
        cfg.output = args.output;
    }
    require(&cfg.input)?;
    let out = prepare_out(common, "warp")?;
    let target = cfg.output.clone().unwrap_or_else(|| out.join("warped.png"));
    if target == cfg.input {
        return Err(CliError::Usage("output would overwrite the input image".into()));
    }
    let img = image::open(&cfg.input)?.to_rgb8();
    let side = img.width().max(img.height());
    let mut canvas = RgbImage::from_pixel(side, side, Rgb(cfg.fill));
    image::imageops::replace(
        &mut canvas,
        &img,
        ((side - img.width()) / 2) as i64,
        ((side - img.height()) / 2) as i64,
    );
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent)?;
    }
    warp_canvas(&canvas, cfg.fill).save(&target)?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    log::info!("wrote {}", target.display());
    Ok(())
}
