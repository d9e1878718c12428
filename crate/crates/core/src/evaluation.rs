//! Error metrics, radial error curves and ablation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PolarLocation;
use crate::synthesis::EulerAngles;
use crate::training::{evaluate_examples, run_training, Example, LossConfig, TrainConfig, TrainingError};

/// Upper edge of the radial range covered by [`radial_error_curve`].
pub const RADIAL_RANGE: f64 = 0.8;
pub const DEFAULT_RADIAL_BINS: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("record {0} has no location")]
    MissingLocation(String),
    #[error("malformed report line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub gt: EulerAngles,
    pub pred: EulerAngles,
    pub location: Option<PolarLocation>,
}

impl EvalRecord {
    pub fn new(id: &str, gt: EulerAngles, pred: EulerAngles, location: Option<PolarLocation>) -> Self {
        Self {
            id: id.to_string(),
            gt,
            pred,
            location,
        }
    }

    /// Absolute errors `(pitch, yaw, roll)`.
    pub fn abs_errors(&self) -> [f64; 3] {
        [
            (self.pred.pitch - self.gt.pitch).abs(),
            (self.pred.yaw - self.gt.yaw).abs(),
            (self.pred.roll - self.gt.roll).abs(),
        ]
    }

    /// Mean of the three absolute angle errors.
    pub fn mean_error(&self) -> f64 {
        self.abs_errors().iter().sum::<f64>() / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeSummary {
    pub pitch_err: f64,
    pub yaw_err: f64,
    pub roll_err: f64,
    pub mae: f64,
}

impl MaeSummary {
    fn from_errors(pitch_err: f64, yaw_err: f64, roll_err: f64) -> Self {
        Self {
            pitch_err,
            yaw_err,
            roll_err,
            mae: (pitch_err + yaw_err + roll_err) / 3.0,
        }
    }
}

/// Per-angle mean absolute errors and their mean.
pub fn mae(records: &[EvalRecord]) -> Result<MaeSummary> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = [0.0; 3];
    for r in records {
        for (s, e) in sum.iter_mut().zip(r.abs_errors()) {
            *s += e;
        }
    }
    let n = records.len() as f64;
    Ok(MaeSummary::from_errors(sum[0] / n, sum[1] / n, sum[2] / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialBin {
    pub index: usize,
    pub center: f64,
    pub count: usize,
    pub mae: f64,
}

/// Mean per-record MAE in `n_bins` equal ρ bins over `[0, 0.8]`. Records beyond the
/// range count towards the last bin; empty bins are omitted.
pub fn radial_error_curve(records: &[EvalRecord], n_bins: usize) -> Result<Vec<RadialBin>> {
    assert!(n_bins > 0, "at least one bin");
    let width = RADIAL_RANGE / n_bins as f64;
    let mut sums = vec![(0usize, 0.0f64); n_bins];
    for r in records {
        let loc = r.location.ok_or_else(|| EvalError::MissingLocation(r.id.clone()))?;
        let i = ((loc.rho / width).floor().max(0.0) as usize).min(n_bins - 1);
        sums[i].0 += 1;
        sums[i].1 += r.mean_error();
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, (c, _))| *c > 0)
        .map(|(i, (c, s))| RadialBin {
            index: i,
            center: (i as f64 + 0.5) * width,
            count: c,
            mae: s / c as f64,
        })
        .collect())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` for fewer than two
/// points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "paired samples");
    if x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Deterministic shuffle-and-split; the first part holds `round(fraction·n)` items.
pub fn split_dataset<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((items.len() as f64 * fraction).round() as usize).min(items.len());
    let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect();
    (pick(&idx[..k]), pick(&idx[k..]))
}

/// Toggles of the location module and of the ρ and θ supervision terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationVariant {
    pub location_module: bool,
    pub supervise_rho: bool,
    pub supervise_theta: bool,
}

impl AblationVariant {
    pub const fn new(location_module: bool, supervise_rho: bool, supervise_theta: bool) -> Self {
        Self {
            location_module,
            supervise_rho,
            supervise_theta,
        }
    }

    pub const fn baseline() -> Self {
        Self::new(false, false, false)
    }

    pub const fn full() -> Self {
        Self::new(true, true, true)
    }

    /// All eight combinations, baseline first and full model last.
    pub fn all() -> Vec<Self> {
        (0..8u8).map(|b| Self::new(b & 4 != 0, b & 2 != 0, b & 1 != 0)).collect()
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { '+' } else { '-' };
        format!(
            "{}module {}rho {}theta",
            mark(self.location_module),
            mark(self.supervise_rho),
            mark(self.supervise_theta)
        )
    }

    /// `base` with this variant's module flag and supervision weights applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.location_module = self.location_module;
        cfg.loss = LossConfig {
            lambda1: if self.supervise_rho { base.loss.lambda1 } else { 0.0 },
            lambda2: if self.supervise_theta { base.loss.lambda2 } else { 0.0 },
            ..base.loss
        };
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub summary: MaeSummary,
    #[serde(skip)]
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub per_seed: Vec<SeedResult>,
    /// Seed average; `None` when the variant failed.
    pub mean: Option<MaeSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Trains every variant once per seed on `train`, evaluates on `test` and averages
/// over seeds. A failed training run marks its variant as failed and moves on.
pub fn ablation_run(
    train: &[Example],
    test: &[Example],
    base: &TrainConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    mut progress: impl FnMut(AblationVariant, u64, &MaeSummary),
) -> Result<AblationReport> {
    assert!(!seeds.is_empty(), "at least one seed");
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut per_seed = Vec::new();
        let mut error = None;
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..variant.apply(base)
            };
            let outcome = run_training(train, &[], &cfg, |r| log::debug!("{} seed {seed}: {r:?}", variant.label()));
            match outcome.and_then(|o| evaluate_examples(&o.params, test)) {
                Ok(records) => {
                    let summary = mae(&records)?;
                    progress(variant, seed, &summary);
                    per_seed.push(SeedResult { seed, summary, records });
                }
                Err(e) => {
                    log::warn!("variant {} seed {seed} failed: {e}", variant.label());
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let mean = error.is_none().then(|| {
            let n = per_seed.len() as f64;
            let avg = |f: fn(&MaeSummary) -> f64| per_seed.iter().map(|s| f(&s.summary)).sum::<f64>() / n;
            MaeSummary::from_errors(avg(|s| s.pitch_err), avg(|s| s.yaw_err), avg(|s| s.roll_err))
        });
        rows.push(AblationRow {
            variant,
            per_seed,
            mean,
            error,
        });
    }
    Ok(AblationReport { rows })
}

const CSV_HEADER: &str = "location_module,supervise_rho,supervise_theta,yaw,pitch,roll,mae";

/// CSV with one row per variant; failed variants leave the error columns empty.
pub fn report_csv(report: &AblationReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in &report.rows {
        let v = r.variant;
        let _ = write!(s, "{},{},{}", v.location_module, v.supervise_rho, v.supervise_theta);
        match r.mean {
            Some(m) => {
                let _ = writeln!(s, ",{:.6},{:.6},{:.6},{:.6}", m.yaw_err, m.pitch_err, m.roll_err, m.mae);
            }
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

/// Parses [`report_csv`] output back into `(variant, summary)` pairs.
pub fn parse_report_csv(text: &str) -> Result<Vec<(AblationVariant, Option<MaeSummary>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(EvalError::Parse {
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let err = |msg: String| EvalError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", f.len())));
        }
        let flag = |s: &str| s.parse::<bool>().map_err(|e| err(e.to_string()));
        let variant = AblationVariant::new(flag(f[0])?, flag(f[1])?, flag(f[2])?);
        let summary = if f[3].is_empty() {
            None
        } else {
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(e.to_string()));
            Some(MaeSummary {
                yaw_err: num(f[3])?,
                pitch_err: num(f[4])?,
                roll_err: num(f[5])?,
                mae: num(f[6])?,
            })
        };
        out.push((variant, summary));
    }
    Ok(out)
}

pub fn write_report(report: &AblationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ablation.csv"), report_csv(report))?;
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::from)?;
    fs::write(dir.join("ablation.json"), json + "\n")?;
    Ok(())
}

pub fn curve_csv(curve: &[RadialBin]) -> String {
    let mut s = String::from("bin,rho_center,count,mae\n");
    for b in curve {
        let _ = writeln!(s, "{},{:.6},{},{:.6}", b.index, b.center, b.count, b.mae);
    }
    s
}

pub const SVG_WIDTH: u32 = 800;
pub const SVG_HEIGHT: u32 = 500;

/// 800×500 line plot of mean error against ρ. An empty curve yields the axes only.
pub fn curve_svg(curve: &[RadialBin]) -> String {
    let (w, h) = (SVG_WIDTH as f64, SVG_HEIGHT as f64);
    let (left, right, top, bottom) = (80.0, 30.0, 30.0, 70.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let y_max = curve.iter().map(|b| b.mae).fold(0.0, f64::max);
    let y_max = if y_max > 0.0 { nice_ceil(y_max) } else { 1.0 };
    let sx = |x: f64| left + x / RADIAL_RANGE * pw;
    let sy = |y: f64| top + ph - y / y_max * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{left:.2},{top:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for k in 0..=4 {
        let x = RADIAL_RANGE * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{x:.1}</text>"#,
            sx(x),
            top + ph + 18.0
        );
        let y = y_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{y:.2}</text>"#,
            left - 8.0,
            sy(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">normalized radial distance</text>"#,
        left + pw / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" font-size="14" text-anchor="middle" transform="rotate(-90 20 {:.2})">mean absolute error (deg)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    if !curve.is_empty() {
        let pts: Vec<String> = curve.iter().map(|b| format!("{:.2},{:.2}", sx(b.center), sy(b.mae))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for b in curve {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"/>"#,
                sx(b.center),
                sy(b.mae)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn nice_ceil(v: f64) -> f64 {
    let mag = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if m * mag >= v {
            return m * mag;
        }
    }
    10.0 * mag
}

pub fn write_curve(curve: &[RadialBin], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("radial_curve.csv"), curve_csv(curve))?;
    fs::write(dir.join("radial_curve.svg"), curve_svg(curve))?;
    Ok(())
}
