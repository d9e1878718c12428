//! Fisheye dataset synthesis.
//!
//! Each source face is pasted onto a mid-gray canvas five times the size of its
//! bounding box, at a polar location drawn from `θ ~ U(−180°, 180°)`,
//! `ρ ~ U(0, 0.8)`. The canvas is warped through the fisheye map, the face box is
//! transported with it, and the face region is cropped and resized to 224×224.
//! Pose labels are copied unchanged.
//!
//! For desk-scale experiments [`generate_marker_dataset`] renders a rigid
//! three-armed marker at known orientations as a stand-in for face datasets.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geometry::{
    fisheye_forward, fisheye_inverse, from_polar, transport_box, BoundingBox, GeometryError, ImageGeometry,
    PolarLocation, DEFAULT_INVERSE_TOL,
};

pub const OUTPUT_SIZE: u32 = 224;
pub const DEFAULT_CROP_MARGIN: f64 = 1.2;
pub const PLACEMENT_RHO_MAX: f64 = 0.8;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("face region at {location:?} does not fit inside the canvas")]
    Clipped { location: PolarLocation },
    #[error("crop box has no overlap with the image")]
    EmptyCrop,
    #[error("invalid source sample {id}: {msg}")]
    InvalidSource { id: String, msg: String },
    #[error("{path}: line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthesisError>;

/// Head orientation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(pitch: f64, yaw: f64, roll: f64) -> Self {
        Self { pitch, yaw, roll }
    }

    pub fn is_finite(&self) -> bool {
        self.pitch.is_finite() && self.yaw.is_finite() && self.roll.is_finite()
    }

    /// True when every angle lies in `[-limit, limit]`.
    pub fn within(&self, limit: f64) -> bool {
        [self.pitch, self.yaw, self.roll].iter().all(|a| a.abs() <= limit)
    }
}

/// Axis-aligned rectangle in continuous pixel coordinates (`x` right, `y` down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn full(image: &RgbImage) -> Self {
        Self::new(0.0, 0.0, image.width() as f64, image.height() as f64)
    }
}

/// A rectilinear face record.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSample {
    pub id: String,
    pub image: RgbImage,
    pub face_box: PixelBox,
    /// Pixel coordinates in `image`.
    pub landmarks: Vec<[f64; 2]>,
    pub pose: EulerAngles,
}

impl SourceSample {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(SynthesisError::InvalidSource {
                id: self.id.clone(),
                msg: msg.into(),
            })
        };
        let b = &self.face_box;
        if !(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= self.image.width() as f64 && b.y1 <= self.image.height() as f64) {
            return bad("face box outside the image");
        }
        if b.width() < 1.0 || b.height() < 1.0 {
            return bad("face box smaller than one pixel");
        }
        if !self.pose.is_finite() || !self.pose.within(180.0) {
            return bad("pose angles must be finite and within [-180, 180]");
        }
        Ok(())
    }
}

/// One synthesized training or evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeSample {
    pub source_id: String,
    pub image: RgbImage,
    pub pose: EulerAngles,
    pub location: PolarLocation,
    /// Landmarks transported into the crop's pixel coordinates.
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CanvasSpec {
    /// Canvas side over the larger face-box side.
    pub scale: f64,
    pub fill: [u8; 3],
}

impl Default for CanvasSpec {
    fn default() -> Self {
        Self {
            scale: 5.0,
            fill: [128, 128, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub canvas: CanvasSpec,
    pub crop_margin: f64,
    pub output_size: u32,
    /// Placement draws per source before the source is skipped.
    pub max_attempts: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            canvas: CanvasSpec::default(),
            crop_margin: DEFAULT_CROP_MARGIN,
            output_size: OUTPUT_SIZE,
            max_attempts: 16,
        }
    }
}

/// Draws a face location: `θ ~ U(−180, 180)` then `ρ ~ U(0, 0.8)`.
pub fn sample_placement<R: Rng + ?Sized>(rng: &mut R) -> PolarLocation {
    let theta = rng.gen_range(-180.0..180.0);
    let rho = rng.gen_range(0.0..PLACEMENT_RHO_MAX);
    PolarLocation { theta, rho }
}

/// A source face placed on a square canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub image: RgbImage,
    /// Face box in canvas-normalized coordinates.
    pub face_box: BoundingBox,
    /// Landmarks in canvas pixel coordinates.
    pub landmarks: Vec<[f64; 2]>,
}

/// Pastes the face region of `src` onto a fresh canvas with its center at `loc`.
pub fn build_canvas(src: &SourceSample, spec: &CanvasSpec, loc: PolarLocation) -> Result<Canvas> {
    assert!(spec.scale >= 2.0, "canvas scale must be at least 2");
    src.validate()?;
    let fb = &src.face_box;
    let (sx0, sy0) = (fb.x0.floor() as u32, fb.y0.floor() as u32);
    let (sx1, sy1) = (fb.x1.ceil() as u32, fb.y1.ceil() as u32);
    let (fw, fh) = (sx1 - sx0, sy1 - sy0);
    let side = (spec.scale * fw.max(fh) as f64).round() as u32;

    let geom = ImageGeometry::new(side, side);
    let (cx, cy) = geom.to_pixel(from_polar(loc));
    let px0 = (cx - fw as f64 / 2.0).round();
    let py0 = (cy - fh as f64 / 2.0).round();
    if px0 < 0.0 || py0 < 0.0 || px0 + fw as f64 > side as f64 || py0 + fh as f64 > side as f64 {
        return Err(SynthesisError::Clipped { location: loc });
    }
    let (px0, py0) = (px0 as u32, py0 as u32);

    let mut image = RgbImage::from_pixel(side, side, Rgb(spec.fill));
    for y in 0..fh {
        for x in 0..fw {
            image.put_pixel(px0 + x, py0 + y, *src.image.get_pixel(sx0 + x, sy0 + y));
        }
    }
    let min = geom.to_normalized(px0 as f64, (py0 + fh) as f64);
    let max = geom.to_normalized((px0 + fw) as f64, py0 as f64);
    let dx = px0 as f64 - sx0 as f64;
    let dy = py0 as f64 - sy0 as f64;
    Ok(Canvas {
        image,
        face_box: BoundingBox::from_corners(min, max),
        landmarks: src.landmarks.iter().map(|l| [l[0] + dx, l[1] + dy]).collect(),
    })
}

/// Bilinear sample at continuous pixel-index coordinates (pixel centers at integers),
/// clamped to the image edge.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |xx: i64, yy: i64| img.get_pixel(xx as u32, yy as u32).0;
    let (a, b, c, d) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bottom = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        out[k] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

fn to_rgb(v: [f64; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

/// Destination-driven fisheye warp of a square canvas. Pixels outside the mapped
/// region take `fill`.
pub fn warp_canvas(canvas: &RgbImage, fill: [u8; 3]) -> RgbImage {
    let (w, h) = canvas.dimensions();
    let geom = ImageGeometry::new(w, h);
    let mut out = RgbImage::new(w, h);
    out.par_chunks_mut(3 * w as usize).enumerate().for_each(|(j, row)| {
        for i in 0..w {
            let q = geom.pixel_center(i, j as u32);
            let px = match fisheye_inverse(q, DEFAULT_INVERSE_TOL) {
                Ok(p) => {
                    let (sx, sy) = geom.to_pixel(p);
                    to_rgb(sample_bilinear(canvas, sx - 0.5, sy - 0.5))
                }
                Err(_) => Rgb(fill),
            };
            row[3 * i as usize..3 * i as usize + 3].copy_from_slice(&px.0);
        }
    });
    out
}

/// Crop `box` (scaled by `margin` about its center, clamped to the image) and
/// resize it bilinearly to `out_size × out_size`. Returns the crop and the pixel
/// rectangle it was taken from.
pub fn crop_face_with_rect(
    warped: &RgbImage,
    bbox: &BoundingBox,
    margin: f64,
    out_size: u32,
) -> Result<(RgbImage, PixelBox)> {
    let geom = ImageGeometry::new(warped.width(), warped.height());
    let e = bbox.expanded(margin);
    let (x0, y1) = geom.to_pixel(e.min());
    let (x1, y0) = geom.to_pixel(e.max());
    let rect = PixelBox::new(
        x0.max(0.0),
        y0.max(0.0),
        x1.min(warped.width() as f64),
        y1.min(warped.height() as f64),
    );
    if !(rect.width() > 0.0 && rect.height() > 0.0) {
        return Err(SynthesisError::EmptyCrop);
    }
    let sx = rect.width() / out_size as f64;
    let sy = rect.height() / out_size as f64;
    let mut out = RgbImage::new(out_size, out_size);
    for (u, v, px) in out.enumerate_pixels_mut() {
        let x = rect.x0 + (u as f64 + 0.5) * sx - 0.5;
        let y = rect.y0 + (v as f64 + 0.5) * sy - 0.5;
        *px = to_rgb(sample_bilinear(warped, x, y));
    }
    Ok((out, rect))
}

pub fn crop_face(warped: &RgbImage, bbox: &BoundingBox, margin: f64) -> Result<RgbImage> {
    crop_face_with_rect(warped, bbox, margin, OUTPUT_SIZE).map(|(img, _)| img)
}

/// Synthesizes one sample from `src`, drawing placements from `rng` until one fits.
pub fn synthesize_sample<R: Rng + ?Sized>(
    src: &SourceSample,
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> Result<FisheyeSample> {
    let mut last_err = None;
    for _ in 0..cfg.max_attempts.max(1) {
        let loc = sample_placement(rng);
        let canvas = match build_canvas(src, &cfg.canvas, loc) {
            Ok(c) => c,
            Err(e @ SynthesisError::Clipped { .. }) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let warped = warp_canvas(&canvas.image, cfg.canvas.fill);
        let fisheye_box = transport_box(&canvas.face_box)?;
        let (image, rect) = crop_face_with_rect(&warped, &fisheye_box, cfg.crop_margin, cfg.output_size)?;

        let geom = ImageGeometry::new(warped.width(), warped.height());
        let mut landmarks = Vec::with_capacity(canvas.landmarks.len());
        for l in &canvas.landmarks {
            let q = fisheye_forward(geom.to_normalized(l[0], l[1]))?;
            let (x, y) = geom.to_pixel(q);
            landmarks.push([
                (x - rect.x0) * cfg.output_size as f64 / rect.width(),
                (y - rect.y0) * cfg.output_size as f64 / rect.height(),
            ]);
        }
        return Ok(FisheyeSample {
            source_id: src.id.clone(),
            image,
            pose: src.pose,
            location: loc,
            landmarks,
        });
    }
    Err(last_err.unwrap_or(SynthesisError::Clipped {
        location: PolarLocation::default(),
    }))
}

#[derive(Debug)]
pub struct SynthesisOutput {
    pub samples: Vec<FisheyeSample>,
    /// Sources skipped after exhausting their retries, with the reason.
    pub rejected: Vec<(String, String)>,
}

/// Synthesizes one sample per source. Source `i` draws from its own generator seeded
/// by `(seed, i)`, so the output does not depend on scheduling.
pub fn synthesize_dataset(sources: &[SourceSample], cfg: &SynthesisConfig, seed: u64) -> SynthesisOutput {
    let results: Vec<Result<FisheyeSample>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            synthesize_sample(src, cfg, &mut rng)
        })
        .collect();
    let mut out = SynthesisOutput {
        samples: Vec::with_capacity(sources.len()),
        rejected: Vec::new(),
    };
    for (src, r) in sources.iter().zip(results) {
        match r {
            Ok(s) => out.samples.push(s),
            Err(e) => {
                log::warn!("skipping source {}: {e}", src.id);
                out.rejected.push((src.id.clone(), e.to_string()));
            }
        }
    }
    out
}

/// Rigid marker standing in for a head: a red bar along `±x`, a green arm along
/// `+y` and a blue "nose" along `+z` (towards the camera). It is mirror-symmetric
/// about the `x = 0` plane like a face, yet no rotation maps it onto itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkerSpec {
    pub size_px: u32,
    /// Projection scale as a fraction of the raster size per model unit.
    pub scale: f64,
    pub arm_radius: f64,
    pub nose_radius: f64,
    pub up_length: f64,
    pub nose_length: f64,
    pub background: [u8; 3],
    pub pitch_range: f64,
    pub yaw_range: f64,
    pub roll_range: f64,
}

impl Default for MarkerSpec {
    fn default() -> Self {
        Self {
            size_px: 64,
            scale: 0.36,
            arm_radius: 0.12,
            nose_radius: 0.16,
            up_length: 1.1,
            nose_length: 0.9,
            background: [30, 30, 30],
            pitch_range: 60.0,
            yaw_range: 60.0,
            roll_range: 45.0,
        }
    }
}

/// `Rz(roll) · Ry(yaw) · Rx(pitch)`, angles in degrees.
pub fn rotation_matrix(pose: &EulerAngles) -> [[f64; 3]; 3] {
    let (sp, cp) = pose.pitch.to_radians().sin_cos();
    let (sy, cy) = pose.yaw.to_radians().sin_cos();
    let (sr, cr) = pose.roll.to_radians().sin_cos();
    [
        [cr * cy, cr * sy * sp - sr * cp, cr * sy * cp + sr * sp],
        [sr * cy, sr * sy * sp + cr * cp, sr * sy * cp - cr * sp],
        [-sy, cy * sp, cy * cp],
    ]
}

fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    color: [f64; 3],
}

/// Renders the marker at `pose` under orthographic (weak-perspective) projection
/// with a depth buffer.
pub fn render_marker(spec: &MarkerSpec, pose: &EulerAngles) -> RgbImage {
    let r = rotation_matrix(pose);
    let o = [0.0; 3];
    let segs = [
        Segment {
            a: o,
            b: rotate(&r, [1.0, 0.0, 0.0]),
            radius: spec.arm_radius,
            color: [220.0, 40.0, 40.0],
        },
        Segment {
            a: o,
            b: rotate(&r, [-1.0, 0.0, 0.0]),
            radius: spec.arm_radius,
            color: [220.0, 40.0, 40.0],
        },
        Segment {
            a: o,
            b: rotate(&r, [0.0, spec.up_length, 0.0]),
            radius: spec.arm_radius,
            color: [40.0, 200.0, 60.0],
        },
        Segment {
            a: o,
            b: rotate(&r, [0.0, 0.0, spec.nose_length]),
            radius: spec.nose_radius,
            color: [50.0, 90.0, 230.0],
        },
    ];
    let n = spec.size_px;
    let s = spec.scale * n as f64;
    let half = n as f64 / 2.0;
    let mut img = RgbImage::from_pixel(n, n, Rgb(spec.background));
    for (u, v, px) in img.enumerate_pixels_mut() {
        let x = (u as f64 + 0.5 - half) / s;
        let y = (half - (v as f64 + 0.5)) / s;
        let mut best: Option<(f64, [f64; 3])> = None;
        for seg in &segs {
            let (dx, dy) = (seg.b[0] - seg.a[0], seg.b[1] - seg.a[1]);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 1e-12 {
                (((x - seg.a[0]) * dx + (y - seg.a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                // Foreshortened to a point: the near end is what the camera sees.
                if seg.b[2] > seg.a[2] {
                    1.0
                } else {
                    0.0
                }
            };
            let (ex, ey) = (x - (seg.a[0] + t * dx), y - (seg.a[1] + t * dy));
            let dist = (ex * ex + ey * ey).sqrt();
            if dist <= seg.radius {
                let depth = seg.a[2] + t * (seg.b[2] - seg.a[2]);
                if best.is_none_or(|(d, _)| depth > d) {
                    let shade = 0.75 + 0.25 * (1.0 - dist / seg.radius);
                    best = Some((depth, seg.color.map(|c| c * shade)));
                }
            }
        }
        if let Some((_, c)) = best {
            *px = to_rgb(c);
        }
    }
    img
}

/// Tight pixel box around every non-background pixel; the full image when empty.
pub fn foreground_box(img: &RgbImage, background: [u8; 3]) -> PixelBox {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for (x, y, p) in img.enumerate_pixels() {
        if p.0 != background {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x0 == u32::MAX {
        return PixelBox::full(img);
    }
    PixelBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

/// Renders `n` markers at uniformly drawn poses. Sample `i` uses a generator seeded
/// by `(seed, i)`.
pub fn generate_marker_dataset(n: usize, spec: &MarkerSpec, seed: u64) -> Vec<SourceSample> {
    assert!(n >= 1, "at least one marker");
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let pose = EulerAngles::new(
                rng.gen_range(-spec.pitch_range..=spec.pitch_range),
                rng.gen_range(-spec.yaw_range..=spec.yaw_range),
                rng.gen_range(-spec.roll_range..=spec.roll_range),
            );
            let image = render_marker(spec, &pose);
            let face_box = foreground_box(&image, spec.background);
            SourceSample {
                id: format!("marker_{i:05}"),
                image,
                face_box,
                landmarks: Vec::new(),
                pose,
            }
        })
        .collect()
}

/// One manifest line. Fisheye manifests carry `theta`/`rho`; source manifests omit
/// them and may carry a face box (`[x0, y0, x1, y1]` pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub landmarks: Vec<[f64; 2]>,
}

impl ManifestRecord {
    pub fn pose(&self) -> EulerAngles {
        EulerAngles::new(self.pitch, self.yaw, self.roll)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.pose().is_finite() {
            return Err("pose angles must be finite".into());
        }
        if !self.pose().within(180.0) {
            return Err("pose angles must lie in [-180, 180]".into());
        }
        match (self.theta, self.rho) {
            (Some(t), Some(r)) => {
                if !(t.is_finite() && (-180.0..=180.0).contains(&t)) {
                    return Err(format!("theta {t} outside [-180, 180]"));
                }
                if !(r.is_finite() && (0.0..1.0).contains(&r)) {
                    return Err(format!("rho {r} outside [0, 1)"));
                }
            }
            (None, None) => {}
            _ => return Err("theta and rho must appear together".into()),
        }
        if let Some(b) = self.face_box {
            if !b.iter().all(|v| v.is_finite()) || b[2] <= b[0] || b[3] <= b[1] {
                return Err(format!("invalid face box {b:?}"));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a manifest. Blank lines are skipped; errors name the 1-based line.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| SynthesisError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}

fn resolve(manifest: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Writes `images/<id>.png` for every sample plus `manifest.jsonl` under `dir`.
pub fn save_fisheye_samples(samples: &[FisheyeSample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{}.png", s.source_id);
        s.image.save(dir.join(&rel))?;
        records.push(ManifestRecord {
            image_path: rel,
            pitch: s.pose.pitch,
            yaw: s.pose.yaw,
            roll: s.pose.roll,
            theta: Some(s.location.theta),
            rho: Some(s.location.rho),
            source_id: s.source_id.clone(),
            face_box: None,
            landmarks: s.landmarks.clone(),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&records, &path)?;
    Ok(path)
}

pub fn load_fisheye_samples(manifest: &Path) -> Result<Vec<FisheyeSample>> {
    read_manifest(manifest)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let (Some(theta), Some(rho)) = (r.theta, r.rho) else {
                return Err(SynthesisError::Manifest {
                    path: manifest.to_path_buf(),
                    line: i + 1,
                    msg: "fisheye record lacks theta/rho".into(),
                });
            };
            let image = image::open(resolve(manifest, &r.image_path))?.to_rgb8();
            Ok(FisheyeSample {
                source_id: r.source_id.clone(),
                image,
                pose: r.pose(),
                location: PolarLocation::new(theta, rho),
                landmarks: r.landmarks,
            })
        })
        .collect()
}

pub fn save_sources(sources: &[SourceSample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::with_capacity(sources.len());
    for s in sources {
        let rel = format!("images/{}.png", s.id);
        s.image.save(dir.join(&rel))?;
        let b = s.face_box;
        records.push(ManifestRecord {
            image_path: rel,
            pitch: s.pose.pitch,
            yaw: s.pose.yaw,
            roll: s.pose.roll,
            theta: None,
            rho: None,
            source_id: s.id.clone(),
            face_box: Some([b.x0, b.y0, b.x1, b.y1]),
            landmarks: s.landmarks.clone(),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&records, &path)?;
    Ok(path)
}

/// Loads a source manifest. Records without a face box use the whole image.
pub fn load_sources(manifest: &Path) -> Result<Vec<SourceSample>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let image = image::open(resolve(manifest, &r.image_path))?.to_rgb8();
            let face_box = r
                .face_box
                .map_or_else(|| PixelBox::full(&image), |b| PixelBox::new(b[0], b[1], b[2], b[3]));
            let s = SourceSample {
                id: r.source_id.clone(),
                pose: r.pose(),
                image,
                face_box,
                landmarks: r.landmarks,
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{to_polar, NormalizedPoint};
    use sha2::{Digest, Sha256};

    fn hash_image(img: &RgbImage) -> String {
        let mut h = Sha256::new();
        h.update(img.width().to_le_bytes());
        h.update(img.height().to_le_bytes());
        h.update(img.as_raw());
        format!("{:x}", h.finalize())
    }

    fn solid_source(side: u32, color: [u8; 3]) -> SourceSample {
        SourceSample {
            id: "solid".into(),
            image: RgbImage::from_pixel(side, side, Rgb(color)),
            face_box: PixelBox::new(0.0, 0.0, side as f64, side as f64),
            landmarks: vec![[side as f64 / 2.0, side as f64 / 2.0]],
            pose: EulerAngles::new(10.0, -20.0, 5.0),
        }
    }

    #[test]
    fn placement_golden_first_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let l = sample_placement(&mut rng);
        assert_eq!((l.theta, l.rho), (PLACEMENT_GOLDEN_THETA, PLACEMENT_GOLDEN_RHO));
    }

    const PLACEMENT_GOLDEN_THETA: f64 = 65.48262923040167;
    const PLACEMENT_GOLDEN_RHO: f64 = 0.7602203261379872;

    #[test]
    fn placement_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let l = sample_placement(&mut rng);
            assert!((0.0..PLACEMENT_RHO_MAX).contains(&l.rho));
            assert!((-180.0..180.0).contains(&l.theta));
        }
    }

    #[test]
    fn placement_covers_every_polar_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cells = [[0usize; 8]; 12];
        for _ in 0..5000 {
            let l = sample_placement(&mut rng);
            let t = (((l.theta + 180.0) / 30.0) as usize).min(11);
            let r = ((l.rho / 0.1) as usize).min(7);
            cells[t][r] += 1;
        }
        assert!(cells.iter().flatten().all(|&c| c > 0), "{cells:?}");
    }

    #[test]
    fn canvas_size_and_centered_placement() {
        let src = solid_source(40, [200, 10, 10]);
        let c = build_canvas(&src, &CanvasSpec::default(), PolarLocation::new(0.0, 0.0)).unwrap();
        assert_eq!(c.image.dimensions(), (200, 200));
        assert!(c.face_box.center.norm() < 1e-12);
        assert!((c.face_box.half_width - 0.2).abs() < 1e-12);
        assert_eq!(c.image.get_pixel(100, 100).0, [200, 10, 10]);
        assert_eq!(c.image.get_pixel(0, 0).0, [128, 128, 128]);
    }

    #[test]
    fn canvas_polar_placement() {
        let src = solid_source(40, [200, 10, 10]);
        let c = build_canvas(&src, &CanvasSpec::default(), PolarLocation::new(90.0, 0.5)).unwrap();
        assert!(c.face_box.center.x.abs() < 1e-12);
        assert!((c.face_box.center.y - 0.5).abs() < 1e-12);
        // Normalized y = 0.5 sits a quarter of the way down the canvas.
        assert_eq!(c.image.get_pixel(100, 50).0, [200, 10, 10]);
        assert_eq!(c.image.get_pixel(100, 150).0, [128, 128, 128]);
    }

    #[test]
    fn canvas_rejects_clipping() {
        let src = solid_source(40, [1, 2, 3]);
        let r = build_canvas(&src, &CanvasSpec::default(), PolarLocation::new(0.0, 0.95));
        assert!(matches!(r, Err(SynthesisError::Clipped { .. })));
    }

    #[test]
    fn warp_preserves_constants_and_center() {
        let mut canvas = RgbImage::from_pixel(101, 101, Rgb([77, 88, 99]));
        canvas.put_pixel(50, 50, Rgb([1, 2, 3]));
        let out = warp_canvas(&canvas, [0, 0, 0]);
        assert_eq!(out.get_pixel(50, 50).0, [1, 2, 3]);
        let geom = ImageGeometry::new(101, 101);
        for (i, j, p) in out.enumerate_pixels() {
            let q = geom.pixel_center(i, j);
            let inside = fisheye_inverse(q, DEFAULT_INVERSE_TOL).is_ok();
            // Away from the altered center pixel, mapped pixels keep the constant.
            if inside && q.norm() > 0.1 {
                assert_eq!(p.0, [77, 88, 99]);
            }
            if !inside {
                assert_eq!(p.0, [0, 0, 0]);
            }
        }
    }

    #[test]
    fn warp_keeps_center_line_straight_and_bows_others() {
        let n = 201;
        let mut canvas = RgbImage::from_pixel(n, n, Rgb([0, 0, 0]));
        for x in 0..n {
            canvas.put_pixel(x, 100, Rgb([255, 255, 255]));
            canvas.put_pixel(x, 40, Rgb([255, 255, 255]));
        }
        let out = warp_canvas(&canvas, [0, 0, 0]);
        let geom = ImageGeometry::new(n, n);
        // Brightest row in each column within a band.
        let peak_row = |col: u32, rows: std::ops::Range<u32>| {
            rows.max_by_key(|&r| out.get_pixel(col, r).0[0]).unwrap()
        };
        for col in [60, 80, 100, 120, 140] {
            assert_eq!(peak_row(col, 90..111), 100);
        }
        // The line at normalized y = 0.4 maps through the forward map; its row at
        // each column moves towards the center with horizontal distance.
        let y_norm = geom.to_normalized(0.0, 40.5).y;
        let expected_row = |x_norm: f64| {
            let q = fisheye_forward(NormalizedPoint::new(x_norm, y_norm)).unwrap();
            geom.to_pixel(q)
        };
        let (_, center_row) = expected_row(0.0);
        let (edge_col, edge_row) = expected_row(0.5);
        assert!(edge_row > center_row + 2.0, "line should bow towards the center");
        let observed_center = peak_row(100, 40..100) as f64 + 0.5;
        let observed_edge = peak_row(edge_col as u32, 40..100) as f64 + 0.5;
        assert!((observed_center - center_row).abs() <= 1.0);
        assert!((observed_edge - edge_row).abs() <= 1.0);
        assert!(observed_edge > observed_center);
    }

    #[test]
    fn crop_full_image_is_plain_resize() {
        let img = RgbImage::from_fn(50, 50, |x, y| Rgb([(x * 5) as u8, (y * 5) as u8, 7]));
        let full = BoundingBox::new(NormalizedPoint::ORIGIN, 1.0, 1.0);
        let (out, rect) = crop_face_with_rect(&img, &full, 1.0, 224).unwrap();
        assert_eq!(rect, PixelBox::new(0.0, 0.0, 50.0, 50.0));
        assert_eq!(out.dimensions(), (224, 224));
        assert_eq!(out.get_pixel(0, 0).0, [0, 0, 7]);
        assert_eq!(out.get_pixel(223, 223).0, [245, 245, 7]);
    }

    #[test]
    fn crop_gradient_golden() {
        let img = RgbImage::from_fn(300, 300, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) / 3) as u8]));
        let geom = ImageGeometry::new(300, 300);
        let min = geom.to_normalized(100.0, 200.0);
        let max = geom.to_normalized(200.0, 100.0);
        let b = BoundingBox::from_corners(min, max);
        let out = crop_face(&img, &b, 1.0).unwrap();
        assert_eq!(out.dimensions(), (OUTPUT_SIZE, OUTPUT_SIZE));
        assert_eq!(hash_image(&out), CROP_GOLDEN);
    }

    const CROP_GOLDEN: &str = "dfde795f301af20f02ac7e41ad774ebcc91bd356e50af9724084b11a5764b1d3";

    #[test]
    fn crop_outside_image_is_rejected() {
        let img = RgbImage::new(10, 10);
        let b = BoundingBox::new(NormalizedPoint::new(3.0, 3.0), 0.1, 0.1);
        assert!(matches!(crop_face(&img, &b, 1.2), Err(SynthesisError::EmptyCrop)));
    }

    #[test]
    fn marker_front_view_golden() {
        let img = render_marker(&MarkerSpec::default(), &EulerAngles::default());
        assert_eq!(hash_image(&img), MARKER_FRONT_GOLDEN);
        // The nose points at the camera: blue at the center.
        let c = img.get_pixel(32, 32).0;
        assert!(c[2] > c[0] && c[2] > c[1]);
    }

    const MARKER_FRONT_GOLDEN: &str = "3b4ec09c936505fe47cc57dbfee73d3ffed2daeff79e30b86ba5895c218b7f85";

    #[test]
    fn marker_yaw_mirror_symmetry() {
        let spec = MarkerSpec::default();
        for (pitch, yaw, roll) in [(0.0, 30.0, 0.0), (15.0, 42.0, -20.0)] {
            let a = render_marker(&spec, &EulerAngles::new(pitch, yaw, roll));
            let b = render_marker(&spec, &EulerAngles::new(pitch, -yaw, -roll));
            let flipped = image::imageops::flip_horizontal(&b);
            assert_eq!(a, flipped);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn marker_dataset_is_deterministic() {
        let spec = MarkerSpec::default();
        let a = generate_marker_dataset(20, &spec, 7);
        let b = generate_marker_dataset(20, &spec, 7);
        assert_eq!(a, b);
        let c = generate_marker_dataset(20, &spec, 8);
        assert_ne!(a[0].pose, c[0].pose);
        for s in &a {
            assert!(s.pose.pitch.abs() <= 60.0 && s.pose.yaw.abs() <= 60.0 && s.pose.roll.abs() <= 45.0);
            assert!(s.face_box.width() > 10.0 && s.face_box.x0 >= 0.0 && s.face_box.x1 <= 64.0);
        }
    }

    #[test]
    fn location_fidelity_of_warped_center_dot() {
        // A gray face region with a small red dot at its center. The red-weighted
        // centroid of the warped canvas should sit at the forward-mapped box center.
        let mut src = solid_source(30, [128, 128, 128]);
        for y in 13..17 {
            for x in 13..17 {
                src.image.put_pixel(x, y, Rgb([255, 0, 0]));
            }
        }
        let cfg = SynthesisConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..40 {
            let loc = sample_placement(&mut rng);
            let Ok(canvas) = build_canvas(&src, &cfg.canvas, loc) else { continue };
            let warped = warp_canvas(&canvas.image, cfg.canvas.fill);
            let geom = ImageGeometry::new(warped.width(), warped.height());
            let (mut sx, mut sy, mut mass) = (0.0, 0.0, 0.0);
            for (x, y, p) in warped.enumerate_pixels() {
                let w = (p.0[0] as f64 - p.0[1] as f64).max(0.0);
                sx += w * (x as f64 + 0.5);
                sy += w * (y as f64 + 0.5);
                mass += w;
            }
            let detected = to_polar(geom.to_normalized(sx / mass, sy / mass));
            let expected = to_polar(fisheye_forward(canvas.face_box.center).unwrap());
            assert!((detected.rho - expected.rho).abs() < 0.02, "{detected:?} vs {expected:?}");
            if expected.rho > 0.05 {
                let mut dt = (detected.theta - expected.theta).abs();
                dt = dt.min(360.0 - dt);
                assert!(dt < 2.0, "{detected:?} vs {expected:?}");
            }
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn synthesize_copies_pose_and_records_location() {
        let srcs = generate_marker_dataset(6, &MarkerSpec::default(), 1);
        let out = synthesize_dataset(&srcs, &SynthesisConfig::default(), 9);
        assert!(out.rejected.is_empty());
        assert_eq!(out.samples.len(), 6);
        for (s, src) in out.samples.iter().zip(&srcs) {
            assert_eq!(s.pose, src.pose);
            assert_eq!(s.source_id, src.id);
            assert!(s.location.rho < PLACEMENT_RHO_MAX);
            assert_eq!(s.image.dimensions(), (224, 224));
        }
        let again = synthesize_dataset(&srcs, &SynthesisConfig::default(), 9);
        assert_eq!(again.samples, out.samples);
    }

    #[test]
    fn landmarks_are_transported_into_the_crop() {
        let src = solid_source(30, [255, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = synthesize_sample(&src, &SynthesisConfig::default(), &mut rng).unwrap();
        let [x, y] = s.landmarks[0];
        // The box center lands near the middle of the crop.
        assert!((x - 112.0).abs() < 15.0 && (y - 112.0).abs() < 15.0, "{x} {y}");
        assert_eq!(s.image.get_pixel(x as u32, y as u32).0[0], 255);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_manifest(&path).unwrap().is_empty());

        let rec = ManifestRecord {
            image_path: "images/a.png".into(),
            pitch: 0.1 + 0.2,
            yaw: -33.333333333333336,
            roll: 1e-300,
            theta: Some(-179.99999999999997),
            rho: Some(0.7999999999999999),
            source_id: "a".into(),
            face_box: None,
            landmarks: vec![[1.5, 2.25]],
        };
        write_manifest(std::slice::from_ref(&rec), &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        assert_eq!(back[0].pitch.to_bits(), rec.pitch.to_bits());

        fs::write(&path, "{\"image_path\":\"x\",\"pitch\":NaN,\"yaw\":0,\"roll\":0,\"source_id\":\"x\"}\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(SynthesisError::Manifest { line: 1, .. })));
        let line = serde_json::to_string(&rec).unwrap();
        fs::write(&path, format!("{line}\nnot json\n")).unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn manifest_rejects_non_finite_pose_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut rec = ManifestRecord {
            image_path: "a.png".into(),
            pitch: 0.0,
            yaw: 0.0,
            roll: 0.0,
            theta: None,
            rho: None,
            source_id: "a".into(),
            face_box: None,
            landmarks: vec![],
        };
        rec.yaw = f64::NAN;
        // serde_json writes NaN as null, which must not read back as a pose.
        write_manifest(&[rec], &path).unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn samples_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let srcs = generate_marker_dataset(3, &MarkerSpec::default(), 2);
        let sp = save_sources(&srcs, &dir.path().join("src")).unwrap();
        assert_eq!(load_sources(&sp).unwrap(), srcs);
        let fs_out = synthesize_dataset(&srcs, &SynthesisConfig::default(), 5);
        let mp = save_fisheye_samples(&fs_out.samples, &dir.path().join("fish")).unwrap();
        assert_eq!(load_fisheye_samples(&mp).unwrap(), fs_out.samples);
    }
}
