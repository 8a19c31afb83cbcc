//! Synthetic beating-annulus cine sequences with exact labels, plus the
//! preprocessing and augmentation applied before training, and sequence I/O.
//!
//! A phantom is a bright disk (blood pool) inside a mid-grey ring
//! (myocardium) on a dark background. Over one cycle of `n_frames` the inner
//! radius follows `mid + amp·cos(2πt/n)`, so frame 0 is end-diastole, the
//! wall thickens towards end-systole and the centre drifts along a seeded
//! direction.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_pgm, write_pgm, Image, LabelMask, BACKGROUND, BLOOD_POOL, MYOCARDIUM};

pub const BLOOD_INTENSITY: f64 = 220.0;
pub const RING_INTENSITY: f64 = 110.0;
/// Ring intensity inside the weak sector of the `base` preset.
pub const WEAK_RING_INTENSITY: f64 = 65.0;
pub const BACKGROUND_INTENSITY: f64 = 40.0;
/// Peak deviation of the static background texture.
pub const TEXTURE_AMPLITUDE: f64 = 10.0;
/// Angular width of the weak ring sector, in radians.
const WEAK_SECTOR_WIDTH: f64 = PI / 3.0;

/// Difficulty regimes: a small ring, a full ring, and a ring with a faint sector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Apex,
    Middle,
    Base,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Apex, Preset::Middle, Preset::Base];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Apex => "apex",
            Preset::Middle => "middle",
            Preset::Base => "base",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "apex" => Ok(Preset::Apex),
            "middle" => Ok(Preset::Middle),
            "base" => Ok(Preset::Base),
            other => Err(Error::Config(format!("unknown preset '{other}' (apex, middle, base)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub preset: Preset,
    /// Height and width in pixels.
    pub size: usize,
    pub n_frames: usize,
    /// Blood-pool radius at end-diastole (frame 0).
    pub r_inner_ed: f64,
    /// Blood-pool radius at end-systole (mid-cycle).
    pub r_inner_es: f64,
    pub wall_thickness_ed: f64,
    pub wall_thickness_es: f64,
    /// Centre displacement at end-systole, in pixels.
    pub center_drift: f64,
    pub noise_sigma: f64,
    pub background_texture: bool,
    pub seed: u64,
}

impl PhantomConfig {
    /// Nominal 64×64, 16-frame geometry of a preset.
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (r_ed, r_es, w_ed, w_es, drift) = match preset {
            Preset::Apex => (7.0, 4.0, 4.0, 5.5, 1.0),
            Preset::Middle => (13.0, 8.5, 5.0, 7.0, 2.0),
            Preset::Base => (15.0, 10.5, 5.0, 6.5, 2.0),
        };
        PhantomConfig {
            preset,
            size: 64,
            n_frames: 16,
            r_inner_ed: r_ed,
            r_inner_es: r_es,
            wall_thickness_ed: w_ed,
            wall_thickness_es: w_es,
            center_drift: drift,
            noise_sigma: 8.0,
            background_texture: true,
            seed,
        }
    }

    /// Preset geometry with radius, contraction, wall thickness and drift each
    /// scaled by a seeded factor in [0.85, 1.15], for building varied datasets.
    pub fn sampled(preset: Preset, seed: u64) -> Self {
        let mut cfg = Self::preset(preset, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d9e0_u64);
        let mut jitter = || rng.gen_range(0.85..1.15);
        let ratio = (cfg.r_inner_es / cfg.r_inner_ed * jitter()).min(0.9);
        cfg.r_inner_ed *= jitter();
        cfg.r_inner_es = cfg.r_inner_ed * ratio;
        cfg.wall_thickness_ed *= jitter();
        cfg.wall_thickness_es *= jitter();
        cfg.center_drift *= jitter();
        cfg
    }

    /// Same phantom on a `size`×`size` grid, all lengths scaled proportionally.
    pub fn resized(&self, size: usize) -> Self {
        let s = size as f64 / self.size as f64;
        PhantomConfig {
            size,
            r_inner_ed: self.r_inner_ed * s,
            r_inner_es: self.r_inner_es * s,
            wall_thickness_ed: self.wall_thickness_ed * s,
            wall_thickness_es: self.wall_thickness_es * s,
            center_drift: self.center_drift * s,
            ..self.clone()
        }
    }

    /// Largest distance from the image centre reached by the outer wall.
    fn max_extent(&self) -> f64 {
        (self.r_inner_ed + self.wall_thickness_ed).max(self.r_inner_es + self.wall_thickness_es) + self.center_drift
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 8 {
            return bad(format!("phantom size {} is below 8", self.size));
        }
        if self.n_frames == 0 {
            return bad("phantom n_frames must be at least 1".into());
        }
        let positive = [
            ("r_inner_es", self.r_inner_es),
            ("wall_thickness_ed", self.wall_thickness_ed),
            ("wall_thickness_es", self.wall_thickness_es),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("phantom {name} must be positive, got {v}"));
            }
        }
        if !(self.r_inner_es < self.r_inner_ed) {
            return bad(format!(
                "end-systolic radius {} must be below end-diastolic radius {}",
                self.r_inner_es, self.r_inner_ed
            ));
        }
        if !(self.center_drift >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("phantom center_drift and noise_sigma must be non-negative".into());
        }
        let limit = (self.size as f64 - 1.0) / 2.0 - 1.0;
        if self.max_extent() > limit {
            return bad(format!(
                "ring reaches {:.2} px from the centre but a {} px image allows {:.2}",
                self.max_extent(),
                self.size,
                limit
            ));
        }
        Ok(())
    }
}

/// Ring geometry at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingGeometry {
    pub cx: f64,
    pub cy: f64,
    pub r_inner: f64,
    pub r_outer: f64,
}

/// Per-sequence random draws that stay fixed over the cycle.
#[derive(Clone, Copy, Debug)]
struct Layout {
    drift_dir: (f64, f64),
    texture_phase: [f64; 3],
    weak_sector_angle: f64,
}

impl Layout {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let a = rng.gen_range(0.0..2.0 * PI);
        Layout {
            drift_dir: (a.cos(), a.sin()),
            texture_phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
            weak_sector_angle: rng.gen_range(-PI..PI),
        }
    }

    fn texture(&self, x: f64, y: f64) -> f64 {
        let [p0, p1, p2] = self.texture_phase;
        let t = 0.6 * (0.31 * x + p0).sin() * (0.23 * y + p1).sin() + 0.4 * (0.17 * (x + y) + p2).cos();
        TEXTURE_AMPLITUDE * t
    }
}

/// Geometry at (possibly fractional, possibly beyond one cycle) time `t`.
fn geometry(cfg: &PhantomConfig, layout: &Layout, t: f64) -> RingGeometry {
    let n = cfg.n_frames as f64;
    let c = (2.0 * PI * t.rem_euclid(n) / n).cos();
    let mid = (cfg.r_inner_ed + cfg.r_inner_es) / 2.0;
    let amp = (cfg.r_inner_ed - cfg.r_inner_es) / 2.0;
    let r_inner = mid + amp * c;
    let wall = cfg.wall_thickness_es + (cfg.wall_thickness_ed - cfg.wall_thickness_es) * (1.0 + c) / 2.0;
    let shift = cfg.center_drift * (1.0 - c) / 2.0;
    let centre = (cfg.size as f64 - 1.0) / 2.0;
    RingGeometry {
        cx: centre + shift * layout.drift_dir.0,
        cy: centre + shift * layout.drift_dir.1,
        r_inner,
        r_outer: r_inner + wall,
    }
}

/// Ring geometry of the phantom `cfg` at time `t` (in frames).
pub fn ring_geometry(cfg: &PhantomConfig, t: f64) -> RingGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    geometry(cfg, &Layout::draw(&mut rng), t)
}

fn rasterize(size: usize, g: &RingGeometry) -> LabelMask {
    LabelMask::from_fn(size, size, |x, y| {
        let d = (x as f64 - g.cx).hypot(y as f64 - g.cy);
        if d < g.r_inner {
            BLOOD_POOL
        } else if d < g.r_outer {
            MYOCARDIUM
        } else {
            BACKGROUND
        }
    })
}

/// Label mask of the phantom `cfg` at time `t` (in frames).
pub fn label_at(cfg: &PhantomConfig, t: f64) -> LabelMask {
    rasterize(cfg.size, &ring_geometry(cfg, t))
}

/// Ordered frames of one cycle with per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CineSequence {
    pub frames: Vec<Image>,
    pub labels: Vec<LabelMask>,
    pub pixel_spacing: f64,
    /// Generating configuration, when the sequence is a phantom.
    pub config: Option<PhantomConfig>,
}

impl CineSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), Image::dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument("sequence has no frames".into()));
        }
        if self.frames.len() != self.labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames but {} label masks",
                self.frames.len(),
                self.labels.len()
            )));
        }
        let dims = self.dims();
        for (t, (f, l)) in self.frames.iter().zip(&self.labels).enumerate() {
            if f.dims() != dims || l.dims() != dims {
                return Err(Error::InvalidArgument(format!("frame {t} does not match size {dims:?}")));
            }
            if l.data().iter().any(|&v| v > BLOOD_POOL) {
                return Err(Error::InvalidArgument(format!("label {t} has a class outside 0..=2")));
            }
        }
        Ok(())
    }
}

/// Renders the phantom described by `cfg`.
///
/// Intensities are drawn per class, perturbed with Gaussian noise, then the
/// whole sequence is rescaled to [0, 255] and rounded to integers.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<CineSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = Layout::draw(&mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let size = cfg.size;

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut labels = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        let g = geometry(cfg, &layout, t as f64);
        let label = rasterize(size, &g);
        let mut frame = Image::from_fn(size, size, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            match label.get(x, y) {
                BLOOD_POOL => BLOOD_INTENSITY,
                MYOCARDIUM => {
                    let angle = (yf - g.cy).atan2(xf - g.cx);
                    let off = (angle - layout.weak_sector_angle + PI).rem_euclid(2.0 * PI) - PI;
                    if cfg.preset == Preset::Base && off.abs() < WEAK_SECTOR_WIDTH / 2.0 {
                        WEAK_RING_INTENSITY
                    } else {
                        RING_INTENSITY
                    }
                }
                _ if cfg.background_texture => BACKGROUND_INTENSITY + layout.texture(xf, yf),
                _ => BACKGROUND_INTENSITY,
            }
        });
        if cfg.noise_sigma > 0.0 {
            for v in frame.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        frames.push(frame);
        labels.push(label);
    }
    Ok(CineSequence {
        frames: normalize_sequence(&frames),
        labels,
        pixel_spacing: 1.0,
        config: Some(cfg.clone()),
    })
}

/// Rescales the joint [min, max] of all frames onto [0, 255] and rounds.
pub fn normalize_sequence(frames: &[Image]) -> Vec<Image> {
    let (lo, hi) = frames
        .iter()
        .map(Image::min_max)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (l, h)| (a.min(l), b.max(h)));
    let span = hi - lo;
    frames
        .iter()
        .map(|f| {
            let mut out = f.clone();
            for v in out.data_mut() {
                *v = if span > 0.0 { ((*v - lo) * 255.0 / span).round() } else { 0.0 };
            }
            out
        })
        .collect()
}

/// Linear rescale of the image's [min, max] onto [0, 255]; constant images map to zero.
pub fn normalize_intensity(image: &Image) -> Image {
    image.normalized()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Contrast about the frame mean scaled by 0.3.
    ContrastDrop,
    /// Extra Gaussian noise at five times the sequence noise level.
    NoiseBurst,
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrast_drop" => Ok(Corruption::ContrastDrop),
            "noise_burst" => Ok(Corruption::NoiseBurst),
            other => Err(Error::Config(format!(
                "unknown corruption '{other}' (contrast_drop, noise_burst)"
            ))),
        }
    }
}

pub const CONTRAST_DROP_FACTOR: f64 = 0.3;
pub const NOISE_BURST_FACTOR: f64 = 5.0;
/// Noise level assumed for sequences without a generating config.
pub const DEFAULT_NOISE_SIGMA: f64 = 8.0;

/// Copy of `seq` with frame `idx` degraded; labels are untouched.
pub fn corrupt_frame(seq: &CineSequence, idx: usize, mode: Corruption) -> Result<CineSequence> {
    if idx >= seq.n_frames() {
        return Err(Error::InvalidArgument(format!(
            "corruption index {idx} out of range for {} frames",
            seq.n_frames()
        )));
    }
    let mut out = seq.clone();
    let frame = &mut out.frames[idx];
    match mode {
        Corruption::ContrastDrop => {
            let mean = frame.mean();
            for v in frame.data_mut() {
                *v = (mean + CONTRAST_DROP_FACTOR * (*v - mean)).round().clamp(0.0, 255.0);
            }
        }
        Corruption::NoiseBurst => {
            let (sigma, seed) = seq
                .config
                .as_ref()
                .map_or((DEFAULT_NOISE_SIGMA, 0), |c| (c.noise_sigma.max(1.0), c.seed));
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xb0_u64 << 32 | idx as u64));
            let noise = Normal::new(0.0, NOISE_BURST_FACTOR * sigma).map_err(|e| Error::Config(e.to_string()))?;
            for v in frame.data_mut() {
                *v = (*v + noise.sample(&mut rng)).round().clamp(0.0, 255.0);
            }
        }
    }
    Ok(out)
}

fn crop_offsets(h: usize, w: usize, size: usize) -> Result<(usize, usize)> {
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidArgument(format!("cannot crop {size}x{size} from {h}x{w}")));
    }
    Ok(((h - size) / 2, (w - size) / 2))
}

/// Central `size`×`size` window.
pub fn center_crop(image: &Image, size: usize) -> Result<Image> {
    let (oy, ox) = crop_offsets(image.height(), image.width(), size)?;
    Ok(Image::from_fn(size, size, |x, y| image.get(x + ox, y + oy)))
}

pub fn center_crop_mask(mask: &LabelMask, size: usize) -> Result<LabelMask> {
    let (oy, ox) = crop_offsets(mask.height(), mask.width(), size)?;
    Ok(LabelMask::from_fn(size, size, |x, y| mask.get(x + ox, y + oy)))
}

/// Source position of output pixel `(x, y)` under a rotation by `angle_rad`
/// about the image centre.
fn rotation_source(x: usize, y: usize, h: usize, w: usize, sin: f64, cos: f64) -> (f64, f64) {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
    (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
}

/// Image content rotated by `angle_deg` about the centre, bilinear with
/// replicated border. Positive angles turn the +x axis towards +y.
pub fn rotate_image(image: &Image, angle_deg: f64) -> Image {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (h, w) = image.dims();
    Image::from_fn(h, w, |x, y| {
        let (sx, sy) = rotation_source(x, y, h, w, s, c);
        image.sample_clamped(sx, sy)
    })
}

/// Label mask rotated like [`rotate_image`], nearest neighbour, background outside.
pub fn rotate_mask(mask: &LabelMask, angle_deg: f64) -> LabelMask {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (h, w) = mask.dims();
    LabelMask::from_fn(h, w, |x, y| {
        let (sx, sy) = rotation_source(x, y, h, w, s, c);
        let (rx, ry) = (sx.round(), sy.round());
        if rx < 0.0 || ry < 0.0 || rx >= w as f64 || ry >= h as f64 {
            BACKGROUND
        } else {
            mask.get(rx as usize, ry as usize)
        }
    })
}

/// Uniform angle in [−max_deg, max_deg].
pub fn draw_angle(max_deg: f64, rng: &mut impl Rng) -> f64 {
    if max_deg > 0.0 {
        rng.gen_range(-max_deg..=max_deg)
    } else {
        0.0
    }
}

/// Rotates an image and its labels by one angle drawn uniformly from
/// [−max_deg, max_deg] with a generator seeded by `seed`.
pub fn augment_rotate(image: &Image, label: &LabelMask, max_deg: f64, seed: u64) -> (Image, LabelMask) {
    let angle = draw_angle(max_deg, &mut ChaCha8Rng::seed_from_u64(seed));
    (rotate_image(image, angle), rotate_mask(label, angle))
}

// ---------------------------------------------------------------------------
// Sequence files

pub const MANIFEST: &str = "sequence.json";

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:03}.pgm")
}

pub fn label_file(t: usize) -> String {
    format!("label_{t:03}.pgm")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    n_frames: usize,
    size: [usize; 2],
    pixel_spacing: f64,
    config: Option<PhantomConfig>,
}

/// Writes frames and labels as 8-bit PGM plus a JSON manifest.
///
/// Frame intensities must be integers in [0, 255] so that loading gives
/// back the identical sequence.
pub fn save_sequence(seq: &CineSequence, dir: &Path) -> Result<()> {
    seq.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = seq.dims();
    for (t, (frame, label)) in seq.frames.iter().zip(&seq.labels).enumerate() {
        let mut pixels = Vec::with_capacity(h * w);
        for &v in frame.data() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "frame {t} holds {v}, which is not an 8-bit integer intensity"
                )));
            }
            pixels.push(v as u8);
        }
        write_pgm(&dir.join(frame_file(t)), h, w, &pixels)?;
        write_pgm(&dir.join(label_file(t)), h, w, label.data())?;
    }
    let manifest = Manifest {
        n_frames: seq.n_frames(),
        size: [h, w],
        pixel_spacing: seq.pixel_spacing,
        config: seq.config.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_sequence(dir: &Path) -> Result<CineSequence> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let [h, w] = manifest.size;
    let mut frames = Vec::with_capacity(manifest.n_frames);
    let mut labels = Vec::with_capacity(manifest.n_frames);
    for t in 0..manifest.n_frames {
        let check = |file: String| -> Result<Vec<u8>> {
            let p = dir.join(&file);
            let (ph, pw, px) = read_pgm(&p)?;
            if (ph, pw) != (h, w) {
                return Err(Error::format(&p, format!("is {ph}x{pw}, manifest says {h}x{w}")));
            }
            Ok(px)
        };
        let pixels = check(frame_file(t))?;
        frames.push(Image::new(h, w, pixels.into_iter().map(f64::from).collect())?);
        let lp = dir.join(label_file(t));
        let raw = check(label_file(t))?;
        if raw.iter().any(|&v| v > BLOOD_POOL) {
            return Err(Error::format(&lp, "label values must be 0, 1 or 2"));
        }
        labels.push(LabelMask::new(h, w, raw)?);
    }
    Ok(CineSequence {
        frames,
        labels,
        pixel_spacing: manifest.pixel_spacing,
        config: manifest.config,
    })
}
