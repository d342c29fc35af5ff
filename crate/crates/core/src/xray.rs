//! Dual-energy line-scan X-ray imaging of the conveyor.
//!
//! Each detector line records photon counts in two effective energy bands.
//! Counts follow Beer-Lambert attenuation through every slab stacked above a
//! pixel. Lines are flat-field corrected, collected in a rolling buffer and
//! emitted as 8-bit frames with half-frame overlap: the total-energy channel
//! (low + high band) and the high-energy channel.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Scene, SceneError, BELT_WIDTH_MM};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("white reference has a non-positive pixel at {0}")]
    ZeroWhiteReference(usize),
    #[error("image {width}x{height} is not divisible by bin factor {factor}")]
    NonDivisibleShape {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("invalid scanner configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("image io: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `I0·e^(-Σ μx)`.
pub fn attenuate<T: Float>(i0: T, mu_x_sum: T) -> T {
    i0 * (-mu_x_sum).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseMode {
    /// Counts are the rounded expected value.
    Deterministic,
    /// Counts are Poisson draws; each line has its own seeded stream.
    Poisson { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScannerConfig {
    pub line_rate_hz: f64,
    pub pixel_pitch_mm: f64,
    pub width_px: usize,
    pub i0_low: f64,
    pub i0_high: f64,
    pub noise: NoiseMode,
    pub frame_height_lines: usize,
    /// Square binning applied to emitted frames; `1` disables it.
    pub bin_factor: usize,
}

impl Default for ScannerConfig {
    fn default() -> Self {
        Self {
            line_rate_hz: 3500.0,
            pixel_pitch_mm: 0.1,
            width_px: 8000,
            i0_low: 40000.0,
            i0_high: 40000.0,
            noise: NoiseMode::Deterministic,
            frame_height_lines: 3500,
            bin_factor: 1,
        }
    }
}

impl ScannerConfig {
    pub fn validate(&self) -> Result<(), ImagingError> {
        let bad = |m: String| Err(ImagingError::InvalidConfig(m));
        if !(self.line_rate_hz > 0.0) || !self.line_rate_hz.is_finite() {
            return bad("line rate must be positive".into());
        }
        if !(self.pixel_pitch_mm > 0.0) || !self.pixel_pitch_mm.is_finite() {
            return bad("pixel pitch must be positive".into());
        }
        let span = self.width_px as f64 * self.pixel_pitch_mm;
        if (span - BELT_WIDTH_MM).abs() > 1e-6 {
            return bad(format!("detector spans {span} mm, belt is {BELT_WIDTH_MM} mm"));
        }
        for (name, i0) in [("i0_low", self.i0_low), ("i0_high", self.i0_high)] {
            if !(i0 > 0.0) || i0 > u16::MAX as f64 {
                return bad(format!("{name} must be in (0, 65535]"));
            }
        }
        if self.frame_height_lines < 2 || self.frame_height_lines % 2 != 0 {
            return bad("frame height must be a positive even number of lines".into());
        }
        let f = self.bin_factor;
        if f == 0 || self.frame_height_lines % f != 0 || self.width_px % f != 0 {
            return bad(format!("bin factor {f} must divide the frame shape"));
        }
        Ok(())
    }

    /// Pixel pitch of emitted frames after binning.
    pub fn frame_mm_per_px(&self) -> f64 {
        self.pixel_pitch_mm * self.bin_factor as f64
    }
}

/// One detector readout: 16-bit counts per pixel in both bands.
#[derive(Debug, Clone, PartialEq)]
pub struct LineScan {
    pub index: u64,
    pub timestamp: f64,
    pub low: Vec<u16>,
    pub high: Vec<u16>,
}

impl LineScan {
    pub fn uniform(index: u64, timestamp: f64, width: usize, low: u16, high: u16) -> Self {
        Self {
            index,
            timestamp,
            low: vec![low; width],
            high: vec![high; width],
        }
    }

    pub fn width(&self) -> usize {
        self.low.len()
    }
}

#[derive(Debug, Clone)]
struct Absorber {
    x_start: f64,
    x_end: f64,
    px_start: usize,
    px_end: usize,
    mux_low: f64,
    mux_high: f64,
}

/// Pre-resolved scene geometry for fast line synthesis.
#[derive(Debug, Clone)]
pub struct Scanner {
    cfg: ScannerConfig,
    speed: f64,
    absorbers: Vec<Absorber>,
    max_length: f64,
}

fn pixel_range(y_start: f64, y_end: f64, pitch: f64, width: usize) -> (usize, usize) {
    // pixels whose centre lies in [y_start, y_end)
    let lo = (y_start / pitch - 0.5).ceil().max(0.0) as usize;
    let hi = (y_end / pitch - 0.5).ceil().max(0.0) as usize;
    (lo.min(width), hi.min(width))
}

impl Scanner {
    pub fn new(scene: &Scene, cfg: &ScannerConfig) -> Result<Self, ImagingError> {
        cfg.validate()?;
        scene.validate()?;
        let table = scene.material_table();
        let mut absorbers = Vec::new();
        let mut push = |rect: &crate::scene::Rect, thickness: f64, material: &str| {
            let m = &table[material];
            let (px_start, px_end) =
                pixel_range(rect.y_start, rect.y_end, cfg.pixel_pitch_mm, cfg.width_px);
            absorbers.push(Absorber {
                x_start: rect.x_start,
                x_end: rect.x_end,
                px_start,
                px_end,
                mux_low: m.mu_low * thickness,
                mux_high: m.mu_high * thickness,
            });
        };
        for d in &scene.devices {
            push(&d.rect, d.thickness_mm, &d.material);
            for b in &d.batteries {
                push(&b.rect, b.thickness_mm, &b.material);
            }
        }
        absorbers.sort_by(|a, b| a.x_start.total_cmp(&b.x_start));
        let max_length = absorbers
            .iter()
            .map(|a| a.x_end - a.x_start)
            .fold(0.0, f64::max);
        Ok(Self {
            cfg: cfg.clone(),
            speed: scene.conveyor_speed_mm_s,
            absorbers,
            max_length,
        })
    }

    pub fn config(&self) -> &ScannerConfig {
        &self.cfg
    }

    pub fn line_time(&self, index: u64) -> f64 {
        index as f64 / self.cfg.line_rate_hz
    }

    /// Travel coordinate sampled by the line acquired at `t`: the centre of
    /// the belt strip that crosses the detector during the line period.
    pub fn sampled_travel(&self, t: f64) -> f64 {
        self.speed * (t + 0.5 / self.cfg.line_rate_hz)
    }

    /// Σμx per pixel for both bands, or `None` when nothing is under the line.
    fn mu_x(&self, t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let u = self.sampled_travel(t);
        let end = self.absorbers.partition_point(|a| a.x_start <= u);
        let mut sums: Option<(Vec<f64>, Vec<f64>)> = None;
        for a in self.absorbers[..end].iter().rev() {
            if a.x_start < u - self.max_length {
                break;
            }
            if u >= a.x_end || a.px_start >= a.px_end {
                continue;
            }
            let (lo, hi) = sums.get_or_insert_with(|| {
                (vec![0.0; self.cfg.width_px], vec![0.0; self.cfg.width_px])
            });
            for p in a.px_start..a.px_end {
                lo[p] += a.mux_low;
                hi[p] += a.mux_high;
            }
        }
        sums
    }

    /// Expected (noise-free, unrounded) counts for the line acquired at `t`.
    pub fn expected_line(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let w = self.cfg.width_px;
        match self.mu_x(t) {
            None => (vec![self.cfg.i0_low; w], vec![self.cfg.i0_high; w]),
            Some((lo, hi)) => (
                lo.iter().map(|m| attenuate(self.cfg.i0_low, *m)).collect(),
                hi.iter().map(|m| attenuate(self.cfg.i0_high, *m)).collect(),
            ),
        }
    }

    pub fn scan_line(&self, t: f64) -> LineScan {
        let index = (t * self.cfg.line_rate_hz).round().max(0.0) as u64;
        let w = self.cfg.width_px;
        let sums = self.mu_x(t);
        match self.cfg.noise {
            NoiseMode::Deterministic => {
                let lo0 = to_count(self.cfg.i0_low);
                let hi0 = to_count(self.cfg.i0_high);
                match sums {
                    None => LineScan::uniform(index, t, w, lo0, hi0),
                    Some((lo, hi)) => LineScan {
                        index,
                        timestamp: t,
                        low: counts(&lo, self.cfg.i0_low, lo0),
                        high: counts(&hi, self.cfg.i0_high, hi0),
                    },
                }
            }
            NoiseMode::Poisson { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index);
                let zeros = vec![0.0; w];
                let (lo, hi) = sums.unwrap_or_else(|| (zeros.clone(), zeros));
                let low = poisson_counts(&lo, self.cfg.i0_low, &mut rng);
                let high = poisson_counts(&hi, self.cfg.i0_high, &mut rng);
                LineScan {
                    index,
                    timestamp: t,
                    low,
                    high,
                }
            }
        }
    }

    /// Line with index `k`, acquired at `k / line_rate`.
    pub fn scan_index(&self, index: u64) -> LineScan {
        let mut line = self.scan_line(self.line_time(index));
        line.index = index;
        line
    }

    /// Empty-belt reference: the expected counts with no absorber.
    pub fn white_reference(&self) -> LineScan {
        LineScan::uniform(
            0,
            0.0,
            self.cfg.width_px,
            to_count(self.cfg.i0_low),
            to_count(self.cfg.i0_high),
        )
    }
}

fn to_count(v: f64) -> u16 {
    v.round().clamp(0.0, u16::MAX as f64) as u16
}

fn counts(mu_x: &[f64], i0: f64, unattenuated: u16) -> Vec<u16> {
    mu_x.iter()
        .map(|&m| if m == 0.0 { unattenuated } else { to_count(attenuate(i0, m)) })
        .collect()
}

fn poisson_counts(mu_x: &[f64], i0: f64, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let open = Poisson::new(i0).expect("positive source intensity");
    mu_x.iter()
        .map(|&m| {
            let lambda = attenuate(i0, m);
            let draw = if m == 0.0 {
                open.sample(rng)
            } else if lambda > 0.0 {
                Poisson::new(lambda).map_or(0.0, |p| p.sample(rng))
            } else {
                0.0
            };
            draw.min(u16::MAX as f64) as u16
        })
        .collect()
}

/// Synthesizes the line acquired at `t`.
pub fn scan_line(scene: &Scene, t: f64, cfg: &ScannerConfig) -> Result<LineScan, ImagingError> {
    Ok(Scanner::new(scene, cfg)?.scan_line(t))
}

/// Per-pixel gains `mean(white) / white[p]` for both bands.
#[derive(Debug, Clone)]
pub struct FlatField {
    gain_low: Vec<f64>,
    gain_high: Vec<f64>,
    mean_low: f64,
    mean_high: f64,
}

impl FlatField {
    pub fn new(white: &LineScan) -> Result<Self, ImagingError> {
        let gains = |band: &[u16]| -> Result<(Vec<f64>, f64), ImagingError> {
            if let Some(p) = band.iter().position(|&v| v == 0) {
                return Err(ImagingError::ZeroWhiteReference(p));
            }
            let mean = band.iter().map(|&v| v as f64).sum::<f64>() / band.len() as f64;
            Ok((band.iter().map(|&v| mean / v as f64).collect(), mean))
        };
        let (gain_low, mean_low) = gains(&white.low)?;
        let (gain_high, mean_high) = gains(&white.high)?;
        Ok(Self {
            gain_low,
            gain_high,
            mean_low,
            mean_high,
        })
    }

    /// Mean white counts `(low, high)`, the level a bare pixel maps to.
    pub fn white_levels(&self) -> (f64, f64) {
        (self.mean_low, self.mean_high)
    }

    pub fn apply(&self, raw: &LineScan) -> LineScan {
        let apply = |band: &[u16], gains: &[f64]| -> Vec<u16> {
            band.iter()
                .zip(gains)
                .map(|(&v, &g)| if g == 1.0 { v } else { to_count(v as f64 * g) })
                .collect()
        };
        LineScan {
            index: raw.index,
            timestamp: raw.timestamp,
            low: apply(&raw.low, &self.gain_low),
            high: apply(&raw.high, &self.gain_high),
        }
    }
}

/// Gain-corrects `raw` against an empty-belt reference, clamping to 16 bits.
pub fn flat_field(raw: &LineScan, white_ref: &LineScan) -> Result<LineScan, ImagingError> {
    Ok(FlatField::new(white_ref)?.apply(raw))
}

/// Row-major image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: T) {
        self.data[row * self.width + col] = v;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.width..(row + 1) * self.width]
    }
}

/// Mean of each `factor × factor` block, rounded half up.
pub fn bin_pixels<T>(img: &Image<T>, factor: usize) -> Result<Image<T>, ImagingError>
where
    T: Copy + Into<u64> + TryFrom<u64>,
{
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(ImagingError::NonDivisibleShape {
            width: img.width,
            height: img.height,
            factor,
        });
    }
    let (w, h) = (img.width / factor, img.height / factor);
    let n = (factor * factor) as u64;
    let mut acc = vec![0u64; w * h];
    for r in 0..img.height {
        let out_row = (r / factor) * w;
        for (c, v) in img.row(r).iter().enumerate() {
            acc[out_row + c / factor] += (*v).into();
        }
    }
    let data = acc
        .into_iter()
        .map(|s| T::try_from((s + n / 2) / n).ok().expect("mean fits input type"))
        .collect();
    Ok(Image {
        width: w,
        height: h,
        data,
    })
}

fn eight_bit(v: f64, white_level: f64) -> u8 {
    (255.0 * (v / white_level).min(1.0)).round() as u8
}

/// `round(255 · min(v / white_level, 1))` per pixel.
pub fn to_8bit<T: Copy + Into<u64>>(img: &Image<T>, white_level: f64) -> Image<u8> {
    Image {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&v| eight_bit(v.into() as f64, white_level))
            .collect(),
    }
}

/// Lookup table form of [`to_8bit`] for integer counts.
#[derive(Debug, Clone)]
struct EightBitLut {
    table: Vec<u8>,
}

impl EightBitLut {
    fn new(white_level: f64) -> Self {
        let n = white_level.ceil() as usize + 1;
        Self {
            table: (0..n).map(|v| eight_bit(v as f64, white_level)).collect(),
        }
    }

    #[inline]
    fn map(&self, v: u32) -> u8 {
        *self.table.get(v as usize).unwrap_or(&255)
    }
}

/// Position of an emitted frame in the line stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameWindow {
    pub frame_index: u64,
    pub first_line: u64,
    pub height_lines: usize,
    /// Travel coordinate of the first line, `first_line · pixel_pitch`.
    pub origin_mm: f64,
    /// Pitch of one line along the belt.
    pub line_pitch_mm: f64,
}

impl FrameWindow {
    pub fn end_mm(&self) -> f64 {
        self.origin_mm + self.height_lines as f64 * self.line_pitch_mm
    }

    pub fn last_line(&self) -> u64 {
        self.first_line + self.height_lines as u64 - 1
    }
}

/// Emission schedule of the rolling buffer: the first frame when `H` lines
/// have arrived, then one every `H / 2` lines.
#[derive(Debug, Clone)]
pub struct FrameCadence {
    height: usize,
    line_pitch_mm: f64,
    pushed: u64,
    emitted: u64,
}

impl FrameCadence {
    pub fn new(height: usize, line_pitch_mm: f64) -> Self {
        Self {
            height,
            line_pitch_mm,
            pushed: 0,
            emitted: 0,
        }
    }

    pub fn lines_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn frames_emitted(&self) -> u64 {
        self.emitted
    }

    /// Registers one line; returns the frame completed by it, if any.
    pub fn on_line(&mut self) -> Option<FrameWindow> {
        self.pushed += 1;
        let h = self.height as u64;
        if self.pushed < h || (self.pushed - h) % (h / 2) != 0 {
            return None;
        }
        let first_line = self.pushed - h;
        let window = FrameWindow {
            frame_index: self.emitted,
            first_line,
            height_lines: self.height,
            origin_mm: first_line as f64 * self.line_pitch_mm,
            line_pitch_mm: self.line_pitch_mm,
        };
        self.emitted += 1;
        Some(window)
    }
}

/// Two 8-bit channels of one emitted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEnergyFrame {
    pub window: FrameWindow,
    /// Pixel pitch of `te`/`he` after binning.
    pub mm_per_px: f64,
    /// Total energy: low + high band counts.
    pub te: Image<u8>,
    /// High energy band only.
    pub he: Image<u8>,
}

impl DualEnergyFrame {
    pub fn frame_index(&self) -> u64 {
        self.window.frame_index
    }

    pub fn origin_mm(&self) -> f64 {
        self.window.origin_mm
    }
}

/// Rolling line buffer producing overlapping frames.
#[derive(Debug, Clone)]
pub struct LineBuffer {
    cfg: ScannerConfig,
    flat: FlatField,
    lines: VecDeque<LineScan>,
    cadence: FrameCadence,
    te_lut: EightBitLut,
    he_lut: EightBitLut,
}

impl LineBuffer {
    pub fn new(cfg: &ScannerConfig, white_ref: &LineScan) -> Result<Self, ImagingError> {
        cfg.validate()?;
        if white_ref.width() != cfg.width_px {
            return Err(ImagingError::InvalidConfig(
                "white reference width differs from detector width".into(),
            ));
        }
        let flat = FlatField::new(white_ref)?;
        let (lo, hi) = flat.white_levels();
        Ok(Self {
            cfg: cfg.clone(),
            flat,
            lines: VecDeque::with_capacity(cfg.frame_height_lines),
            cadence: FrameCadence::new(cfg.frame_height_lines, cfg.pixel_pitch_mm),
            te_lut: EightBitLut::new(lo + hi),
            he_lut: EightBitLut::new(hi),
        })
    }

    pub fn white_levels(&self) -> (f64, f64) {
        let (lo, hi) = self.flat.white_levels();
        (lo + hi, hi)
    }

    pub fn lines_pushed(&self) -> u64 {
        self.cadence.lines_pushed()
    }

    /// Adds a line, dropping the oldest once full. Returns a frame when the
    /// cadence calls for one.
    ///
    /// # Panics
    /// If the line width differs from the configured detector width.
    pub fn push_line(&mut self, line: &LineScan) -> Option<DualEnergyFrame> {
        assert_eq!(line.width(), self.cfg.width_px, "line width mismatch");
        if self.lines.len() == self.cfg.frame_height_lines {
            self.lines.pop_front();
        }
        self.lines.push_back(self.flat.apply(line));
        let window = self.cadence.on_line()?;
        Some(self.assemble(window))
    }

    fn assemble(&self, window: FrameWindow) -> DualEnergyFrame {
        let (w, h) = (self.cfg.width_px, self.cfg.frame_height_lines);
        let mm_per_px = self.cfg.frame_mm_per_px();
        if self.cfg.bin_factor == 1 {
            let mut te = Vec::with_capacity(w * h);
            let mut he = Vec::with_capacity(w * h);
            for line in &self.lines {
                te.extend(
                    line.low
                        .iter()
                        .zip(&line.high)
                        .map(|(&l, &hh)| self.te_lut.map(l as u32 + hh as u32)),
                );
                he.extend(line.high.iter().map(|&v| self.he_lut.map(v as u32)));
            }
            return DualEnergyFrame {
                window,
                mm_per_px,
                te: Image { width: w, height: h, data: te },
                he: Image { width: w, height: h, data: he },
            };
        }
        let mut te = Image::<u32>::filled(w, h, 0);
        let mut he = Image::<u16>::filled(w, h, 0);
        for (r, line) in self.lines.iter().enumerate() {
            for c in 0..w {
                te.set(r, c, line.low[c] as u32 + line.high[c] as u32);
                he.set(r, c, line.high[c]);
            }
        }
        let f = self.cfg.bin_factor;
        let te = bin_pixels(&te, f).expect("validated bin factor");
        let he = bin_pixels(&he, f).expect("validated bin factor");
        let (te_white, he_white) = self.white_levels();
        DualEnergyFrame {
            window,
            mm_per_px,
            te: to_8bit(&te, te_white),
            he: to_8bit(&he, he_white),
        }
    }
}

/// `frame_{index:06}_{te|he}.pgm`
pub fn frame_file_name(index: u64, channel: &str) -> String {
    format!("frame_{index:06}_{channel}.pgm")
}

fn pnm_encode<W: Write>(
    out: W,
    img: &Image<u8>,
    data: &[u8],
    color: image::ExtendedColorType,
    subtype: image::codecs::pnm::PnmSubtype,
) -> Result<(), ImagingError> {
    use image::ImageEncoder;
    image::codecs::pnm::PnmEncoder::new(out)
        .with_subtype(subtype)
        .write_image(data, img.width as u32, img.height as u32, color)?;
    Ok(())
}

/// Binary 8-bit PGM.
pub fn write_pgm<W: Write>(out: W, img: &Image<u8>) -> Result<(), ImagingError> {
    use image::codecs::pnm::{PnmSubtype, SampleEncoding};
    pnm_encode(
        out,
        img,
        &img.data,
        image::ExtendedColorType::L8,
        PnmSubtype::Graymap(SampleEncoding::Binary),
    )
}

/// Binary PPM with channels `(TE, HE, 0)`.
pub fn write_ppm<W: Write>(out: W, frame: &DualEnergyFrame) -> Result<(), ImagingError> {
    use image::codecs::pnm::{PnmSubtype, SampleEncoding};
    let mut rgb = Vec::with_capacity(frame.te.data.len() * 3);
    for (t, h) in frame.te.data.iter().zip(&frame.he.data) {
        rgb.extend_from_slice(&[*t, *h, 0]);
    }
    pnm_encode(
        out,
        &frame.te,
        &rgb,
        image::ExtendedColorType::Rgb8,
        PnmSubtype::Pixmap(SampleEncoding::Binary),
    )
}

/// Writes `frame_{index}_te.pgm`, `frame_{index}_he.pgm` and `frame_{index}.ppm`.
pub fn export_frame(dir: &Path, frame: &DualEnergyFrame) -> Result<(), ImagingError> {
    std::fs::create_dir_all(dir)?;
    let idx = frame.frame_index();
    let open = |name: String| -> Result<std::io::BufWriter<std::fs::File>, ImagingError> {
        Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
    };
    write_pgm(open(frame_file_name(idx, "te"))?, &frame.te)?;
    write_pgm(open(frame_file_name(idx, "he"))?, &frame.he)?;
    write_ppm(open(format!("frame_{idx:06}.ppm"))?, frame)?;
    Ok(())
}

/// Reads an 8-bit grayscale PNM file.
pub fn read_pgm(path: &Path) -> Result<Image<u8>, ImagingError> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()?
        .into_luma8();
    Ok(Image {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BatteryClass, BatteryInstance, DeviceInstance, Material, Rect};
    use approx::assert_relative_eq;

    fn slab(id: u64, rect: Rect, thickness: f64, material: &str) -> DeviceInstance {
        DeviceInstance {
            id,
            rect,
            thickness_mm: thickness,
            material: material.into(),
            batteries: vec![],
        }
    }

    fn small_cfg() -> ScannerConfig {
        ScannerConfig {
            width_px: 800,
            pixel_pitch_mm: 1.0,
            line_rate_hz: 350.0,
            frame_height_lines: 8,
            ..Default::default()
        }
    }

    #[test]
    fn attenuation_examples() {
        assert_eq!(attenuate(1000.0, 0.0), 1000.0);
        assert_relative_eq!(attenuate(1000.0, std::f64::consts::LN_2), 500.0, max_relative = 1e-15);
        let summed = attenuate(1000.0, 0.05 * 10.0 + 0.02 * 5.0);
        let sequential = attenuate(attenuate(1000.0, 0.05 * 10.0), 0.02 * 5.0);
        assert_relative_eq!(summed, 1000.0 * (-0.6f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(summed, sequential, max_relative = 1e-14);
    }

    #[test]
    fn empty_belt_reads_source_intensity() {
        let cfg = ScannerConfig::default();
        let line = scan_line(&Scene::new(350.0, vec![]), 0.3, &cfg).unwrap();
        assert!(line.low.iter().all(|&v| v == 40000));
        assert!(line.high.iter().all(|&v| v == 40000));
    }

    #[test]
    fn object_length_in_lines() {
        let cfg = ScannerConfig::default();
        let scene = Scene::new(350.0, vec![slab(1, Rect::new(100.0, 150.0, 300.0, 400.0), 8.0, "plastic")]);
        let scanner = Scanner::new(&scene, &cfg).unwrap();
        let covered: Vec<u64> = (0..3000)
            .filter(|&k| scanner.scan_index(k).high[3500] < 40000)
            .collect();
        assert_eq!(covered.len(), 500);
        assert_eq!(covered[0], 1000);
        assert_eq!(*covered.last().unwrap(), 1499);
    }

    #[test]
    fn battery_region_is_darker() {
        let cfg = ScannerConfig::default();
        let mut dev = slab(1, Rect::new(0.0, 100.0, 100.0, 200.0), 8.0, "plastic");
        dev.batteries.push(BatteryInstance {
            id: 2,
            class: BatteryClass::Pouch,
            rect: Rect::new(20.0, 60.0, 120.0, 160.0),
            thickness_mm: 5.0,
            material: "lithium_cell".into(),
        });
        let scanner = Scanner::new(&Scene::new(350.0, vec![dev]), &cfg).unwrap();
        let line = scanner.scan_index(400);
        assert!(line.high[1400] < line.high[1900]);
        assert!(line.low[1400] < line.low[1900]);
        assert!(line.high[1900] < 40000);
    }

    #[test]
    fn poisson_mode_is_seeded() {
        let mut cfg = small_cfg();
        cfg.noise = NoiseMode::Poisson { seed: 7 };
        let scene = Scene::new(350.0, vec![slab(1, Rect::new(0.0, 50.0, 10.0, 90.0), 8.0, "pcb")]);
        let s = Scanner::new(&scene, &cfg).unwrap();
        assert_eq!(s.scan_index(3), s.scan_index(3));
        assert_ne!(s.scan_index(3).low, s.scan_index(4).low);
        let mean = s.scan_index(3).low[400..].iter().map(|&v| v as f64).sum::<f64>() / 400.0;
        assert!((mean - 40000.0).abs() < 50.0, "{mean}");
    }

    #[test]
    fn flat_field_examples() {
        let raw = LineScan::uniform(0, 0.0, 4, 1000, 2000);
        let out = flat_field(&raw, &LineScan::uniform(0, 0.0, 4, 500, 700)).unwrap();
        assert_eq!(out, raw);

        // mean of [2, 2, 2, 1] scaled so pixel 3 is at half the mean
        let mut white = LineScan::uniform(0, 0.0, 4, 40000, 40000);
        white.low = vec![45000, 45000, 45000, 22500];
        let mean = (45000.0 * 3.0 + 22500.0) / 4.0;
        let out = flat_field(&raw, &white).unwrap();
        assert_eq!(out.low[3], (1000.0 * mean / 22500.0f64).round() as u16);
        assert_eq!(out.low[3], 1750);

        let mut white = LineScan::uniform(0, 0.0, 2, 40000, 40000);
        white.low = vec![40000, 20000];
        let hot = LineScan::uniform(0, 0.0, 2, 50000, 1);
        // 50000 · 30000 / 20000 = 75000 → saturates
        assert_eq!(flat_field(&hot, &white).unwrap().low[1], 65535);

        let mut white = LineScan::uniform(0, 0.0, 2, 1, 1);
        white.high[1] = 0;
        assert!(matches!(flat_field(&raw, &white), Err(ImagingError::ZeroWhiteReference(1))));
    }

    #[test]
    fn binning_examples() {
        let img = Image::<u16>::filled(8, 8, 1234);
        let b = bin_pixels(&img, 4).unwrap();
        assert_eq!((b.width, b.height), (2, 2));
        assert!(b.data.iter().all(|&v| v == 1234));

        let mut img = Image::<u16>::filled(4, 4, 0);
        img.set(3, 3, 16);
        assert_eq!(bin_pixels(&img, 4).unwrap().data, vec![1]);

        let img = Image::<u16>::filled(6, 8, 0);
        assert!(matches!(bin_pixels(&img, 4), Err(ImagingError::NonDivisibleShape { .. })));
    }

    #[test]
    fn eight_bit_examples() {
        let img = Image { width: 4, height: 1, data: vec![1000u16, 0, 500, 4000] };
        assert_eq!(to_8bit(&img, 1000.0).data, vec![255, 0, 128, 255]);
        let lut = EightBitLut::new(1000.0);
        for v in [0u32, 1, 499, 500, 501, 999, 1000, 5000] {
            assert_eq!(lut.map(v), eight_bit(v as f64, 1000.0));
        }
    }

    #[test]
    fn cadence_schedule() {
        let mut c = FrameCadence::new(3500, 0.1);
        let mut at = vec![];
        for n in 1..=8000u64 {
            if let Some(w) = c.on_line() {
                at.push((n, w.first_line, w.frame_index));
            }
        }
        assert_eq!(at, vec![(3500, 0, 0), (5250, 1750, 1), (7000, 3500, 2)]);
    }

    #[test]
    fn buffer_emits_overlapping_frames() {
        let cfg = small_cfg();
        let scene = Scene::new(
            350.0,
            vec![slab(1, Rect::new(2.0, 9.0, 100.0, 300.0), 8.0, "steel")],
        );
        let scanner = Scanner::new(&scene, &cfg).unwrap();
        let mut buf = LineBuffer::new(&cfg, &scanner.white_reference()).unwrap();
        let mut frames = vec![];
        for k in 0..7 {
            assert!(buf.push_line(&scanner.scan_index(k)).is_none());
        }
        for k in 7..16 {
            if let Some(f) = buf.push_line(&scanner.scan_index(k)) {
                frames.push(f);
            }
        }
        assert_eq!(frames.len(), 3);
        for pair in frames.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert_eq!(b.origin_mm() - a.origin_mm(), 4.0);
            let half = 4 * cfg.width_px;
            assert_eq!(&a.te.data[half..], &b.te.data[..half]);
            assert_eq!(&a.he.data[half..], &b.he.data[..half]);
        }
        // bare belt is full scale, the slab is dark
        assert_eq!(frames[0].he.get(0, 50), 255);
        assert!(frames[0].he.get(3, 150) < 100);
    }

    #[test]
    fn te_is_sum_of_bands() {
        let cfg = small_cfg();
        let scene = Scene {
            conveyor_speed_mm_s: 350.0,
            devices: vec![slab(1, Rect::new(0.0, 20.0, 0.0, 800.0), 4.0, "custom")],
            materials: vec![Material::new("custom", 0.2, 0.05)],
        };
        let scanner = Scanner::new(&scene, &cfg).unwrap();
        let line = scanner.scan_index(2);
        let (lo, hi) = scanner.expected_line(scanner.line_time(2));
        assert_eq!(line.low[10], lo[10].round() as u16);
        assert_eq!(line.high[10], hi[10].round() as u16);
        let mut buf = LineBuffer::new(&cfg, &scanner.white_reference()).unwrap();
        let mut frame = None;
        for k in 0..8 {
            frame = buf.push_line(&scanner.scan_index(k));
        }
        let frame = frame.unwrap();
        let te = line.low[10] as f64 + line.high[10] as f64;
        assert_eq!(frame.te.get(2, 10), eight_bit(te, 80000.0));
        assert_eq!(frame.he.get(2, 10), eight_bit(line.high[10] as f64, 40000.0));
    }

    #[test]
    fn binned_frames() {
        let mut cfg = small_cfg();
        cfg.bin_factor = 4;
        let scanner = Scanner::new(&Scene::new(350.0, vec![]), &cfg).unwrap();
        let mut buf = LineBuffer::new(&cfg, &scanner.white_reference()).unwrap();
        let mut frame = None;
        for k in 0..8 {
            frame = buf.push_line(&scanner.scan_index(k));
        }
        let frame = frame.unwrap();
        assert_eq!((frame.te.width, frame.te.height), (200, 2));
        assert_eq!(frame.mm_per_px, 4.0);
        assert!(frame.te.data.iter().all(|&v| v == 255));
    }

    #[test]
    fn config_validation() {
        assert!(ScannerConfig::default().validate().is_ok());
        let mut c = ScannerConfig::default();
        c.width_px = 7000;
        assert!(c.validate().is_err());
        let mut c = ScannerConfig::default();
        c.bin_factor = 3; // 8000 % 3 != 0
        assert!(c.validate().is_err());
        let mut c = ScannerConfig::default();
        c.i0_low = 70000.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image { width: 3, height: 2, data: vec![0u8, 10, 20, 30, 40, 255] };
        let path = dir.path().join(frame_file_name(7, "he"));
        write_pgm(std::fs::File::create(&path).unwrap(), &img).unwrap();
        assert!(path.ends_with("frame_000007_he.pgm"));
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(read_pgm(&path).unwrap(), img);
    }
}
