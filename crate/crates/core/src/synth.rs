//! Synthetic paired visible/infrared scenes and the FORA1 container.
//!
//! A scene is a sum of information components on a noise floor. Homogeneous
//! components share one pixel field across both modalities (only the
//! per-modality intensity differs) and their layout defines the class.
//! Modality-unique components are drawn independently per modality, either as
//! blobs or as checkerboard-modulated high-frequency textures.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORA_MAGIC: &[u8; 5] = b"FORA1";
const HEADER_LEN: u64 = 5 + 5 * 4;
pub const MAX_CLASSES: usize = 6;

/// Axis-aligned region in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Pixel rows and columns touched on an `h × w` grid; rejects zero-area regions.
    pub fn pixels(&self, h: usize, w: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let (x0, x1) = (self.x0.clamp(0.0, 1.0), self.x1.clamp(0.0, 1.0));
        let (y0, y1) = (self.y0.clamp(0.0, 1.0), self.y1.clamp(0.0, 1.0));
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::InvalidArgument(format!("region {self:?} has zero area")));
        }
        let span = |a: f64, b: f64, n: usize| {
            let lo = ((a * n as f64).floor() as usize).min(n - 1);
            lo..((b * n as f64).ceil() as usize).clamp(lo + 1, n)
        };
        Ok((span(y0, y1, h), span(x0, x1, w)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Gaussian pixel values over the region.
    Blob,
    /// Gaussian amplitudes modulated by a ±1 checkerboard of the given period in pixels.
    HighFreqTexture { period: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoComponent {
    pub intensity: f64,
    pub mean: f64,
    pub std: f64,
    pub pattern: Pattern,
    pub region: Region,
    pub shared: bool,
}

impl InfoComponent {
    fn check(&self) -> Result<()> {
        if !(self.std > 0.0) || !(self.intensity >= 0.0) || !self.mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "component needs std > 0 and intensity >= 0, got {self:?}"
            )));
        }
        if let Pattern::HighFreqTexture { period: 0 } = self.pattern {
            return Err(Error::InvalidArgument("texture period must be positive".into()));
        }
        Ok(())
    }

    /// Draws the component's pixel values (before intensity and pattern) in row-major region order.
    pub fn sample_values<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(self.mean, self.std).expect("validated std");
        (0..n).map(|_| normal.sample(rng)).collect()
    }

    /// Adds `scale · pattern(values)` over the region of a single-channel `h × w` field.
    fn splat(&self, field: &mut [f64], h: usize, w: usize, values: &[f64], scale: f64) -> Result<()> {
        let (rows, cols) = self.region.pixels(h, w)?;
        let mut n = 0;
        for y in rows.clone() {
            for x in cols.clone() {
                let sign = match self.pattern {
                    Pattern::Blob => 1.0,
                    Pattern::HighFreqTexture { period } => {
                        if ((y - rows.start) / period + (x - cols.start) / period) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
                field[y * w + x] += scale * sign * values[n];
                n += 1;
            }
        }
        Ok(())
    }

    fn pixel_count(&self, h: usize, w: usize) -> Result<usize> {
        let (r, c) = self.region.pixels(h, w)?;
        Ok(r.len() * c.len())
    }
}

/// One paired scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub label: usize,
    pub homogeneous: Vec<InfoComponent>,
    /// Homogeneous intensity per modality.
    pub modality_intensity: [f64; 2],
    /// Unique components, one list per modality.
    pub unique: [Vec<InfoComponent>; 2],
    pub noise_std: f64,
    /// Per-modality, per-channel gains.
    pub channel_gains: [Vec<f64>; 2],
}

impl SceneSpec {
    /// Shifts unique means so that their average equals the homogeneous mean.
    /// Returns the remaining residual.
    pub fn enforce_center(&mut self) -> f64 {
        let Some(target) = self.homogeneous_mean() else {
            return 0.0;
        };
        let n: usize = self.unique.iter().map(|u| u.len()).sum();
        if n == 0 {
            return 0.0;
        }
        let mean = self.unique_means().iter().sum::<f64>() / n as f64;
        for c in self.unique.iter_mut().flatten() {
            c.mean += target - mean;
        }
        self.center_residual()
    }

    fn homogeneous_mean(&self) -> Option<f64> {
        (!self.homogeneous.is_empty())
            .then(|| self.homogeneous.iter().map(|c| c.mean).sum::<f64>() / self.homogeneous.len() as f64)
    }

    fn unique_means(&self) -> Vec<f64> {
        self.unique.iter().flatten().map(|c| c.mean).collect()
    }

    /// `|mean(unique means) − homogeneous mean|`, zero when either side is empty.
    pub fn center_residual(&self) -> f64 {
        let Some(target) = self.homogeneous_mean() else {
            return 0.0;
        };
        let means = self.unique_means();
        if means.is_empty() {
            return 0.0;
        }
        // summed in a fixed order so the residual is reproducible
        (means.iter().sum::<f64>() / means.len() as f64 - target).abs()
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.homogeneous.iter().chain(self.unique.iter().flatten()) {
            c.check()?;
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise std must be >= 0".into()));
        }
        if self.channel_gains[0].len() != self.channel_gains[1].len() || self.channel_gains[0].is_empty() {
            return Err(Error::InvalidArgument("channel gains must be non-empty and equal length".into()));
        }
        Ok(())
    }
}

/// A rendered pair, `[C, H, W]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPair {
    pub visible: Tensor,
    pub infrared: Tensor,
    pub label: usize,
}

/// Renders both modalities of `spec` on an `h × w` grid.
pub fn render_pair<R: Rng + ?Sized>(spec: &SceneSpec, h: usize, w: usize, rng: &mut R) -> Result<RenderedPair> {
    spec.validate()?;
    let mut base = [vec![0.0; h * w], vec![0.0; h * w]];
    for comp in &spec.homogeneous {
        let values = comp.sample_values(comp.pixel_count(h, w)?, rng);
        for (m, field) in base.iter_mut().enumerate() {
            comp.splat(field, h, w, &values, comp.intensity * spec.modality_intensity[m])?;
        }
    }
    for (m, field) in base.iter_mut().enumerate() {
        for comp in &spec.unique[m] {
            let values = comp.sample_values(comp.pixel_count(h, w)?, rng);
            comp.splat(field, h, w, &values, comp.intensity)?;
        }
    }
    let channels = spec.channel_gains[0].len();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut out = Vec::with_capacity(2);
    for m in 0..2 {
        let mut data = Vec::with_capacity(channels * h * w);
        for &g in &spec.channel_gains[m] {
            for &v in &base[m] {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(g * v + n);
            }
        }
        out.push(Tensor::new(vec![channels, h, w], data)?);
    }
    let infrared = out.pop().expect("two modalities");
    let visible = out.pop().expect("two modalities");
    Ok(RenderedPair {
        visible,
        infrared,
        label: spec.label,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousSpec {
    pub mean: f64,
    pub std: f64,
    /// Modality intensities are drawn from `U[1 − jitter, 1 + jitter]`.
    pub intensity_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityProfile {
    pub unique_per_modality: usize,
    pub unique_intensity: f64,
    /// Share of unique components rendered as high-frequency texture rather than blobs.
    pub texture_fraction: f64,
    pub texture_period: usize,
    pub unique_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub homogeneous: HomogeneousSpec,
    pub heterogeneity: HeterogeneityProfile,
}

impl DatasetConfig {
    /// Mixed blobs and textures at moderate unique intensity.
    pub fn default_benchmark() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 4,
            classes: 4,
            train_samples: 256,
            val_samples: 128,
            seed: 0,
            noise_std: 0.1,
            homogeneous: HomogeneousSpec {
                mean: 1.0,
                std: 0.3,
                intensity_jitter: 0.2,
            },
            heterogeneity: HeterogeneityProfile {
                unique_per_modality: 2,
                unique_intensity: 1.0,
                texture_fraction: 0.5,
                texture_period: 1,
                unique_std: 0.3,
            },
        }
    }

    /// All unique content as strong pixel-scale texture.
    pub fn high_frequency() -> Self {
        let mut c = Self::default_benchmark();
        c.heterogeneity.texture_fraction = 1.0;
        c.heterogeneity.unique_intensity = 3.0;
        c.heterogeneity.unique_per_modality = 6;
        c
    }

    /// No unique components and no background noise: nothing differs between modalities
    /// beyond per-modality gain.
    pub fn homogeneous_only() -> Self {
        let mut c = Self::default_benchmark();
        c.noise_std = 0.0;
        c.heterogeneity.unique_per_modality = 0;
        c.heterogeneity.unique_intensity = 0.0;
        c
    }

    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.height < 4 || self.width < 4 {
            errs.push("dataset image must be at least 4x4".into());
        }
        if self.channels == 0 {
            errs.push("dataset channels must be positive".into());
        }
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            errs.push(format!("dataset classes must be in 2..={MAX_CLASSES}"));
        }
        if !(self.homogeneous.std > 0.0) || !(self.heterogeneity.unique_std > 0.0) {
            errs.push("component std must be positive".into());
        }
        if !(0.0..1.0).contains(&self.homogeneous.intensity_jitter) {
            errs.push("intensity_jitter must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.heterogeneity.texture_fraction) {
            errs.push("texture_fraction must be in [0, 1]".into());
        }
        if !(self.heterogeneity.unique_intensity >= 0.0) || !(self.noise_std >= 0.0) {
            errs.push("intensities and noise must be nonnegative".into());
        }
        if self.heterogeneity.texture_period == 0 {
            errs.push("texture_period must be positive".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn channel_gains(&self) -> [Vec<f64>; 2] {
        let c = self.channels;
        [
            (0..c).map(|i| 1.0 - 0.5 * i as f64 / c as f64).collect(),
            (0..c).map(|i| 0.6 + 0.6 * i as f64 / c as f64).collect(),
        ]
    }

    /// Independent generator for one sample of one split.
    pub fn sample_rng(&self, split: Split, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((split as u64) << 40) | index as u64);
        rng
    }

    /// Draws the scene for sample `index` of `split`. Labels cycle through the classes.
    pub fn scene<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> SceneSpec {
        let label = index % self.classes;
        let hom = &self.homogeneous;
        let het = &self.heterogeneity;
        let j = hom.intensity_jitter;
        let mut intensity = || if j > 0.0 { rng.random_range(1.0 - j..1.0 + j) } else { 1.0 };
        let modality_intensity = [intensity(), intensity()];
        let homogeneous = class_layout(label, rng)
            .into_iter()
            .map(|region| InfoComponent {
                intensity: 1.0,
                mean: hom.mean,
                std: hom.std,
                pattern: Pattern::Blob,
                region,
                shared: true,
            })
            .collect();
        let mut unique: [Vec<InfoComponent>; 2] = [Vec::new(), Vec::new()];
        for list in unique.iter_mut() {
            for _ in 0..het.unique_per_modality {
                let pattern = if rng.random::<f64>() < het.texture_fraction {
                    Pattern::HighFreqTexture {
                        period: het.texture_period,
                    }
                } else {
                    Pattern::Blob
                };
                let (sw, sh) = (rng.random_range(0.2..0.5), rng.random_range(0.2..0.5));
                let (x0, y0) = (rng.random_range(0.0..1.0 - sw), rng.random_range(0.0..1.0 - sh));
                list.push(InfoComponent {
                    intensity: het.unique_intensity,
                    mean: rng.random_range(0.5..1.5) * hom.mean,
                    std: het.unique_std,
                    pattern,
                    region: Region::new(x0, y0, x0 + sw, y0 + sh),
                    shared: false,
                });
            }
        }
        let mut spec = SceneSpec {
            label,
            homogeneous,
            modality_intensity,
            unique,
            noise_std: self.noise_std,
            channel_gains: self.channel_gains(),
        };
        spec.enforce_center();
        spec
    }

    /// Renders one sample, rounded to the stored `f32` precision.
    pub fn render_sample(&self, split: Split, index: usize) -> Result<Sample> {
        let mut rng = self.sample_rng(split, index);
        let spec = self.scene(index, &mut rng);
        let pair = render_pair(&spec, self.height, self.width, &mut rng)?;
        Ok(Sample {
            visible: pair.visible.data().iter().map(|&v| v as f32).collect(),
            infrared: pair.infrared.data().iter().map(|&v| v as f32).collect(),
            label: pair.label,
        })
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let n = match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
        };
        let samples = (0..n).map(|i| self.render_sample(split, i)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
            samples,
        })
    }
}

/// Regions of the class-defining homogeneous layout, at a random position and scale.
pub fn class_layout<R: Rng + ?Sized>(label: usize, rng: &mut R) -> Vec<Region> {
    let s: f64 = rng.random_range(0.3..0.45);
    let (w, h) = match label {
        1 => (1.6 * s, 0.45 * s),
        2 => (0.45 * s, 1.6 * s),
        _ => (s, s),
    };
    let x0 = rng.random_range(0.0..1.0 - w);
    let y0 = rng.random_range(0.0..1.0 - h);
    let r = |a: f64, b: f64, c: f64, d: f64| Region::new(x0 + a * w, y0 + b * h, x0 + c * w, y0 + d * h);
    match label {
        0..=2 => vec![r(0.0, 0.0, 1.0, 1.0)],
        3 => vec![r(0.0, 0.0, 0.5, 0.5), r(0.5, 0.5, 1.0, 1.0)],
        // hollow frame
        4 => vec![
            r(0.0, 0.0, 1.0, 0.25),
            r(0.0, 0.75, 1.0, 1.0),
            r(0.0, 0.25, 0.25, 0.75),
            r(0.75, 0.25, 1.0, 0.75),
        ],
        _ => vec![r(0.0, 0.375, 1.0, 0.625), r(0.375, 0.0, 0.625, 0.375), r(0.375, 0.625, 0.625, 1.0)],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Val = 1,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.fora",
            Split::Val => "val.fora",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` row-major.
    pub visible: Vec<f32>,
    pub infrared: Vec<f32>,
    pub label: usize,
}

/// An in-memory split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn raster_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `[N, C, H, W]` inputs for both modalities at the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = self.raster_len();
        let shape = vec![indices.len(), self.channels, self.height, self.width];
        let mut inputs = [Vec::with_capacity(indices.len() * n), Vec::with_capacity(indices.len() * n)];
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            inputs[0].extend(s.visible.iter().map(|&v| v as f64));
            inputs[1].extend(s.infrared.iter().map(|&v| v as f64));
            labels.push(s.label);
        }
        let [v, t] = inputs;
        Batch {
            inputs: vec![
                Tensor::new(shape.clone(), v).expect("dataset rasters"),
                Tensor::new(shape, t).expect("dataset rasters"),
            ],
            labels,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(FORA_MAGIC)?;
        for v in [self.height, self.width, self.channels, self.samples.len(), self.classes] {
            put(&(v as u32).to_le_bytes())?;
        }
        for s in &self.samples {
            for v in s.visible.iter().chain(&s.infrared) {
                put(&v.to_le_bytes())?;
            }
            put(&(s.label as u32).to_le_bytes())?;
        }
        drop(put);
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            inner: BufReader::new(file),
            path,
            offset: 0,
        };
        let magic = r.bytes::<5>()?;
        if &magic != FORA_MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}, expected FORA1")));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let count = r.u32()? as usize;
        let classes = r.u32()? as usize;
        if height == 0 || width == 0 || channels == 0 || classes == 0 {
            return Err(r.error(5, "zero extent in header".into()));
        }
        let n = channels * height * width;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let start = r.offset;
            let raster = |r: &mut Reader| -> Result<Vec<f32>> {
                (0..n).map(|_| r.bytes::<4>().map(f32::from_le_bytes)).collect()
            };
            let visible = raster(&mut r)?;
            let infrared = raster(&mut r)?;
            let label_at = r.offset;
            let label = r.u32()? as usize;
            if label >= classes {
                return Err(r.error(label_at, format!("sample {i} label {label} >= class count {classes}")));
            }
            if visible.iter().chain(&infrared).any(|v| !v.is_finite()) {
                return Err(r.error(start, format!("sample {i} holds non-finite values")));
            }
            samples.push(Sample {
                visible,
                infrared,
                label,
            });
        }
        let mut probe = [0u8; 1];
        if r.inner.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(r.error(r.offset, "trailing bytes after last record".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            classes,
            samples,
        })
    }
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
    offset: u64,
}

impl Reader<'_> {
    fn error(&self, offset: u64, detail: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            detail,
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.error(self.offset, format!("truncated: needed {N} more bytes"))
            } else {
                Error::io(self.path, e)
            }
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        self.bytes::<4>().map(u32::from_le_bytes)
    }
}

/// Byte size of a FORA1 file with the given geometry.
pub fn fora_file_len(h: usize, w: usize, c: usize, count: usize) -> u64 {
    HEADER_LEN + count as u64 * (2 * 4 * (c * h * w) as u64 + 4)
}

pub const DATASET_MANIFEST: &str = "dataset.json";

/// Writes `train.fora`, `val.fora` and `dataset.json` under `dir`.
///
/// Refuses to touch an existing file unless `overwrite` is set.
pub fn make_dataset(config: &DatasetConfig, dir: &Path, overwrite: bool) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let files: Vec<PathBuf> = [Split::Train.file_name(), Split::Val.file_name(), DATASET_MANIFEST]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    if !overwrite {
        if let Some(p) = files.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in [Split::Train, Split::Val] {
        config.generate(split)?.write(&dir.join(split.file_name()))?;
    }
    let manifest = serde_json::to_string_pretty(config)?;
    fs::write(&files[2], manifest + "\n").map_err(|e| Error::io(&files[2], e))?;
    Ok(files)
}

/// Loads one split from a directory written by [`make_dataset`].
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    Dataset::read(&dir.join(split.file_name()))
}
