//! Seeded synthetic image domains and their record file.
//!
//! Images are RGB, channel-major (`3 × R × R`) `u8` pixels. A
//! [`SyntheticDomainSpec`] fully determines a dataset: the generator picks
//! what distinguishes the classes, [`DomainShift`] turns one domain into a
//! related one.
//!
//! Record file layout, little-endian throughout:
//!
//! | field | type |
//! |---|---|
//! | magic `LTDS` | 4 bytes |
//! | version | u32 |
//! | count | u64 |
//! | resolution, num_classes | u32, u32 |
//! | per item: label, pixels | u32, `3·R·R` bytes |

use crate::error::{Error, Result};
use crate::rng::{derived, seeded, Rng};
use crate::tensor::DenseTensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const RECORD_MAGIC: &[u8; 4] = b"LTDS";
pub const RECORD_VERSION: u32 = 1;
const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    /// One geometric figure per class at a random place, size and colour.
    Shapes,
    /// Stripe patterns whose orientation encodes the class.
    Textures,
    /// A fixed 5×5 bitmap per class, randomly placed and scaled.
    Glyphs,
}

impl Generator {
    pub fn max_classes(self) -> usize {
        match self {
            Generator::Shapes => 10,
            Generator::Textures => 12,
            Generator::Glyphs => 32,
        }
    }
}

/// Transform taking a source domain to a target domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub invert: bool,
    /// Rotation in quarter turns, counter-clockwise.
    pub quarter_turns: u8,
    /// Standard deviation of additive Gaussian pixel noise, in pixel units.
    pub noise: f64,
    /// Seed of a label permutation; labels are kept when absent.
    pub relabel: Option<u64>,
}

impl DomainShift {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub generator: Generator,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub resolution: usize,
    pub shift: DomainShift,
    pub seed: u64,
}

impl SyntheticDomainSpec {
    pub fn new(generator: Generator, num_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        Self { generator, num_classes, samples_per_class, resolution: 32, shift: DomainShift::default(), seed }
    }
}

/// Labelled images held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    resolution: usize,
    num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(resolution: usize, num_classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per = CHANNELS * resolution * resolution;
        if resolution == 0 || pixels.len() != per * labels.len() {
            return Err(Error::InvalidShape(format!(
                "{} pixel bytes for {} images at resolution {resolution}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidConfig(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Self { resolution, num_classes, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    fn image_len(&self) -> usize {
        CHANNELS * self.resolution * self.resolution
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { resolution: self.resolution, num_classes: self.num_classes, pixels, labels }
    }

    /// The same fraction of every class, at least one image each, in original order.
    pub fn stratified_fraction(&self, fraction: f64, rng: &mut Rng) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("fraction {fraction} must lie in (0, 1]")));
        }
        let mut keep = Vec::new();
        for c in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            let k = (members.len() as f64 * fraction).round() as usize;
            if k == 0 {
                return Err(Error::InvalidConfig(format!(
                    "fraction {fraction} leaves no sample of class {c} ({} available)",
                    members.len()
                )));
            }
            members.shuffle(rng);
            keep.extend_from_slice(&members[..k]);
        }
        keep.sort_unstable();
        Ok(self.subset(&keep))
    }

    /// Images `indices` as an `(N, 3, R, R)` tensor scaled to `[-1, 1]`. With
    /// an rng, each image is randomly flipped horizontally and randomly
    /// cropped from a copy padded by the given number of zero pixels per side.
    pub fn batch(&self, indices: &[usize], augment: Option<(&mut Rng, usize)>) -> (DenseTensor, Vec<usize>) {
        let r = self.resolution;
        let per = self.image_len();
        let mut data = vec![0.0; indices.len() * per];
        let mut augment = augment;
        for (n, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            let (flip, dy, dx) = match augment.as_mut() {
                Some((rng, pad)) => {
                    let pad = *pad as i64;
                    (rng.random_bool(0.5), rng.random_range(-pad..=pad) as isize, rng.random_range(-pad..=pad) as isize)
                }
                None => (false, 0, 0),
            };
            let dst = &mut data[n * per..(n + 1) * per];
            for c in 0..CHANNELS {
                for y in 0..r {
                    let sy = y as isize + dy;
                    for x in 0..r {
                        let xx = if flip { r - 1 - x } else { x };
                        let sx = xx as isize + dx;
                        let v = if sy < 0 || sx < 0 || sy >= r as isize || sx >= r as isize {
                            0.0
                        } else {
                            to_unit(img[(c * r + sy as usize) * r + sx as usize])
                        };
                        dst[(c * r + y) * r + x] = v;
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (DenseTensor::new(vec![indices.len(), CHANNELS, r, r], data).expect("sizes agree"), labels)
    }

    pub fn write_records(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(24 + self.len() * (4 + self.image_len()));
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&(self.labels[i] as u32).to_le_bytes());
            out.extend_from_slice(self.image(i));
        }
        let mut file = tempfile::NamedTempFile::new_in(
            path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")),
        )?;
        file.write_all(&out)?;
        file.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn read_records(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = bytes.as_slice();
        fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
            if cur.len() < n {
                return Err(Error::Format("record file is truncated".into()));
            }
            let (head, rest) = cur.split_at(n);
            *cur = rest;
            Ok(head)
        }
        if take(&mut cur, 4)? != RECORD_MAGIC {
            return Err(Error::Format("not a dataset record file".into()));
        }
        let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes"));
        if version != RECORD_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: RECORD_VERSION });
        }
        let count = u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("8 bytes")) as usize;
        let resolution = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes")) as usize;
        let num_classes = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes")) as usize;
        let per = CHANNELS * resolution * resolution;
        let mut pixels = Vec::with_capacity(count.min(1 << 20) * per);
        let mut labels = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            labels.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes")) as usize);
            pixels.extend_from_slice(take(&mut cur, per)?);
        }
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Dataset::new(resolution, num_classes, pixels, labels)
    }
}

fn to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Deterministic, class-balanced images for `spec`, grouped by class.
pub fn generate_dataset(spec: &SyntheticDomainSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.num_classes > spec.generator.max_classes() {
        return Err(Error::InvalidConfig(format!(
            "{:?} supports 2..={} classes, got {}",
            spec.generator,
            spec.generator.max_classes(),
            spec.num_classes
        )));
    }
    if spec.samples_per_class == 0 || spec.resolution < 8 {
        return Err(Error::InvalidConfig("need at least one sample per class and resolution ≥ 8".into()));
    }
    if !(spec.shift.noise >= 0.0 && spec.shift.noise.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise level {} must be finite and non-negative", spec.shift.noise)));
    }
    let r = spec.resolution;
    let relabel: Vec<usize> = match spec.shift.relabel {
        Some(seed) => {
            let mut p: Vec<usize> = (0..spec.num_classes).collect();
            p.shuffle(&mut seeded(seed));
            p
        }
        None => (0..spec.num_classes).collect(),
    };
    let glyphs = glyph_bitmaps(spec.num_classes);
    let mut rng = derived(spec.seed, 0);
    let mut noise_rng = derived(spec.seed, 1);
    let mut pixels = Vec::with_capacity(spec.num_classes * spec.samples_per_class * CHANNELS * r * r);
    let mut labels = Vec::new();
    for class in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            let mut img = match spec.generator {
                Generator::Shapes => draw_shape(class, r, &mut rng),
                Generator::Textures => draw_texture(class, spec.num_classes, r, &mut rng),
                Generator::Glyphs => draw_glyph(&glyphs[class], r, &mut rng),
            };
            apply_shift(&mut img, r, &spec.shift, &mut noise_rng);
            pixels.extend_from_slice(&img);
            labels.push(relabel[class]);
        }
    }
    Dataset::new(r, spec.num_classes, pixels, labels)
}

fn random_colours(rng: &mut Rng) -> ([f64; 3], [f64; 3]) {
    let bg = [0; 3].map(|_| rng.random_range(0.0..90.0));
    let fg = [0; 3].map(|_| rng.random_range(150.0..255.0));
    (bg, fg)
}

fn paint(r: usize, bg: [f64; 3], fg: [f64; 3], inside: impl Fn(f64, f64) -> f64) -> Vec<u8> {
    let mut img = vec![0u8; CHANNELS * r * r];
    for y in 0..r {
        for x in 0..r {
            let t = inside(x as f64 + 0.5, y as f64 + 0.5).clamp(0.0, 1.0);
            for c in 0..CHANNELS {
                img[(c * r + y) * r + x] = (bg[c] + t * (fg[c] - bg[c])).round() as u8;
            }
        }
    }
    img
}

fn draw_shape(class: usize, r: usize, rng: &mut Rng) -> Vec<u8> {
    let rf = r as f64;
    let size = rng.random_range(0.22..0.34) * rf;
    let cx = rng.random_range(size..rf - size);
    let cy = rng.random_range(size..rf - size);
    let (bg, fg) = random_colours(rng);
    let thick = 0.3;
    paint(r, bg, fg, move |x, y| {
        let (u, v) = ((x - cx) / size, (y - cy) / size);
        let (au, av) = (u.abs(), v.abs());
        let hit = match class {
            0 => u * u + v * v <= 1.0,
            1 => au.max(av) <= 0.8,
            2 => v <= 0.8 && v >= -0.8 + 2.0 * au,
            3 => (au <= thick && av <= 1.0) || (av <= thick && au <= 1.0),
            4 => (0.55..=1.0).contains(&(u * u + v * v).sqrt()),
            5 => au + av <= 1.0,
            6 => av <= thick && au <= 1.0,
            7 => au <= thick && av <= 1.0,
            8 => (u - v).abs() <= thick * 1.4 && au <= 1.0 || (u + v).abs() <= thick * 1.4 && au <= 1.0,
            _ => (0.55..=0.9).contains(&au.max(av)),
        };
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

fn draw_texture(class: usize, num_classes: usize, r: usize, rng: &mut Rng) -> Vec<u8> {
    let angle = std::f64::consts::PI * class as f64 / num_classes as f64 + rng.random_range(-0.08..0.08);
    let period = rng.random_range(4.0..7.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (bg, fg) = random_colours(rng);
    let (s, c) = angle.sin_cos();
    paint(r, bg, fg, move |x, y| 0.5 + 0.5 * ((x * c + y * s) * std::f64::consts::TAU / period + phase).sin())
}

/// Distinct 5×5 bitmaps, fixed for all domains and seeds.
fn glyph_bitmaps(n: usize) -> Vec<[bool; 25]> {
    let mut rng = seeded(0x6c79_7068);
    let mut out: Vec<[bool; 25]> = Vec::with_capacity(n);
    while out.len() < n {
        let g: [bool; 25] = std::array::from_fn(|_| rng.random_bool(0.45));
        let distinct = out.iter().all(|o| o.iter().zip(&g).filter(|(a, b)| a != b).count() >= 6);
        if distinct && g.iter().filter(|&&b| b).count() >= 6 {
            out.push(g);
        }
    }
    out
}

fn draw_glyph(glyph: &[bool; 25], r: usize, rng: &mut Rng) -> Vec<u8> {
    let rf = r as f64;
    let cell = rng.random_range(0.11..0.15) * rf;
    let span = 5.0 * cell;
    let x0 = rng.random_range(0.0..(rf - span).max(1.0));
    let y0 = rng.random_range(0.0..(rf - span).max(1.0));
    let (bg, fg) = random_colours(rng);
    paint(r, bg, fg, move |x, y| {
        let (gx, gy) = (((x - x0) / cell).floor(), ((y - y0) / cell).floor());
        if (0.0..5.0).contains(&gx) && (0.0..5.0).contains(&gy) && glyph[gy as usize * 5 + gx as usize] {
            1.0
        } else {
            0.0
        }
    })
}

fn apply_shift(img: &mut [u8], r: usize, shift: &DomainShift, rng: &mut Rng) {
    for _ in 0..shift.quarter_turns % 4 {
        let src = img.to_vec();
        for c in 0..CHANNELS {
            for y in 0..r {
                for x in 0..r {
                    // (x, y) takes the pixel at (r-1-y, x): a counter-clockwise turn.
                    img[(c * r + y) * r + x] = src[(c * r + x) * r + (r - 1 - y)];
                }
            }
        }
    }
    if shift.invert {
        img.iter_mut().for_each(|p| *p = 255 - *p);
    }
    if shift.noise > 0.0 {
        let normal = Normal::new(0.0, shift.noise).expect("validated noise level");
        for p in img.iter_mut() {
            *p = (*p as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
        }
    }
}
