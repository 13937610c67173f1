//! Labeled clean/degraded pair generation and the manifest format.
//!
//! Manifest: UTF-8, a `# dataset_seed=<n>` header line, then one record per
//! line with tab-separated fields `clean_path degraded_path kind params seed`.
//! Paths are relative to the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::degrade::{mix_seed, Degradation, DegradationKind, DegradationSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::checkpoint::atomic_write;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Closed interval sampled uniformly; `lo == hi` is a fixed value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::Param(format!("empty range {lo}..{hi}")));
        }
        Ok(Range { lo, hi })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * rng.random::<f64>()
        }
    }

    /// Parses `v` or `lo..hi`.
    pub fn parse(s: &str) -> Result<Self> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number {t:?}")));
        match s.split_once("..") {
            Some((a, b)) => Range::new(num(a)?, num(b)?).map_err(|e| Error::Config(e.to_string())),
            None => Ok(Range::fixed(num(s)?)),
        }
    }
}

impl std::fmt::Display for Range {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}..{}", self.lo, self.hi)
        }
    }
}

/// Parameter ranges for one degradation kind.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationDistribution {
    pub kind: DegradationKind,
    /// One range per name in [`DegradationKind::param_names`].
    pub ranges: Vec<Range>,
}

impl DegradationDistribution {
    /// Desk-scale defaults.
    pub fn default_for(kind: DegradationKind) -> Self {
        let r = |lo, hi| Range { lo, hi };
        let ranges = match kind {
            DegradationKind::Noise => vec![r(15.0, 50.0)],
            DegradationKind::Blur => vec![Range::fixed(3.0), r(1.5, 2.5)],
            DegradationKind::Haze => vec![r(0.7, 0.95), r(0.35, 0.65)],
            DegradationKind::Rain => vec![r(10.0, 25.0), r(5.0, 12.0), r(-20.0, 20.0), r(0.35, 0.7)],
            DegradationKind::Lowlight => vec![r(1.6, 2.8), r(0.3, 0.6)],
        };
        DegradationDistribution { kind, ranges }
    }

    pub fn set(&mut self, name: &str, range: Range) -> Result<()> {
        let i = self
            .kind
            .param_names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Config(format!("{} has no parameter {name:?}", self.kind)))?;
        self.ranges[i] = range;
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Degradation> {
        let vals: Vec<f64> = self
            .ranges
            .iter()
            .zip(self.kind.param_names())
            .map(|(r, n)| {
                let v = r.sample(rng);
                if matches!(*n, "kernel_radius" | "streak_count") {
                    v.round()
                } else {
                    v
                }
            })
            .collect();
        Degradation::from_values(self.kind, &vals)
    }
}

/// Where clean images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CleanSource {
    /// Seeded multi-scale textures with sharp-edged shapes, `size×size`.
    Procedural { size: usize },
    /// PNG files, taken in sorted order and reused cyclically.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    pub spec: DegradationSpec,
}

impl ManifestRecord {
    pub fn kind(&self) -> DegradationKind {
        self.spec.kind()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub dataset_seed: u64,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# dataset_seed={}\n", self.dataset_seed);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.clean_path.display(),
                r.degraded_path.display(),
                r.kind(),
                r.spec.degradation.flatten(),
                r.spec.seed
            );
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Dataset("empty manifest".into()))?;
        let dataset_seed = header
            .strip_prefix("# dataset_seed=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Dataset(format!("bad manifest header {header:?}")))?;
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Dataset(format!("manifest line {}: expected 5 fields, got {}", n + 2, f.len())));
            }
            let kind: DegradationKind = f[2].parse()?;
            let degradation = Degradation::parse_flat(kind, f[3])?;
            let seed = f[4].parse().map_err(|_| Error::Dataset(format!("manifest line {}: bad seed", n + 2)))?;
            records.push(ManifestRecord {
                clean_path: PathBuf::from(f[0]),
                degraded_path: PathBuf::from(f[1]),
                spec: DegradationSpec::new(degradation, seed),
            });
        }
        Ok(DatasetManifest { dataset_seed, records, root: root.to_path_buf() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn kinds(&self) -> Vec<DegradationKind> {
        let mut k: Vec<_> = self.records.iter().map(|r| r.kind()).collect();
        k.sort();
        k.dedup();
        k
    }

    pub fn load_pair(&self, i: usize) -> Result<(Image, Image)> {
        let r = &self.records[i];
        Ok((Image::load_png(&self.root.join(&r.clean_path))?, Image::load_png(&self.root.join(&r.degraded_path))?))
    }

    /// Indices held out for validation: 10% chosen by a hash of the record index.
    pub fn is_validation(&self, i: usize) -> bool {
        mix_seed(self.dataset_seed ^ 0x5EED_0F_5A17, i as u64) % 10 == 0
    }

    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.records.len()).partition(|&i| !self.is_validation(i))
    }
}

/// Bilinear sample of a `g×g` grid stretched over `size` pixels.
fn bilinear(grid: &[f64], g: usize, size: usize, x: usize, y: usize) -> f64 {
    let scale = (g - 1) as f64 / (size.max(2) - 1) as f64;
    let (fx, fy) = (x as f64 * scale, y as f64 * scale);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(g - 1), (y0 + 1).min(g - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let v = |xx: usize, yy: usize| grid[yy * g + xx];
    (v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx) * (1.0 - ty) + (v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx) * ty
}

/// Seeded smoothed-noise texture with sharp-edged rectangles and disks.
pub fn procedural_texture(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut img = Image::from_fn(size, size, |_, _, c| 0.25 + 0.5 * base[c]);
    for (octave, amp) in [(3usize, 0.22), (6, 0.12), (12, 0.06)] {
        let grids: Vec<Vec<f64>> = (0..3).map(|_| (0..octave * octave).map(|_| normal.sample(&mut rng)).collect()).collect();
        let shared: Vec<f64> = (0..octave * octave).map(|_| normal.sample(&mut rng)).collect();
        for y in 0..size {
            for x in 0..size {
                let s = bilinear(&shared, octave, size, x, y);
                for c in 0..3 {
                    let v = img.get(x, y, c) + amp * (0.7 * s + 0.3 * bilinear(&grids[c], octave, size, x, y));
                    img.set(x, y, c, v);
                }
            }
        }
    }
    let shapes = 2 + rng.random_range(0..4);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let alpha = 0.5 + 0.5 * rng.random::<f64>();
        let cx = rng.random::<f64>() * size as f64;
        let cy = rng.random::<f64>() * size as f64;
        let r = (0.1 + 0.25 * rng.random::<f64>()) * size as f64;
        let disk = rng.random::<bool>();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disk { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= 0.6 * r };
                if inside {
                    for c in 0..3 {
                        let v = img.get(x, y, c) * (1.0 - alpha) + color[c] * alpha;
                        img.set(x, y, c, v);
                    }
                }
            }
        }
    }
    img.map(|v| 0.05 + 0.9 * v.clamp(0.0, 1.0))
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

/// Writes `count` clean/degraded pairs plus the manifest under `out_dir`.
/// Kinds are assigned round-robin over `dists`; record `i` draws its
/// parameters and noise from `mix_seed(dataset_seed, i)`.
pub fn generate_dataset(
    source: &CleanSource,
    dists: &[DegradationDistribution],
    count: usize,
    dataset_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Param("dataset count must be positive".into()));
    }
    if dists.is_empty() {
        return Err(Error::Param("at least one degradation distribution is required".into()));
    }
    let sources = match source {
        CleanSource::Directory(d) => list_pngs(d)?,
        CleanSource::Procedural { size } if *size < 16 => {
            return Err(Error::Param(format!("procedural image size {size} below 16")));
        }
        CleanSource::Procedural { .. } => Vec::new(),
    };
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let record_seed = mix_seed(dataset_seed, i as u64);
        let clean = match source {
            CleanSource::Procedural { size } => procedural_texture(*size, mix_seed(record_seed, 1)),
            CleanSource::Directory(_) => {
                let img = Image::load_png(&sources[i % sources.len()])?;
                // Crop to a multiple of 8 so every level plan divides evenly.
                let (w, h) = (img.width() / 8 * 8, img.height() / 8 * 8);
                img.crop((img.width() - w) / 2, (img.height() - h) / 2, w, h)?
            }
        };
        let dist = &dists[i % dists.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(record_seed, 2));
        let spec = DegradationSpec::new(dist.sample(&mut rng)?, mix_seed(record_seed, 3));
        let degraded = spec.apply(&clean)?;
        let clean_path = PathBuf::from(format!("clean/{i:05}.png"));
        let degraded_path = PathBuf::from(format!("degraded/{i:05}.png"));
        clean.save_png(&out_dir.join(&clean_path))?;
        degraded.save_png(&out_dir.join(&degraded_path))?;
        records.push(ManifestRecord { clean_path, degraded_path, spec });
    }
    let manifest = DatasetManifest { dataset_seed, records, root: out_dir.to_path_buf() };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
