//! Synthetic paired dataset: procedural subjects, a derived low-resolution
//! thermal modality, MATLAB-convention bicubic resampling, and an on-disk
//! layout (`manifest.tsv` + PNGs) with identity-disjoint splits and a
//! deterministic gallery/probe verification protocol.

pub mod bicubic;
pub mod faces;

pub use bicubic::{bicubic_resize, horizontal_flip};
pub use faces::{derive_thermal, render_identity, IdentityParams};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// Everything the generator needs; one 64-bit seed drives all randomness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetConfig {
    pub identities: u32,
    pub variants: u32,
    pub seed: u64,
    /// Thermal inputs are `base_resolution` square; visible targets are 8×.
    pub base_resolution: usize,
    pub thermal_channels: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { identities: 10, variants: 8, seed: 7, base_resolution: 16, thermal_channels: 1 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::contract(format!("need at least 2 identities, got {}", self.identities)));
        }
        if self.variants < 2 {
            return Err(Error::contract(format!(
                "need at least 2 variants per identity (one gallery, one probe), got {}",
                self.variants
            )));
        }
        if self.base_resolution < 4 {
            return Err(Error::contract(format!("base resolution {} is too small", self.base_resolution)));
        }
        if self.thermal_channels != 1 && self.thermal_channels != 3 {
            return Err(Error::config(format!("thermal channels must be 1 or 3, got {}", self.thermal_channels)));
        }
        Ok(())
    }

    pub fn visible_resolution(&self) -> usize {
        8 * self.base_resolution
    }
}

/// One training/evaluation pair, fully in memory and in [−1,1].
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub visible: Tensor,
    pub thermal_lr: Tensor,
    pub identity: u32,
    pub variant: u32,
}

/// Render a pair without touching disk: visible at 8× the base resolution,
/// thermal derived at the same size and then bicubic-downsampled.
pub fn generate_sample(cfg: &DatasetConfig, identity: u32, variant: u32) -> Result<PairedSample> {
    cfg.validate()?;
    let params = IdentityParams::sample(cfg.seed, identity);
    let visible = render_identity(&params, variant, cfg.visible_resolution(), cfg.seed);
    let sample_seed = derive_seed(cfg.seed, 0x5e, ((identity as u64) << 16) | variant as u64);
    let thermal_hr = derive_thermal(&visible, cfg.thermal_channels, sample_seed)?;
    let thermal_lr = bicubic_resize(&thermal_hr, cfg.base_resolution, cfg.base_resolution)?;
    Ok(PairedSample { visible, thermal_lr, identity, variant })
}

/// Identity-disjoint split sizes: ~15% each for val and test (val may be
/// empty only with 2 identities; test never is), remainder trains.
fn split_sizes(identities: u32) -> Result<(usize, usize, usize)> {
    let n = identities as usize;
    let frac = (0.15 * n as f64).round() as usize;
    let n_test = frac.max(1);
    let n_val = if n >= 3 { frac.max(1) } else { 0 };
    let n_train = n
        .checked_sub(n_val + n_test)
        .filter(|&t| t >= 1)
        .ok_or_else(|| Error::contract(format!("{n} identities cannot fill train/val/test splits")))?;
    Ok((n_train, n_val, n_test))
}

/// Deterministic identity → split assignment (seeded shuffle, then cut).
pub fn assign_splits(identities: u32, seed: u64) -> Result<Vec<(u32, Split)>> {
    let (n_train, n_val, _) = split_sizes(identities)?;
    let mut ids: Vec<u32> = (0..identities).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x51, 0)));
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub split: Split,
    pub identity: u32,
    pub variant: u32,
    /// Paths are relative to the dataset directory.
    pub visible: String,
    pub thermal: String,
}

/// Parsed `manifest.tsv`: the header pins the full generation config, so a
/// manifest alone is enough to regenerate or validate the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub identities: u32,
    pub variants: u32,
    pub base_resolution: usize,
    pub thermal_channels: usize,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            identities: self.identities,
            variants: self.variants,
            seed: self.seed,
            base_resolution: self.base_resolution,
            thermal_channels: self.thermal_channels,
        }
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_identities(&self, split: Split) -> Vec<u32> {
        let mut ids: Vec<u32> = self.split_records(split).map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Which variant serves as a subject's gallery image — pseudo-random but
    /// a pure function of (seed, identity), so no extra manifest column.
    pub fn gallery_variant(&self, identity: u32) -> u32 {
        (derive_seed(self.seed, 0x9a, identity as u64) % self.variants as u64) as u32
    }

    /// One visible image per identity in the split.
    pub fn gallery(&self, split: Split) -> Vec<&SampleRecord> {
        self.split_records(split).filter(|r| r.variant == self.gallery_variant(r.identity)).collect()
    }

    /// Every thermal image in the split except the gallery variants.
    pub fn probes(&self, split: Split) -> Vec<&SampleRecord> {
        self.split_records(split).filter(|r| r.variant != self.gallery_variant(r.identity)).collect()
    }

    /// Read one pair back from disk and validate its shapes against the header.
    pub fn load_sample(&self, dir: &Path, rec: &SampleRecord) -> Result<PairedSample> {
        let visible = load_png(&dir.join(&rec.visible))?;
        let thermal_lr = load_png(&dir.join(&rec.thermal))?;
        let vr = 8 * self.base_resolution;
        if visible.shape != [3, vr, vr] {
            return Err(Error::Integrity(format!("{}: expected [3,{vr},{vr}], got {:?}", rec.visible, visible.shape)));
        }
        let (c, b) = (self.thermal_channels, self.base_resolution);
        if thermal_lr.shape != [c, b, b] {
            return Err(Error::Integrity(format!(
                "{}: expected [{c},{b},{b}], got {:?}",
                rec.thermal, thermal_lr.shape
            )));
        }
        Ok(PairedSample { visible, thermal_lr, identity: rec.identity, variant: rec.variant })
    }
}

const MANIFEST_COLUMNS: &str = "split\tidentity\tvariant\tvisible\tthermal";

/// Generate every sample, write PNGs and `manifest.tsv` under `dir`, and
/// return the manifest. Deterministic: one seed → byte-identical tree.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let assignment = assign_splits(cfg.identities, cfg.seed)?;
    fs::create_dir_all(dir.join("images"))?;

    let mut records = Vec::with_capacity(assignment.len() * cfg.variants as usize);
    for split in Split::ALL {
        let mut ids: Vec<u32> =
            assignment.iter().filter(|(_, s)| *s == split).map(|(id, _)| *id).collect();
        ids.sort_unstable();
        for id in ids {
            for variant in 0..cfg.variants {
                let sample = generate_sample(cfg, id, variant)?;
                let visible = format!("images/id{id:04}_v{variant:02}_vis.png");
                let thermal = format!("images/id{id:04}_v{variant:02}_thr.png");
                save_png(&sample.visible, &dir.join(&visible))?;
                save_png(&sample.thermal_lr, &dir.join(&thermal))?;
                records.push(SampleRecord { split, identity: id, variant, visible, thermal });
            }
        }
    }

    let manifest = Manifest {
        seed: cfg.seed,
        identities: cfg.identities,
        variants: cfg.variants,
        base_resolution: cfg.base_resolution,
        thermal_channels: cfg.thermal_channels,
        records,
    };
    let mut out = fs::File::create(dir.join("manifest.tsv"))?;
    write!(out, "{}", manifest_text(&manifest))?;
    Ok(manifest)
}

fn manifest_text(m: &Manifest) -> String {
    let mut s = String::new();
    s.push_str(&format!("# seed\t{}\n", m.seed));
    s.push_str(&format!("# identities\t{}\n", m.identities));
    s.push_str(&format!("# variants\t{}\n", m.variants));
    s.push_str(&format!("# base_resolution\t{}\n", m.base_resolution));
    s.push_str(&format!("# thermal_channels\t{}\n", m.thermal_channels));
    s.push_str(MANIFEST_COLUMNS);
    s.push('\n');
    for r in &m.records {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.split, r.identity, r.variant, r.visible, r.thermal));
    }
    s
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&path)?;
    let mut header = std::collections::HashMap::new();
    let mut lines = text.lines();
    let mut columns_seen = false;
    for line in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("bad manifest header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        } else if line == MANIFEST_COLUMNS {
            columns_seen = true;
            break;
        } else {
            return Err(Error::Format(format!("unexpected manifest line {line:?}")));
        }
    }
    if !columns_seen {
        return Err(Error::Format("manifest has no column header".into()));
    }
    let field = |k: &str| -> Result<u64> {
        header
            .get(k)
            .ok_or_else(|| Error::Format(format!("manifest header missing {k}")))?
            .parse()
            .map_err(|e| Error::Format(format!("manifest header {k}: {e}")))
    };

    let mut records = Vec::new();
    for line in lines {
        let mut parts = line.split('\t');
        let mut next = |what: &str| {
            parts.next().ok_or_else(|| Error::Format(format!("manifest record missing {what}: {line:?}")))
        };
        records.push(SampleRecord {
            split: next("split")?.parse()?,
            identity: next("identity")?.parse().map_err(|e| Error::Format(format!("identity: {e}")))?,
            variant: next("variant")?.parse().map_err(|e| Error::Format(format!("variant: {e}")))?,
            visible: next("visible path")?.to_string(),
            thermal: next("thermal path")?.to_string(),
        });
    }
    Ok(Manifest {
        seed: field("seed")?,
        identities: field("identities")? as u32,
        variants: field("variants")? as u32,
        base_resolution: field("base_resolution")? as usize,
        thermal_channels: field("thermal_channels")? as usize,
        records,
    })
}

/// 8-bit export of a [c,h,w] image in [−1,1]: byte = round((v+1)·127.5).
/// One channel becomes grayscale PNG, three become RGB.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    if img.rank() != 3 || (img.shape[0] != 1 && img.shape[0] != 3) {
        return Err(Error::dim("save_png", format!("need [1|3,h,w], got {:?}", img.shape)));
    }
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let plane = h * w;
    let quant = |v: f32| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    // planar [c,h,w] → interleaved rows
    let mut bytes = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            bytes.push(quant(img.data[ch * plane + i]));
        }
    }
    let err = |what: String| Error::Format(format!("{}: {what}", path.display()));
    match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| err("buffer/size mismatch".into()))?
            .save(path)
            .map_err(|e| err(e.to_string())),
        _ => image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| err("buffer/size mismatch".into()))?
            .save(path)
            .map_err(|e| err(e.to_string())),
    }
}

/// Inverse of [`save_png`]: byte → byte/127.5 − 1, planar layout.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let dynamic = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (c, w, h, bytes) = match dynamic {
        image::DynamicImage::ImageLuma8(g) => (1usize, g.width(), g.height(), g.into_raw()),
        other => {
            let rgb = other.to_rgb8();
            (3usize, rgb.width(), rgb.height(), rgb.into_raw())
        }
    };
    let (w, h) = (w as usize, h as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; c * plane];
    for i in 0..plane {
        for ch in 0..c {
            data[ch * plane + i] = bytes[i * c + ch] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}
