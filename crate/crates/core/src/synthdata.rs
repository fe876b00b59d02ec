//! Synthetic fine-grained dataset: families share a large-scale oriented
//! texture; classes within a family differ only by the location of a small
//! bright cue patch. Translation jitter and pixel noise make the cue the
//! deciding evidence, mirroring the confusable-class regime the losses are
//! built for.
//!
//! Every pixel is derived from substreams keyed by (split, class, sample),
//! so generation is order-independent and byte-reproducible from the seed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_families: usize,
    pub classes_per_family: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Wavelength of the family texture as a fraction of the image side.
    pub pattern_scale: f64,
    pub cue_size: usize,
    pub cue_contrast: f64,
    pub noise_std: f64,
    /// Maximum absolute translation jitter in pixels, per axis.
    pub max_jitter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_families: 4,
            classes_per_family: 5,
            train_per_class: 100,
            test_per_class: 50,
            image_size: 32,
            pattern_scale: 0.5,
            cue_size: 6,
            cue_contrast: 0.6,
            noise_std: 0.05,
            max_jitter: 2,
            seed: 1,
        }
    }
}

pub const SYNTH_KEYS: &[&str] = &[
    "num_families",
    "classes_per_family",
    "train_per_class",
    "test_per_class",
    "image_size",
    "pattern_scale",
    "cue_size",
    "cue_contrast",
    "noise_std",
    "max_jitter",
    "seed",
];

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.num_families * self.classes_per_family
    }

    pub fn from_kv(kv: &crate::config::Kv) -> Result<Self> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            num_families: kv.get("num_families", d.num_families)?,
            classes_per_family: kv.get("classes_per_family", d.classes_per_family)?,
            train_per_class: kv.get("train_per_class", d.train_per_class)?,
            test_per_class: kv.get("test_per_class", d.test_per_class)?,
            image_size: kv.get("image_size", d.image_size)?,
            pattern_scale: kv.get("pattern_scale", d.pattern_scale)?,
            cue_size: kv.get("cue_size", d.cue_size)?,
            cue_contrast: kv.get("cue_contrast", d.cue_contrast)?,
            noise_std: kv.get("noise_std", d.noise_std)?,
            max_jitter: kv.get("max_jitter", d.max_jitter)?,
            seed: kv.get("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_families == 0 || self.classes_per_family == 0 {
            return Err(Error::Config(
                "num_families and classes_per_family must be >= 1".into(),
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be >= 1".into()));
        }
        if self.cue_size == 0 {
            return Err(Error::Config("cue_size must be >= 1".into()));
        }
        if !(self.pattern_scale > 0.0) || self.noise_std < 0.0 || self.cue_contrast < 0.0 {
            return Err(Error::Config(
                "pattern_scale must be > 0, noise_std and cue_contrast >= 0".into(),
            ));
        }
        let needed = self.cue_size + 2 * self.max_jitter;
        if needed > self.image_size {
            return Err(Error::CueGeometry(format!(
                "cue {}px with jitter +-{}px needs {}px but the image is {}px",
                self.cue_size, self.max_jitter, needed, self.image_size
            )));
        }
        let candidates = self.cue_anchor_candidates().len();
        if candidates < self.classes_per_family {
            return Err(Error::CueGeometry(format!(
                "only {candidates} non-overlapping cue anchors fit (cue {}px, jitter {}px, \
                 image {}px) but each family needs {}",
                self.cue_size, self.max_jitter, self.image_size, self.classes_per_family
            )));
        }
        Ok(())
    }

    /// Anchor positions where a cue stays in frame under maximal jitter and
    /// never overlaps a cue at another anchor.
    fn cue_anchor_candidates(&self) -> Vec<(usize, usize)> {
        let lo = self.max_jitter;
        let hi = self.image_size - self.max_jitter - self.cue_size;
        let mut anchors = Vec::new();
        let mut y = lo;
        while y <= hi {
            let mut x = lo;
            while x <= hi {
                anchors.push((y, x));
                x += self.cue_size;
            }
            y += self.cue_size;
        }
        anchors
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// N x 1 x S x S grayscale images in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Family index per class.
    pub family_of_class: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.family_of_class.len()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn image(&self, idx: usize) -> Tensor {
        let s = self.image_size();
        let numel = s * s;
        Tensor::from_parts(
            vec![1, 1, s, s],
            self.images.data()[idx * numel..(idx + 1) * numel].to_vec(),
        )
    }
}

#[derive(Debug)]
pub struct SynthSplits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

struct FamilyPattern {
    kx: f64,
    ky: f64,
    phase: f64,
}

impl FamilyPattern {
    fn for_family(cfg: &SynthConfig, family: usize, root: &RngStream) -> Self {
        // Orientations are spread evenly so families are coarsely separable;
        // only the phase is random.
        let angle = std::f64::consts::PI * family as f64 / cfg.num_families as f64;
        let wavelength = cfg.pattern_scale * cfg.image_size as f64;
        let mut rng = root.substream(&[0, family as u64]);
        FamilyPattern {
            kx: std::f64::consts::TAU * angle.cos() / wavelength,
            ky: std::f64::consts::TAU * angle.sin() / wavelength,
            phase: rng.next_f64() * std::f64::consts::TAU,
        }
    }

    fn eval(&self, y: f64, x: f64) -> f64 {
        0.5 + 0.3 * (self.kx * x + self.ky * y + self.phase).sin()
    }
}

fn cue_anchor_for_class(cfg: &SynthConfig, class: usize, root: &RngStream) -> (usize, usize) {
    let family = class / cfg.classes_per_family;
    let within = class % cfg.classes_per_family;
    let mut anchors = cfg.cue_anchor_candidates();
    let mut rng = root.substream(&[1, family as u64]);
    rng.shuffle(&mut anchors);
    anchors[within]
}

/// Render one sample: shifted family texture, shifted cue, noise, clamp.
/// Values are quantized to f32 so in-memory data matches the file format.
fn render_sample(
    cfg: &SynthConfig,
    pattern: &FamilyPattern,
    anchor: (usize, usize),
    jitter: (i64, i64),
    noise_rng: Option<&mut RngStream>,
    out: &mut [f64],
) {
    let s = cfg.image_size;
    let (dy, dx) = jitter;
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = pattern.eval(y as f64 - dy as f64, x as f64 - dx as f64);
        }
    }
    let cy = (anchor.0 as i64 + dy) as usize;
    let cx = (anchor.1 as i64 + dx) as usize;
    for y in cy..cy + cfg.cue_size {
        for x in cx..cx + cfg.cue_size {
            out[y * s + x] += cfg.cue_contrast;
        }
    }
    if let Some(rng) = noise_rng {
        for v in out.iter_mut() {
            *v += rng.normal() * cfg.noise_std;
        }
    }
    for v in out.iter_mut() {
        *v = (v.clamp(0.0, 1.0) as f32) as f64;
    }
}

fn generate_split(cfg: &SynthConfig, root: &RngStream, split_tag: u64, per_class: usize) -> LabeledDataset {
    let s = cfg.image_size;
    let classes = cfg.num_classes();
    let n = classes * per_class;
    let mut images = vec![0.0; n * s * s];
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let family = class / cfg.classes_per_family;
        let pattern = FamilyPattern::for_family(cfg, family, root);
        let anchor = cue_anchor_for_class(cfg, class, root);
        for sample in 0..per_class {
            let mut rng = root.substream(&[2, split_tag, class as u64, sample as u64]);
            let j = cfg.max_jitter as i64;
            let jitter = if j > 0 {
                (rng.int_in(-j, j), rng.int_in(-j, j))
            } else {
                (0, 0)
            };
            let idx = class * per_class + sample;
            render_sample(
                cfg,
                &pattern,
                anchor,
                jitter,
                (cfg.noise_std > 0.0).then_some(&mut rng),
                &mut images[idx * s * s..(idx + 1) * s * s],
            );
            labels.push(class);
        }
    }
    LabeledDataset {
        images: Tensor::from_parts(vec![n, 1, s, s], images),
        labels,
        family_of_class: (0..classes).map(|c| c / cfg.classes_per_family).collect(),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthSplits> {
    cfg.validate()?;
    let root = RngStream::from_seed(cfg.seed);
    Ok(SynthSplits {
        train: generate_split(cfg, &root, 0, cfg.train_per_class),
        test: generate_split(cfg, &root, 1, cfg.test_per_class),
    })
}

/// Noise-free, jitter-free class images (one per class).
pub fn class_prototypes(cfg: &SynthConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let root = RngStream::from_seed(cfg.seed);
    let s = cfg.image_size;
    let mut out = Vec::with_capacity(cfg.num_classes());
    for class in 0..cfg.num_classes() {
        let family = class / cfg.classes_per_family;
        let pattern = FamilyPattern::for_family(cfg, family, &root);
        let anchor = cue_anchor_for_class(cfg, class, &root);
        let mut data = vec![0.0; s * s];
        render_sample(cfg, &pattern, anchor, (0, 0), None, &mut data);
        out.push(Tensor::from_parts(vec![s, s], data));
    }
    Ok(out)
}

const DBDS_MAGIC: &[u8; 4] = b"DBDS";
const DBDS_VERSION: u32 = 1;

/// Binary dataset file: magic, version, N, C, S, labels as u32, images as
/// little-endian f32.
pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let s = ds.image_size();
    let mut buf = Vec::with_capacity(16 + ds.len() * (4 + 4 * s * s));
    buf.extend_from_slice(DBDS_MAGIC);
    buf.extend_from_slice(&DBDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(s as u32).to_le_bytes());
    for &label in &ds.labels {
        buf.extend_from_slice(&(label as u32).to_le_bytes());
    }
    for &v in ds.images.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Load a DBDS file; the family mapping comes from the separate index file
/// when available.
pub fn load_dataset(path: &Path, family_index: Option<&Path>) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::BadFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 || &bytes[0..4] != DBDS_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if u32_at(4) != DBDS_VERSION {
        return Err(bad(format!("unsupported version {}", u32_at(4))));
    }
    let n = u32_at(8) as usize;
    let c = u32_at(12) as usize;
    let s = u32_at(16) as usize;
    let expect = 20 + n * 4 + n * s * s * 4;
    if bytes.len() != expect {
        return Err(bad(format!("expected {expect} bytes, got {}", bytes.len())));
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = u32_at(20 + i * 4) as usize;
        if label >= c {
            return Err(bad(format!("label {label} out of range at row {i}")));
        }
        labels.push(label);
    }
    let mut images = Vec::with_capacity(n * s * s);
    let base = 20 + n * 4;
    for i in 0..n * s * s {
        let off = base + i * 4;
        images.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    let family_of_class = match family_index {
        Some(p) => load_family_index(p, c)?,
        None => vec![0; c],
    };
    Ok(LabeledDataset {
        images: Tensor::new(vec![n, 1, s, s], images)?,
        labels,
        family_of_class,
    })
}

/// One `class family` pair per line.
pub fn save_family_index(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut out = String::new();
    for (class, family) in ds.family_of_class.iter().enumerate() {
        let _ = writeln!(out, "{class} {family}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_family_index(path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = vec![usize::MAX; num_classes];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::BadFormat {
                path: path.to_path_buf(),
                reason: format!("bad line '{line}'"),
            })
        };
        let class = parse(parts.next())?;
        let family = parse(parts.next())?;
        if class >= num_classes {
            return Err(Error::BadFormat {
                path: path.to_path_buf(),
                reason: format!("class {class} out of range"),
            });
        }
        map[class] = family;
    }
    if map.iter().any(|&f| f == usize::MAX) {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            reason: "missing class entries".into(),
        });
    }
    Ok(map)
}

/// Row-normalized confusion matrix (true class x predicted class) of a
/// model over a dataset.
pub fn confusability_report(
    ds: &LabeledDataset,
    params: &crate::model::ModelParams,
    model_cfg: &crate::model::ModelConfig,
) -> Result<Tensor> {
    let preds = predict_in_batches(ds, params, model_cfg, 64)?;
    let c = ds.num_classes();
    let counts = confusion_counts(&preds, &ds.labels, c);
    let mut data = vec![0.0; c * c];
    for row in 0..c {
        let total: usize = counts[row * c..(row + 1) * c].iter().sum();
        if total > 0 {
            for col in 0..c {
                data[row * c + col] = counts[row * c + col] as f64 / total as f64;
            }
        }
    }
    Tensor::new(vec![c, c], data)
}

pub fn confusion_counts(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes * num_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        counts[t * num_classes + p] += 1;
    }
    counts
}

pub fn predict_in_batches(
    ds: &LabeledDataset,
    params: &crate::model::ModelParams,
    model_cfg: &crate::model::ModelConfig,
    batch: usize,
) -> Result<Vec<usize>> {
    let s = ds.image_size();
    let numel = s * s;
    let mut preds = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch).min(ds.len());
        let images = Tensor::from_parts(
            vec![end - start, 1, s, s],
            ds.images.data()[start * numel..end * numel].to_vec(),
        );
        let (labels, _) = crate::model::predict(params, model_cfg, &images)?;
        preds.extend(labels);
        start = end;
    }
    Ok(preds)
}
