//! Image corpora, task-group sampling, and the synthetic desk-scale corpus.
//!
//! A `TaskGroup` is one sampled sub-dataset: a support split used to
//! generate parameters and centroids, and a sample-disjoint query split used
//! for losses and evaluation. All sampling is driven by labeled ChaCha8
//! streams so a (seed, label) pair reproduces exactly on any platform.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    read_f32_vec, read_string, read_u32, write_f32_slice, write_string, write_u32, Tensor,
};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;

/// A labeled image dataset with pixels in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageCorpus {
    pub images: Tensor<f32>, // [N, C, H, W]
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
}

impl ImageCorpus {
    pub fn n(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(Error::Dim("corpus images must be [N,C,H,W]".into()));
        }
        if self.n() != self.labels.len() {
            return Err(Error::Dim(format!(
                "corpus has {} images but {} labels",
                self.n(),
                self.labels.len()
            )));
        }
        let c = self.n_classes() as u32;
        if let Some(l) = self.labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {l} outside class set of size {c}")));
        }
        for cls in 0..c {
            if !self.labels.contains(&cls) {
                return Err(Error::Config(format!(
                    "class '{}' has no samples",
                    self.class_names[cls as usize]
                )));
            }
        }
        Ok(())
    }

    /// Indices of all samples of each class, in corpus order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        by_class
    }

    /// Copy the given samples into a fresh [n, C, H, W] tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor<f32> {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        Tensor::new(vec![idx.len(), c, h, w], data).expect("gather from valid corpus")
    }
}

/// One episodic task: disjoint support/query splits over a subset of classes.
#[derive(Clone, Debug)]
pub struct TaskGroup {
    pub support_images: Tensor<f32>, // [Ns, C, H, W]
    pub support_labels: Vec<u32>,    // local labels 0..n_way
    pub query_images: Tensor<f32>,   // [Nq, C, H, W]
    pub query_labels: Vec<u32>,      // local labels 0..n_way
    pub class_map: Vec<u32>,         // local -> global class index
}

impl TaskGroup {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    /// Global class index of each query sample.
    pub fn query_globals(&self) -> Vec<u32> {
        self.query_labels.iter().map(|&l| self.class_map[l as usize]).collect()
    }

    /// Support row indices per local class, in stored order.
    pub fn support_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_way()];
        for (i, &l) in self.support_labels.iter().enumerate() {
            groups[l as usize].push(i);
        }
        groups
    }
}

/// Sample `count` task groups: per group, `n_way` classes drawn without
/// replacement, then `n_support + n_query` sample-disjoint indices per class.
pub fn sample_task_groups(
    corpus: &ImageCorpus,
    n_way: usize,
    n_support: usize,
    n_query: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<TaskGroup>> {
    corpus.validate()?;
    if n_way == 0 || n_way > corpus.n_classes() {
        return Err(Error::Config(format!(
            "n_way {n_way} invalid for corpus with {} classes",
            corpus.n_classes()
        )));
    }
    let by_class = corpus.indices_by_class();
    for (ci, members) in by_class.iter().enumerate() {
        if members.len() < n_support + n_query {
            return Err(Error::Config(format!(
                "class '{}' has {} samples, need {} (support {n_support} + query {n_query})",
                corpus.class_names[ci],
                members.len(),
                n_support + n_query
            )));
        }
    }
    let mut r = rng::stream(seed, "tasks");
    let mut groups = Vec::with_capacity(count);
    let all_classes: Vec<usize> = (0..corpus.n_classes()).collect();
    for _ in 0..count {
        let mut chosen = all_classes.clone();
        chosen.shuffle(&mut r);
        chosen.truncate(n_way);
        let mut sup_idx = Vec::with_capacity(n_way * n_support);
        let mut sup_lbl = Vec::with_capacity(n_way * n_support);
        let mut qry_idx = Vec::with_capacity(n_way * n_query);
        let mut qry_lbl = Vec::with_capacity(n_way * n_query);
        for (local, &global) in chosen.iter().enumerate() {
            let mut members = by_class[global].clone();
            members.shuffle(&mut r);
            for &i in &members[..n_support] {
                sup_idx.push(i);
                sup_lbl.push(local as u32);
            }
            for &i in &members[n_support..n_support + n_query] {
                qry_idx.push(i);
                qry_lbl.push(local as u32);
            }
        }
        groups.push(TaskGroup {
            support_images: corpus.gather(&sup_idx),
            support_labels: sup_lbl,
            query_images: corpus.gather(&qry_idx),
            query_labels: qry_lbl,
            class_map: chosen.iter().map(|&c| c as u32).collect(),
        });
    }
    Ok(groups)
}

/// Which procedural texture family a synthetic corpus draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternFamily {
    /// Oriented sinusoidal gratings, one (orientation, frequency) per class.
    Gratings,
    /// Concentric rings around a class-specific center.
    Rings,
}

impl Default for PatternFamily {
    fn default() -> Self {
        PatternFamily::Gratings
    }
}

pub const SYNTH_NOISE_SIGMA: f64 = 0.1;
/// Amplitude of the distractor pattern every class shares.
const COMMON_AMPLITUDE: f64 = 0.08;
/// Amplitude of the per-sample nuisance pattern (random parameters each
/// sample, zero mean across a class).
const NUISANCE_AMPLITUDE: f64 = 0.26;
/// Amplitude of the class-specific component.
const CLASS_AMPLITUDE: f64 = 0.12;

/// Per-sample nuisance parameters, drawn once per image.
struct Nuisance {
    a: f64,
    b: f64,
    c: f64,
}

impl Nuisance {
    fn draw(family: PatternFamily, r: &mut impl rand::Rng) -> Self {
        use std::f64::consts::PI;
        match family {
            PatternFamily::Gratings => Nuisance {
                a: r.gen_range(0.0..PI),        // orientation
                b: r.gen_range(1.2..2.8),       // frequency, below the class band
                c: r.gen_range(0.0..2.0 * PI),  // phase
            },
            PatternFamily::Rings => Nuisance {
                a: r.gen_range(0.2..0.8),       // center x
                b: r.gen_range(0.2..0.8),       // center y
                c: r.gen_range(1.2..2.8),       // frequency, below the class band
            },
        }
    }

    fn eval(&self, family: PatternFamily, y: f64, x: f64) -> f64 {
        use std::f64::consts::PI;
        match family {
            PatternFamily::Gratings => {
                (2.0 * PI * self.b * (x * self.a.cos() + y * self.a.sin()) + self.c).sin()
            }
            PatternFamily::Rings => {
                let r = ((x - self.a).powi(2) + (y - self.b).powi(2)).sqrt();
                (2.0 * PI * self.c * r).sin()
            }
        }
    }
}

/// The discriminative signal is a weak class-specific pattern at a fixed
/// high spatial frequency (orientation- or position-coded), buried under a
/// shared distractor and a per-sample low-frequency nuisance pattern.
/// Separating classes takes features tuned to the class band; generic
/// texture energy is dominated by the nuisance.
fn class_pattern(family: PatternFamily, class: usize, _n_classes: usize, y: f64, x: f64) -> f64 {
    use std::f64::consts::PI;
    match family {
        PatternFamily::Gratings => {
            let common = (2.0 * PI * 1.5 * (x * 0.94 + y * 0.34) + 1.0).sin();
            // golden-ratio spacing scatters orientations so any subset of
            // classes spans the whole range
            let theta = PI * ((class as f64 * 0.618_034) % 1.0);
            let phase = 2.0 * PI * ((class as f64 * 0.754_877) % 1.0);
            let delta = (2.0 * PI * 4.0 * (x * theta.cos() + y * theta.sin()) + phase).sin();
            COMMON_AMPLITUDE * common + CLASS_AMPLITUDE * delta
        }
        PatternFamily::Rings => {
            let rc = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
            let common = (2.0 * PI * 1.5 * rc).sin();
            let cx = 0.25 + 0.5 * ((class as f64 * 0.618_034) % 1.0);
            let cy = 0.25 + 0.5 * ((class as f64 * 0.381_966) % 1.0);
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let delta = (2.0 * PI * 4.0 * r).sin();
            COMMON_AMPLITUDE * common + CLASS_AMPLITUDE * delta
        }
    }
}

/// Generate a synthetic corpus: each class is a fixed procedural pattern
/// plus per-sample Gaussian noise (sigma 0.1), clamped to [0, 1].
pub fn make_synthetic_corpus(
    n_classes: usize,
    per_class: usize,
    image_shape: (usize, usize, usize),
    family: PatternFamily,
    seed: u64,
) -> Result<ImageCorpus> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let (c, h, w) = image_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("bad image shape {image_shape:?}")));
    }
    let mut r = rng::stream(seed, "corpus");
    let noise = Normal::new(0.0f64, SYNTH_NOISE_SIGMA).expect("valid sigma");
    let n = n_classes * per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        for _ in 0..per_class {
            let nuis = Nuisance::draw(family, &mut r);
            for _ in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        let y = iy as f64 / h as f64;
                        let x = ix as f64 / w as f64;
                        let clean = 0.5
                            + class_pattern(family, class, n_classes, y, x)
                            + NUISANCE_AMPLITUDE * nuis.eval(family, y, x);
                        let v = (clean + noise.sample(&mut r)).clamp(0.0, 1.0);
                        data.push(v as f32);
                    }
                }
            }
            labels.push(class as u32);
        }
    }
    let corpus = ImageCorpus {
        images: Tensor::new(vec![n, c, h, w], data)?,
        labels,
        class_names: (0..n_classes).map(|i| format!("{family:?}-{i}").to_lowercase()).collect(),
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Restrict a corpus to a subset of its classes, re-indexing labels to
/// 0..len(keep) in the order given.
pub fn subset_classes(corpus: &ImageCorpus, keep: &[usize]) -> Result<ImageCorpus> {
    for &k in keep {
        if k >= corpus.n_classes() {
            return Err(Error::Index(format!("class {k} out of range")));
        }
    }
    let mut remap = vec![None; corpus.n_classes()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = Some(new as u32);
    }
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in corpus.labels.iter().enumerate() {
        if let Some(new) = remap[l as usize] {
            idx.push(i);
            labels.push(new);
        }
    }
    let corpus = ImageCorpus {
        images: corpus.gather(&idx),
        labels,
        class_names: keep.iter().map(|&k| corpus.class_names[k].clone()).collect(),
    };
    corpus.validate()?;
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Corpus file format "PUDC"
//
//   magic "PUDC" | version | n | c | h | w | class_count
//   class names (len-prefixed UTF-8) | labels u32[n] | pixels f32 LE
// ---------------------------------------------------------------------------

pub const CORPUS_MAGIC: &[u8; 4] = b"PUDC";
pub const CORPUS_VERSION: u32 = 1;

pub fn write_corpus<W: Write>(w: &mut W, corpus: &ImageCorpus) -> Result<()> {
    corpus.validate()?;
    w.write_all(CORPUS_MAGIC)?;
    write_u32(w, CORPUS_VERSION)?;
    let s = corpus.images.shape();
    for &d in s {
        write_u32(w, d as u32)?;
    }
    write_u32(w, corpus.class_names.len() as u32)?;
    for name in &corpus.class_names {
        write_string(w, name)?;
    }
    for &l in &corpus.labels {
        write_u32(w, l)?;
    }
    write_f32_slice(w, corpus.images.data())?;
    Ok(())
}

pub fn read_corpus<R: Read>(r: &mut R) -> Result<ImageCorpus> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"PUDC\"")));
    }
    let version = read_u32(r)?;
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let n = read_u32(r)? as usize;
    let c = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let n_classes = read_u32(r)? as usize;
    if n_classes > 1 << 20 || n > 1 << 28 {
        return Err(Error::Format("unreasonable corpus header".into()));
    }
    let mut class_names = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        class_names.push(read_string(r)?);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(r)?);
    }
    let pixels = read_f32_vec(r, n * c * h * w)?;
    let corpus = ImageCorpus { images: Tensor::new(vec![n, c, h, w], pixels)?, labels, class_names };
    corpus.validate().map_err(|e| Error::Format(format!("corpus fails validation: {e}")))?;
    Ok(corpus)
}

pub fn save_corpus(corpus: &ImageCorpus, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut f, corpus)
}

pub fn load_corpus(path: &Path) -> Result<ImageCorpus> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_corpus(&mut f)
}

// ---------------------------------------------------------------------------
// Task file format "PUDT": self-contained materialized task groups.
//
//   magic "PUDT" | version | group_count
//   per group: n_way | class_map u32[n_way]
//              ns | c | h | w | support labels u32[ns] | support pixels
//              nq | query labels u32[nq] | query pixels
// ---------------------------------------------------------------------------

pub const TASKS_MAGIC: &[u8; 4] = b"PUDT";
pub const TASKS_VERSION: u32 = 1;

pub fn write_task_groups<W: Write>(w: &mut W, groups: &[TaskGroup]) -> Result<()> {
    w.write_all(TASKS_MAGIC)?;
    write_u32(w, TASKS_VERSION)?;
    write_u32(w, groups.len() as u32)?;
    for g in groups {
        write_u32(w, g.n_way() as u32)?;
        for &c in &g.class_map {
            write_u32(w, c)?;
        }
        let s = g.support_images.shape();
        for &d in s {
            write_u32(w, d as u32)?;
        }
        for &l in &g.support_labels {
            write_u32(w, l)?;
        }
        write_f32_slice(w, g.support_images.data())?;
        write_u32(w, g.query_images.shape()[0] as u32)?;
        for &l in &g.query_labels {
            write_u32(w, l)?;
        }
        write_f32_slice(w, g.query_images.data())?;
    }
    Ok(())
}

pub fn read_task_groups<R: Read>(r: &mut R) -> Result<Vec<TaskGroup>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != TASKS_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"PUDT\"")));
    }
    let version = read_u32(r)?;
    if version != TASKS_VERSION {
        return Err(Error::Format(format!("unsupported tasks version {version}")));
    }
    let count = read_u32(r)? as usize;
    if count > 1 << 24 {
        return Err(Error::Format("unreasonable group count".into()));
    }
    let mut groups = Vec::with_capacity(count);
    for _ in 0..count {
        let n_way = read_u32(r)? as usize;
        let mut class_map = Vec::with_capacity(n_way);
        for _ in 0..n_way {
            class_map.push(read_u32(r)?);
        }
        let ns = read_u32(r)? as usize;
        let c = read_u32(r)? as usize;
        let h = read_u32(r)? as usize;
        let w = read_u32(r)? as usize;
        let mut support_labels = Vec::with_capacity(ns);
        for _ in 0..ns {
            support_labels.push(read_u32(r)?);
        }
        let support = read_f32_vec(r, ns * c * h * w)?;
        let nq = read_u32(r)? as usize;
        let mut query_labels = Vec::with_capacity(nq);
        for _ in 0..nq {
            query_labels.push(read_u32(r)?);
        }
        let query = read_f32_vec(r, nq * c * h * w)?;
        let g = TaskGroup {
            support_images: Tensor::new(vec![ns, c, h, w], support)?,
            support_labels,
            query_images: Tensor::new(vec![nq, c, h, w], query)?,
            query_labels,
            class_map,
        };
        if g.support_labels.iter().chain(&g.query_labels).any(|&l| l as usize >= n_way) {
            return Err(Error::Format("task group label outside its class set".into()));
        }
        groups.push(g);
    }
    Ok(groups)
}

pub fn save_task_groups(groups: &[TaskGroup], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_task_groups(&mut f, groups)
}

pub fn load_task_groups(path: &Path) -> Result<Vec<TaskGroup>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_task_groups(&mut f)
}


/// Nearest-class-mean classification accuracy in raw pixel space,
/// train/eval split by alternating sample parity.
pub fn nearest_class_mean_accuracy(corpus: &ImageCorpus) -> f64 {
    let dim = corpus.images.len() / corpus.n();
    let mut means = vec![vec![0.0f64; dim]; corpus.n_classes()];
    let mut counts = vec![0usize; corpus.n_classes()];
    for (i, &l) in corpus.labels.iter().enumerate() {
        if i % 2 == 0 {
            for (m, &v) in means[l as usize].iter_mut().zip(&corpus.images.data()[i * dim..(i + 1) * dim]) {
                *m += v as f64;
            }
            counts[l as usize] += 1;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        for v in m.iter_mut() {
            *v /= c.max(1) as f64;
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, &l) in corpus.labels.iter().enumerate() {
        if i % 2 == 1 {
            let x = &corpus.images.data()[i * dim..(i + 1) * dim];
            let mut best = (f64::INFINITY, 0usize);
            for (k, m) in means.iter().enumerate() {
                let d: f64 = x.iter().zip(m).map(|(&a, &b)| (a as f64 - b) * (a as f64 - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            if best.1 == l as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}
