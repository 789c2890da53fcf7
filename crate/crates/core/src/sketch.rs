//! Dataset compression: a small conv feature extractor and the mean-pooled
//! dataset sketch, plus the clustering variant for imbalanced data.

use crate::data::TaskGroup;
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Smallest image side the extractor accepts; three stride-2 blocks reduce
/// 8x8 to 1x1 before global average pooling.
pub const MIN_IMAGE_SIDE: usize = 8;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with this batch's statistics (and report them).
    Train,
    /// Normalize with stored running averages.
    Eval,
}

/// The learnable feature extractor: three blocks of
/// 5x5 conv (stride 2) -> leaky relu -> batch norm, then global average
/// pooling down to the sketch dimension.
#[derive(Clone, Debug)]
pub struct SketchExtractor<T: Scalar> {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub conv_w: Vec<Tensor<T>>,
    pub bn_gamma: Vec<Tensor<T>>,
    pub bn_beta: Vec<Tensor<T>>,
    pub running_mean: Vec<Vec<T>>,
    pub running_var: Vec<Vec<T>>,
}

/// Tape handles for the extractor's learnable tensors.
pub struct ExtractorVars {
    pub conv_w: Vec<Var>,
    pub bn_gamma: Vec<Var>,
    pub bn_beta: Vec<Var>,
}

impl<T: Scalar> SketchExtractor<T> {
    pub fn new(in_channels: usize, channels: [usize; 3], seed: u64) -> Self {
        let mut r = rng::stream(seed, "init/t_phi");
        let mut conv_w = Vec::new();
        let mut prev = in_channels;
        for &cout in &channels {
            let fan_in = prev * 25;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<T> = (0..cout * prev * 25)
                .map(|_| T::from_f64_lit(r.gen_range(-bound..bound)))
                .collect();
            conv_w.push(
                Tensor::new(vec![cout, prev, 5, 5], data).expect("init shapes valid").with_grad(),
            );
            prev = cout;
        }
        let bn_gamma = channels
            .iter()
            .map(|&c| Tensor::new(vec![c], vec![T::one(); c]).unwrap().with_grad())
            .collect();
        let bn_beta = channels
            .iter()
            .map(|&c| Tensor::new(vec![c], vec![T::zero(); c]).unwrap().with_grad())
            .collect();
        let running_mean = channels.iter().map(|&c| vec![T::zero(); c]).collect();
        let running_var = channels.iter().map(|&c| vec![T::one(); c]).collect();
        SketchExtractor { in_channels, channels, conv_w, bn_gamma, bn_beta, running_mean, running_var }
    }

    /// Sketch dimension: channel count of the last block.
    pub fn m(&self) -> usize {
        self.channels[2]
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ExtractorVars {
        ExtractorVars {
            conv_w: self.conv_w.iter().map(|t| tape.leaf(t)).collect(),
            bn_gamma: self.bn_gamma.iter().map(|t| tape.leaf(t)).collect(),
            bn_beta: self.bn_beta.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Per-sample features [N, m]. In train mode the returned stats must be
    /// folded into the running averages by the parameter owner.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &ExtractorVars,
        images: Var,
        mode: BnMode,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Dim(format!(
                "extractor expects [N,{},H,W], got {s:?}",
                self.in_channels
            )));
        }
        if s[2] < MIN_IMAGE_SIDE || s[3] < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "image {}x{} below extractor minimum {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                s[2], s[3]
            )));
        }
        let eps = T::from_f64_lit(BN_EPS);
        let slope = T::from_f64_lit(LEAKY_SLOPE);
        let mut x = images;
        let mut all_stats = Vec::new();
        for i in 0..3 {
            let c = tape.conv2d(x, vars.conv_w[i], 2, 2)?;
            let a = tape.leaky_relu(c, slope);
            x = match mode {
                BnMode::Train => {
                    let (y, stats) =
                        tape.batch_norm_train(a, vars.bn_gamma[i], vars.bn_beta[i], eps)?;
                    all_stats.push(stats);
                    y
                }
                BnMode::Eval => tape.batch_norm_eval(
                    a,
                    vars.bn_gamma[i],
                    vars.bn_beta[i],
                    &self.running_mean[i],
                    &self.running_var[i],
                    eps,
                )?,
            };
        }
        let feats = tape.global_avg_pool(x)?;
        Ok((feats, all_stats))
    }

    /// Fold one step of batch statistics into the running averages
    /// (momentum 0.9).
    pub fn apply_bn_updates(&mut self, stats: &[BatchStats<T>]) {
        let mom = T::from_f64_lit(BN_MOMENTUM);
        let one_minus = T::one() - mom;
        for (i, st) in stats.iter().enumerate() {
            for (r, &b) in self.running_mean[i].iter_mut().zip(&st.mean) {
                *r = *r * mom + b * one_minus;
            }
            for (r, &b) in self.running_var[i].iter_mut().zip(&st.var) {
                *r = *r * mom + b * one_minus;
            }
        }
    }
}

/// Mean of per-sample extractor features over the support set: the dataset
/// sketch, differentiable w.r.t. the extractor parameters.
pub fn compute_sketch<T: Scalar>(
    tape: &mut Tape<T>,
    ext: &SketchExtractor<T>,
    vars: &ExtractorVars,
    support: Var,
    mode: BnMode,
) -> Result<(Var, Vec<BatchStats<T>>)> {
    if tape.shape(support)[0] == 0 {
        return Err(Error::Config("empty support set".into()));
    }
    let (feats, stats) = ext.forward(tape, vars, support, mode)?;
    let sketch = tape.mean_axis(feats, 0)?;
    Ok((sketch, stats))
}

/// Clustering sketch for imbalanced class distributions: k-means per class
/// on extractor features, then the mean over all classes' centroid means so
/// every class contributes equally. Not differentiable; inference only.
pub fn compute_sketch_clustered<T: Scalar>(
    ext: &SketchExtractor<T>,
    group: &TaskGroup,
    k_per_class: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    if k_per_class == 0 {
        return Err(Error::Config("k_per_class must be positive".into()));
    }
    let mut tape = Tape::no_grad();
    let vars = ext.register(&mut tape);
    let imgs = tape.constant(group.support_images.cast::<T>());
    let (feats, _) = ext.forward(&mut tape, &vars, imgs, BnMode::Eval)?;
    let m = ext.m();
    let fd = tape.value(feats).data();

    let by_class = group.support_by_class();
    let mut class_means = Vec::with_capacity(by_class.len());
    for (local, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::Config(format!("class {local} has no support samples")));
        }
        let points: Vec<Vec<T>> =
            rows.iter().map(|&r| fd[r * m..(r + 1) * m].to_vec()).collect();
        let k = k_per_class.min(points.len());
        let centroids = kmeans(&points, k, 10, rng::stream(seed, &format!("kmeans/{local}")));
        // mean of this class's centroids
        let mut mean = vec![T::zero(); m];
        for c in &centroids {
            for (o, &v) in mean.iter_mut().zip(c) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_f64_lit(centroids.len() as f64);
        for v in &mut mean {
            *v *= inv;
        }
        class_means.push(mean);
    }
    let mut sketch = vec![T::zero(); m];
    for cm in &class_means {
        for (o, &v) in sketch.iter_mut().zip(cm) {
            *o += v;
        }
    }
    let inv = T::one() / T::from_f64_lit(class_means.len() as f64);
    for v in &mut sketch {
        *v *= inv;
    }
    Tensor::new(vec![m], sketch)
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans<T: Scalar>(
    points: &[Vec<T>],
    k: usize,
    iters: usize,
    mut r: impl Rng,
) -> Vec<Vec<T>> {
    assert!(k >= 1 && k <= points.len());
    let dim = points[0].len();
    let d2 = |a: &[T], b: &[T]| -> T {
        let mut s = T::zero();
        for (&x, &y) in a.iter().zip(b) {
            s += (x - y) * (x - y);
        }
        s
    };

    // k-means++ seeding
    let mut centroids: Vec<Vec<T>> = Vec::with_capacity(k);
    centroids.push(points[r.gen_range(0..points.len())].clone());
    while centroids.len() < k {
        let dists: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| d2(p, c).to_f64_lit())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        if total <= 0.0 {
            // all points coincide with existing centroids
            centroids.push(points[r.gen_range(0..points.len())].clone());
            continue;
        }
        let mut target = r.gen_range(0.0..total);
        let mut chosen = points.len() - 1;
        for (i, &d) in dists.iter().enumerate() {
            if target < d {
                chosen = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[chosen].clone());
    }

    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        for (i, p) in points.iter().enumerate() {
            let mut best = (T::infinity(), 0usize);
            for (j, c) in centroids.iter().enumerate() {
                let d = d2(p, c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (j, (sum, &count)) in sums.iter().zip(&counts).enumerate() {
            if count > 0 {
                let inv = T::one() / T::from_f64_lit(count as f64);
                for (c, &s) in centroids[j].iter_mut().zip(sum) {
                    *c = s * inv;
                }
            }
        }
    }
    centroids
}
