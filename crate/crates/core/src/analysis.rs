//! Dataset/parameter correlation analysis: sample many sub-datasets, train
//! the target net from scratch on each, and measure canonical correlations
//! between dataset representations and the resulting parameters, against a
//! random-parameter control.

use crate::data::ImageCorpus;
use crate::error::{Error, Result};
use crate::rng;
use crate::targetnet::{ParamSet, TargetSpec};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub const CCA_RIDGE: f64 = 1e-6;
/// Input pooling grid for the dataset representation.
pub const POOL_GRID: usize = 4;
/// Random-projection width for flattened parameter vectors.
pub const PARAM_PROJ_DIM: usize = 8;

/// Plain row-major f64 matrix for the analysis pipeline.
#[derive(Clone, Debug)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn center_columns(&self) -> Matrix {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, &v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= self.rows as f64;
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] -= means[c];
            }
        }
        out
    }

    /// Apply a row permutation (the control that destroys pairing).
    pub fn permuted_rows(&self, seed: u64) -> Matrix {
        let mut order: Vec<usize> = (0..self.rows).collect();
        order.shuffle(&mut rng::stream(seed, "cca/permutation"));
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (dst, &src) in order.iter().enumerate() {
            out.data[dst * self.cols..(dst + 1) * self.cols].copy_from_slice(self.row(src));
        }
        out
    }
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows);
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for p in 0..a.cols {
            let av = a.data[i * a.cols + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                c.data[i * b.cols + j] += av * b.data[p * b.cols + j];
            }
        }
    }
    c
}

fn transpose(a: &Matrix) -> Matrix {
    let mut t = Matrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            t.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    t
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), descending by eigenvalue.
pub fn eigh_symmetric(a: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j].abs();
            }
        }
        if off < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m[i * n + i], i)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let eigenvalues: Vec<f64> = pairs.iter().map(|&(l, _)| l).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &(_, old_col)) in pairs.iter().enumerate() {
        for k in 0..n {
            vectors.data[k * n + new_col] = v[k * n + old_col];
        }
    }
    (eigenvalues, vectors)
}

/// Inverse square root of a symmetric positive (semi-)definite matrix.
fn inv_sqrt_sym(a: &Matrix) -> Matrix {
    let n = a.rows;
    let (vals, vecs) = eigh_symmetric(a);
    let mut scaled = Matrix::zeros(n, n);
    for j in 0..n {
        let inv = 1.0 / vals[j].max(CCA_RIDGE).sqrt();
        for i in 0..n {
            scaled.data[i * n + j] = vecs.data[i * n + j] * inv;
        }
    }
    matmul(&scaled, &transpose(&vecs))
}

/// Canonical correlations, descending, clipped to [0, 1].
#[derive(Clone, Debug)]
pub struct CcaResult {
    pub correlations: Vec<f64>,
    pub rows: usize,
    pub dx: usize,
    pub dy: usize,
}

impl CcaResult {
    pub fn mean(&self) -> f64 {
        if self.correlations.is_empty() {
            return 0.0;
        }
        self.correlations.iter().sum::<f64>() / self.correlations.len() as f64
    }
}

/// Canonical correlation analysis by whitening both sides and taking the
/// singular values of the whitened cross-covariance. A small ridge keeps
/// the covariances invertible.
pub fn cca(x: &Matrix, y: &Matrix) -> Result<CcaResult> {
    if x.rows != y.rows {
        return Err(Error::Dim(format!("CCA rows {} vs {}", x.rows, y.rows)));
    }
    let n = x.rows;
    if n < x.cols + 2 || n < y.cols + 2 {
        return Err(Error::Config(format!(
            "CCA needs rows >= dims + 2: {n} rows for dx={} dy={}",
            x.cols, y.cols
        )));
    }
    let xc = x.center_columns();
    let yc = y.center_columns();
    let denom = (n - 1) as f64;
    let scale = |m: Matrix| -> Matrix {
        let mut m = m;
        for v in &mut m.data {
            *v /= denom;
        }
        m
    };
    let mut cxx = scale(matmul(&transpose(&xc), &xc));
    let mut cyy = scale(matmul(&transpose(&yc), &yc));
    for i in 0..cxx.rows {
        cxx.data[i * cxx.cols + i] += CCA_RIDGE;
    }
    for i in 0..cyy.rows {
        cyy.data[i * cyy.cols + i] += CCA_RIDGE;
    }
    let cxy = scale(matmul(&transpose(&xc), &yc));
    let wx = inv_sqrt_sym(&cxx);
    let wy = inv_sqrt_sym(&cyy);
    let m = matmul(&matmul(&wx, &cxy), &wy);
    // singular values via the spectrum of M^T M
    let mtm = matmul(&transpose(&m), &m);
    let (vals, _) = eigh_symmetric(&mtm);
    let k = x.cols.min(y.cols);
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("CCA spectrum is not finite".into()));
    }
    let correlations: Vec<f64> =
        vals.iter().take(k).map(|&l| l.max(0.0).sqrt().clamp(0.0, 1.0)).collect();
    Ok(CcaResult { correlations, rows: n, dx: x.cols, dy: y.cols })
}

/// Average-pool an image corpus subset into the dataset representation row:
/// all subset images averaged, pooled onto a POOL_GRID x POOL_GRID grid per
/// channel, flattened.
fn dataset_representation(corpus: &ImageCorpus, subset: &[usize]) -> Vec<f64> {
    let (c, h, w) = corpus.image_dims();
    let dim = c * h * w;
    let mut mean = vec![0.0f64; dim];
    for &i in subset {
        for (m, &v) in mean.iter_mut().zip(&corpus.images.data()[i * dim..(i + 1) * dim]) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= subset.len() as f64;
    }
    let mut row = vec![0.0f64; c * POOL_GRID * POOL_GRID];
    for ch in 0..c {
        for gy in 0..POOL_GRID {
            for gx in 0..POOL_GRID {
                let y0 = gy * h / POOL_GRID;
                let y1 = ((gy + 1) * h / POOL_GRID).max(y0 + 1);
                let x0 = gx * w / POOL_GRID;
                let x1 = ((gx + 1) * w / POOL_GRID).max(x0 + 1);
                let mut acc = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += mean[ch * h * w + yy * w + xx];
                    }
                }
                row[(ch * POOL_GRID + gy) * POOL_GRID + gx] =
                    acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    row
}

/// Fixed Gaussian random projection of a flattened parameter vector.
struct ParamProjection {
    weights: Vec<f64>, // [PARAM_PROJ_DIM, total_params]
    total: usize,
}

impl ParamProjection {
    fn new(total: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "cca/projection");
        let normal = Normal::new(0.0, 1.0 / (total as f64).sqrt()).unwrap();
        let weights = (0..PARAM_PROJ_DIM * total).map(|_| normal.sample(&mut r)).collect();
        ParamProjection { weights, total }
    }

    fn project(&self, params: &ParamSet<f32>) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.total);
        for t in &params.tensors {
            flat.extend(t.data().iter().map(|&v| v as f64));
        }
        assert_eq!(flat.len(), self.total);
        (0..PARAM_PROJ_DIM)
            .map(|k| {
                self.weights[k * self.total..(k + 1) * self.total]
                    .iter()
                    .zip(&flat)
                    .map(|(&w, &v)| w * v)
                    .sum()
            })
            .collect()
    }
}

/// Train the target net from scratch on a labeled image set with the metric
/// loss and return the learned kernels.
pub fn train_scratch_params(
    spec: &TargetSpec,
    images: &Tensor<f32>,
    labels: &[u32],
    n_way: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ParamSet<f32>> {
    use crate::losses::{centroids_from_embeddings, metric_logits_from};
    use crate::tape::Tape;
    use crate::targetnet::bind;
    use crate::train::{clip_grad_norm, Adam};

    let mut params = ParamSet::<f32>::random_init(spec, seed);
    let mut opt = Adam::<f32>::new(lr);
    let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let shots = labels.iter().filter(|&&l| l == 0).count().max(1);
    let tau = Tensor::scalar(10.0f32);
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.tensors.iter().map(|t| tape.leaf(t)).collect();
        let x = tape.constant(images.clone());
        let net = bind(&tape, spec, vars.clone())?;
        let emb = net.embed(&mut tape, x)?;
        let shots_here = shots.min(labels.len() / n_way.max(1)).max(1);
        let cents = centroids_from_embeddings(&mut tape, emb, labels, n_way, shots_here)?;
        let tau_var = tape.constant(tau.clone());
        let logits = metric_logits_from(&mut tape, emb, &cents, tau_var)?;
        let loss = tape.softmax_cross_entropy(logits, &labels_usize)?;
        let grads = tape.backward(loss)?;
        let mut refs: Vec<&mut Tensor<f32>> = params.tensors.iter_mut().collect();
        for (t, &v) in refs.iter_mut().zip(&vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
        clip_grad_norm(&mut refs, 10.0);
        opt.step(&mut refs);
    }
    Ok(params)
}

#[derive(Clone, Debug)]
pub struct CcaConfig {
    pub reps: usize,
    pub subset_size: usize,
    pub subset_classes: usize,
    pub train_epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CcaConfig {
    fn default() -> Self {
        CcaConfig { reps: 100, subset_size: 200, subset_classes: 4, train_epochs: 10, lr: 3e-3, seed: 0 }
    }
}

/// Draw one class-skewed subset of sample indices.
fn draw_subset(corpus: &ImageCorpus, cfg: &CcaConfig, rep: usize) -> Vec<usize> {
    let mut r = rng::stream(cfg.seed, &format!("cca/subset/{rep}"));
    let by_class = corpus.indices_by_class();
    let mut classes: Vec<usize> = (0..corpus.n_classes()).collect();
    classes.shuffle(&mut r);
    classes.truncate(cfg.subset_classes.min(corpus.n_classes()));
    let per = (cfg.subset_size / classes.len()).max(1);
    let mut subset = Vec::with_capacity(per * classes.len());
    for &cl in &classes {
        let mut members = by_class[cl].clone();
        members.shuffle(&mut r);
        members.truncate(per.min(members.len()));
        subset.extend(members);
    }
    subset
}

fn local_labels(corpus: &ImageCorpus, subset: &[usize]) -> (Vec<u32>, usize) {
    let mut classes: Vec<u32> = subset.iter().map(|&i| corpus.labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    let labels = subset
        .iter()
        .map(|&i| classes.iter().position(|&c| c == corpus.labels[i]).unwrap() as u32)
        .collect();
    (labels, classes.len())
}

/// Collect paired rows: X = pooled-pixel dataset representations, Y =
/// projected parameters of nets trained from scratch on each subset.
pub fn collect_pairs(
    corpus: &ImageCorpus,
    spec: &TargetSpec,
    cfg: &CcaConfig,
) -> Result<(Matrix, Matrix)> {
    let (c, _, _) = corpus.image_dims();
    let dx = c * POOL_GRID * POOL_GRID;
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    if cfg.reps < dx + 2 || cfg.reps < PARAM_PROJ_DIM + 2 {
        return Err(Error::Config(format!(
            "{} reps insufficient for CCA with dx={dx}, dy={PARAM_PROJ_DIM}",
            cfg.reps
        )));
    }
    let projection = ParamProjection::new(spec.param_count(), cfg.seed);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let subset = draw_subset(corpus, cfg, rep);
            let xrow = dataset_representation(corpus, &subset);
            let (labels, n_way) = local_labels(corpus, &subset);
            let images = corpus.gather(&subset);
            let params = train_scratch_params(
                spec,
                &images,
                &labels,
                n_way,
                cfg.train_epochs,
                cfg.lr,
                cfg.seed.wrapping_add(1000 + rep as u64),
            )
            .expect("scratch training in CCA rep");
            let yrow = projection.project(&params);
            (xrow, yrow)
        })
        .collect();
    let mut x = Matrix::zeros(cfg.reps, dx);
    let mut y = Matrix::zeros(cfg.reps, PARAM_PROJ_DIM);
    for (r, (xr, yr)) in rows.into_iter().enumerate() {
        x.data[r * dx..(r + 1) * dx].copy_from_slice(&xr);
        y.data[r * PARAM_PROJ_DIM..(r + 1) * PARAM_PROJ_DIM].copy_from_slice(&yr);
    }
    Ok((x, y))
}

/// Same X; Y from trained nets vs freshly initialized nets.
pub fn learned_vs_random(
    corpus: &ImageCorpus,
    spec: &TargetSpec,
    cfg: &CcaConfig,
) -> Result<(CcaResult, CcaResult)> {
    let (x, y_learned) = collect_pairs(corpus, spec, cfg)?;
    let projection = ParamProjection::new(spec.param_count(), cfg.seed);
    let mut y_random = Matrix::zeros(cfg.reps, PARAM_PROJ_DIM);
    for rep in 0..cfg.reps {
        let params =
            ParamSet::<f32>::random_init(spec, cfg.seed.wrapping_add(5000 + rep as u64));
        let row = projection.project(&params);
        y_random.data[rep * PARAM_PROJ_DIM..(rep + 1) * PARAM_PROJ_DIM].copy_from_slice(&row);
    }
    let learned = cca(&x, &y_learned)?;
    let random = cca(&x, &y_random)?;
    Ok((learned, random))
}
