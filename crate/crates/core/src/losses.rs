//! Training losses: metric-based classification against class centroids,
//! the auxiliary full classification head over the global train-class set,
//! and the KL consistency term aligning the two predictive distributions.

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::targetnet::BoundNetwork;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Epsilon added inside the log for zero-padded metric probabilities.
pub const KL_PAD_EPS: f64 = 1e-8;
/// Tiny epsilon guarding log of the full-head probabilities (which can
/// underflow to exact zero in f32).
pub const KL_Q_EPS: f64 = 1e-12;

/// Per-class mean embeddings over the first `shots` support samples.
pub struct Centroids {
    pub var: Var,
    pub n_way: usize,
}

/// Auxiliary linear head over the whole train-class set. `global_classes`
/// maps each output column to a corpus class id.
#[derive(Clone, Debug)]
pub struct FullHead<T: Scalar> {
    pub w: Tensor<T>, // [emb, C]
    pub b: Tensor<T>, // [C]
    pub global_classes: Vec<u32>,
}

pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

impl<T: Scalar> FullHead<T> {
    pub fn new(embedding_dim: usize, global_classes: Vec<u32>, seed: u64) -> Self {
        let c = global_classes.len();
        let mut r = rng::stream(seed, "init/head");
        let bound = 1.0 / (embedding_dim as f64).sqrt();
        let data: Vec<T> =
            (0..embedding_dim * c).map(|_| T::from_f64_lit(r.gen_range(-bound..bound))).collect();
        FullHead {
            w: Tensor::new(vec![embedding_dim, c], data).unwrap().with_grad(),
            b: Tensor::new(vec![c], vec![T::zero(); c]).unwrap().with_grad(),
            global_classes,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.global_classes.len()
    }

    /// Head column of a corpus-global class id.
    pub fn column_of(&self, global: u32) -> Result<usize> {
        self.global_classes
            .iter()
            .position(|&g| g == global)
            .ok_or_else(|| Error::Index(format!("class {global} not in the train-class set")))
    }

    pub fn register(&self, tape: &mut Tape<T>) -> HeadVars {
        HeadVars { w: tape.leaf(&self.w), b: tape.leaf(&self.b) }
    }

    pub fn logits(&self, tape: &mut Tape<T>, vars: &HeadVars, embeddings: Var) -> Result<Var> {
        let pre = tape.matmul(embeddings, vars.w)?;
        tape.add_bias_cols(pre, vars.b)
    }
}

/// Mean embedding of the first `shots` support samples of each local class,
/// deterministic under the group's stored sample order.
pub fn compute_centroids<T: Scalar>(
    tape: &mut Tape<T>,
    net: &BoundNetwork,
    support: Var,
    support_labels: &[u32],
    n_way: usize,
    shots: usize,
) -> Result<Centroids> {
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let mut groups = vec![Vec::new(); n_way];
    for (i, &l) in support_labels.iter().enumerate() {
        let l = l as usize;
        if l >= n_way {
            return Err(Error::Index(format!("support label {l} outside 0..{n_way}")));
        }
        if groups[l].len() < shots {
            groups[l].push(i);
        }
    }
    for (k, g) in groups.iter().enumerate() {
        if g.len() < shots {
            return Err(Error::Config(format!(
                "class {k} has {} support samples, centroid needs {shots}",
                g.len()
            )));
        }
    }
    let emb = net.embed(tape, support)?;
    let var = tape.mean_rows_groups(emb, &groups)?;
    Ok(Centroids { var, n_way })
}

/// Same centroid computation from already-computed embeddings.
pub fn centroids_from_embeddings<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    support_labels: &[u32],
    n_way: usize,
    shots: usize,
) -> Result<Centroids> {
    let mut groups = vec![Vec::new(); n_way];
    for (i, &l) in support_labels.iter().enumerate() {
        if (l as usize) >= n_way {
            return Err(Error::Index(format!("support label {l} outside 0..{n_way}")));
        }
        if groups[l as usize].len() < shots {
            groups[l as usize].push(i);
        }
    }
    for (k, g) in groups.iter().enumerate() {
        if g.len() < shots {
            return Err(Error::Config(format!(
                "class {k} has {} support samples, centroid needs {shots}",
                g.len()
            )));
        }
    }
    let var = tape.mean_rows_groups(embeddings, &groups)?;
    Ok(Centroids { var, n_way })
}

/// Temperature-scaled cosine logits between embeddings and centroids.
pub fn metric_logits_from<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    centroids: &Centroids,
    tau: Var,
) -> Result<Var> {
    let tau_val = tape.value(tau).data()[0];
    if tau_val < T::zero() {
        return Err(Error::Config(format!("tau {tau_val} must be non-negative")));
    }
    let cos = tape.row_cosine(embeddings, centroids.var)?;
    tape.mul_scalar_var(cos, tau)
}

/// Embed `x` with the bound network and score it against the centroids.
pub fn metric_logits<T: Scalar>(
    tape: &mut Tape<T>,
    net: &BoundNetwork,
    centroids: &Centroids,
    x: Var,
    tau: Var,
) -> Result<Var> {
    let emb = net.embed(tape, x)?;
    metric_logits_from(tape, emb, centroids, tau)
}

/// Metric classification loss: cross-entropy of the temperature-scaled
/// cosine softmax against local labels, mean over the query batch.
pub fn loss_metric<T: Scalar>(
    tape: &mut Tape<T>,
    net: &BoundNetwork,
    centroids: &Centroids,
    query: Var,
    query_labels: &[u32],
    tau: Var,
) -> Result<Var> {
    let logits = metric_logits(tape, net, centroids, query, tau)?;
    let labels: Vec<usize> = query_labels.iter().map(|&l| l as usize).collect();
    tape.softmax_cross_entropy(logits, &labels)
}

/// Full-classification loss: cross-entropy of the linear head over the
/// global train-class set.
pub fn loss_full<T: Scalar>(
    tape: &mut Tape<T>,
    head: &FullHead<T>,
    hvars: &HeadVars,
    embeddings: Var,
    query_globals: &[u32],
) -> Result<Var> {
    let logits = head.logits(tape, hvars, embeddings)?;
    let labels: Vec<usize> =
        query_globals.iter().map(|&g| head.column_of(g)).collect::<Result<_>>()?;
    tape.softmax_cross_entropy(logits, &labels)
}

/// Consistency loss: KL(q || p~) where q is the full-head distribution and
/// p~ is the metric distribution zero-padded onto the global class columns.
/// `positions` maps each local class to its head column.
pub fn loss_consistency<T: Scalar>(
    tape: &mut Tape<T>,
    metric_probs: Var,
    full_probs: Var,
    positions: &[usize],
) -> Result<Var> {
    let sp = tape.shape(metric_probs).to_vec();
    let sq = tape.shape(full_probs).to_vec();
    if sp.len() != 2 || sq.len() != 2 || sp[0] != sq[0] || sp[1] != positions.len() {
        return Err(Error::Dim(format!(
            "loss_consistency: metric {sp:?}, full {sq:?}, {} positions",
            positions.len()
        )));
    }
    let tol = T::from_f64_lit(1e-5);
    for (name, v, width) in [("metric", metric_probs, sp[1]), ("full", full_probs, sq[1])] {
        let data = tape.value(v).data();
        for row in 0..sp[0] {
            let mut s = T::zero();
            for &p in &data[row * width..(row + 1) * width] {
                s += p;
            }
            if (s - T::one()).abs() > tol {
                return Err(Error::Contract(format!(
                    "{name} probabilities row {row} sums to {s}, not 1"
                )));
            }
        }
    }
    let padded = tape.pad_cols(metric_probs, positions, sq[1])?;
    let ln_q = tape.ln_eps(full_probs, T::from_f64_lit(KL_Q_EPS));
    let ln_p = tape.ln_eps(padded, T::from_f64_lit(KL_PAD_EPS));
    let diff = tape.sub(ln_q, ln_p)?;
    let terms = tape.mul(full_probs, diff)?;
    let row_kl = tape.sum_axis(terms, 1)?;
    Ok(tape.mean_all(row_kl))
}

/// Unweighted multi-task sum L1 + L2 + L3.
pub fn loss_total<T: Scalar>(tape: &mut Tape<T>, l1: Var, l2: Var, l3: Var) -> Result<Var> {
    let a = tape.add(l1, l2)?;
    tape.add(a, l3)
}
