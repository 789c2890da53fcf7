//! Inference and evaluation: predict parameters for an unseen task in one
//! forward pass, the from-scratch Adam baseline, and the accuracy/time
//! comparison between them.

use crate::data::TaskGroup;
use crate::error::{Error, Result};
use crate::hypernet::{predict_params, PudNetParams};
use crate::losses::centroids_from_embeddings;
use crate::sketch::{compute_sketch, BnMode};
use crate::tape::Tape;
use crate::targetnet::{bind, ParamSet, TargetSpec};
use crate::tensor::{Scalar, Tensor};
use crate::train::{clip_grad_norm, Adam};
use std::time::Instant;

/// Argmax cosine-to-centroid classification accuracy.
fn cosine_argmax_accuracy<T: Scalar>(
    embeddings: &[T],
    centroids: &[T],
    dim: usize,
    n_way: usize,
    labels: &[u32],
) -> f64 {
    let norms_c: Vec<f64> = (0..n_way)
        .map(|k| {
            centroids[k * dim..(k + 1) * dim]
                .iter()
                .map(|&v| v.to_f64_lit().powi(2))
                .sum::<f64>()
                .sqrt()
                + 1e-8
        })
        .collect();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let e = &embeddings[i * dim..(i + 1) * dim];
        let ne = e.iter().map(|&v| v.to_f64_lit().powi(2)).sum::<f64>().sqrt() + 1e-8;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for k in 0..n_way {
            let c = &centroids[k * dim..(k + 1) * dim];
            let dot: f64 =
                e.iter().zip(c).map(|(&a, &b)| a.to_f64_lit() * b.to_f64_lit()).sum();
            let cos = dot / (ne * norms_c[k]);
            if cos > best.0 {
                best = (cos, k);
            }
        }
        if best.1 == label as usize {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Predict parameters for an unseen task and classify its query set by
/// cosine similarity to support centroids. Returns (accuracy, seconds spent
/// producing the parameters, including the sketch).
pub fn predict_and_eval<T: Scalar>(
    pud: &PudNetParams<T>,
    spec: &TargetSpec,
    group: &TaskGroup,
    shots: usize,
) -> Result<(f64, f64)> {
    let mut tape = Tape::no_grad();
    let vars = pud.register(&mut tape);
    let support = tape.constant(group.support_images.cast::<T>());

    let t0 = Instant::now();
    let (sketch, _) =
        compute_sketch(&mut tape, &pud.extractor, &vars.extractor, support, BnMode::Eval)?;
    let predicted = predict_params(&mut tape, pud, &vars, spec, sketch)?;
    let predict_seconds = t0.elapsed().as_secs_f64();
    assert_eq!(tape.recorded_ops(), 0, "inference must not record gradient ops");

    let net = bind(&tape, spec, predicted.layers)?;
    let sup_emb = net.embed(&mut tape, support)?;
    let cents = centroids_from_embeddings(
        &mut tape,
        sup_emb,
        &group.support_labels,
        group.n_way(),
        shots,
    )?;
    let query = tape.constant(group.query_images.cast::<T>());
    let q_emb = net.embed(&mut tape, query)?;
    let acc = cosine_argmax_accuracy(
        tape.value(q_emb).data(),
        tape.value(cents.var).data(),
        spec.embedding_dim,
        group.n_way(),
        &group.query_labels,
    );
    Ok((acc, predict_seconds))
}

/// `predict_and_eval` with the clustering sketch (k-means centroids per
/// class) in place of the plain mean sketch.
pub fn predict_and_eval_clustered<T: Scalar>(
    pud: &PudNetParams<T>,
    spec: &TargetSpec,
    group: &TaskGroup,
    shots: usize,
    k_per_class: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let t0 = Instant::now();
    let sketch_t = crate::sketch::compute_sketch_clustered(&pud.extractor, group, k_per_class, seed)?;
    let mut tape = Tape::no_grad();
    let vars = pud.register(&mut tape);
    let sketch = tape.constant(sketch_t);
    let predicted = predict_params(&mut tape, pud, &vars, spec, sketch)?;
    let predict_seconds = t0.elapsed().as_secs_f64();
    assert_eq!(tape.recorded_ops(), 0, "inference must not record gradient ops");

    let net = bind(&tape, spec, predicted.layers)?;
    let support = tape.constant(group.support_images.cast::<T>());
    let sup_emb = net.embed(&mut tape, support)?;
    let cents = centroids_from_embeddings(
        &mut tape,
        sup_emb,
        &group.support_labels,
        group.n_way(),
        shots,
    )?;
    let query = tape.constant(group.query_images.cast::<T>());
    let q_emb = net.embed(&mut tape, query)?;
    let acc = cosine_argmax_accuracy(
        tape.value(q_emb).data(),
        tape.value(cents.var).data(),
        spec.embedding_dim,
        group.n_way(),
        &group.query_labels,
    );
    Ok((acc, predict_seconds))
}

/// Train a randomly initialized parameter set on the task's support split
/// with the metric loss (centroids recomputed every epoch), then evaluate on
/// the query split. Returns (accuracy, training seconds).
pub fn baseline_scratch(
    spec: &TargetSpec,
    group: &TaskGroup,
    epochs: usize,
    lr: f64,
    shots: usize,
    tau: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if epochs == 0 {
        return Err(Error::Precondition("baseline needs at least one epoch".into()));
    }
    let mut params = ParamSet::<f32>::random_init(spec, seed);
    let mut opt = Adam::<f32>::new(lr);
    let labels_usize: Vec<usize> = group.support_labels.iter().map(|&l| l as usize).collect();
    let tau_t = Tensor::scalar(tau as f32);

    let t0 = Instant::now();
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.tensors.iter().map(|t| tape.leaf(t)).collect();
        let support = tape.constant(group.support_images.clone());
        let net = bind(&tape, spec, vars.clone())?;
        let emb = net.embed(&mut tape, support)?;
        let cents = centroids_from_embeddings(
            &mut tape,
            emb,
            &group.support_labels,
            group.n_way(),
            shots,
        )?;
        let tau_var = tape.constant(tau_t.clone());
        let logits = crate::losses::metric_logits_from(&mut tape, emb, &cents, tau_var)?;
        let loss = tape.softmax_cross_entropy(logits, &labels_usize)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::Numeric("baseline loss diverged".into()));
        }
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
    let train_seconds = t0.elapsed().as_secs_f64();

    // evaluate on the query split
    let mut tape = Tape::no_grad();
    let net = crate::targetnet::inject(&mut tape, spec, &params)?;
    let support = tape.constant(group.support_images.clone());
    let sup_emb = net.embed(&mut tape, support)?;
    let cents = centroids_from_embeddings(
        &mut tape,
        sup_emb,
        &group.support_labels,
        group.n_way(),
        shots,
    )?;
    let query = tape.constant(group.query_images.clone());
    let q_emb = net.embed(&mut tape, query)?;
    let acc = cosine_argmax_accuracy(
        tape.value(q_emb).data(),
        tape.value(cents.var).data(),
        spec.embedding_dim,
        group.n_way(),
        &group.query_labels,
    );
    Ok((acc, train_seconds))
}

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub method: String,
    pub epochs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub seconds: f64,
}

/// Accuracy and wall-time table: one row for single-forward prediction,
/// one per baseline epoch budget.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,epochs,acc_mean,acc_std,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.method, r.epochs, r.acc_mean, r.acc_std, r.seconds
            ));
        }
        out
    }

    pub fn pudnet_row(&self) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == "pudnet")
    }

    pub fn baseline_row(&self, epochs: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == "adam_scratch" && r.epochs == epochs)
    }

    /// Mean baseline seconds over mean prediction seconds.
    pub fn speedup(&self, epochs: usize) -> Option<f64> {
        let p = self.pudnet_row()?;
        let b = self.baseline_row(epochs)?;
        if p.seconds > 0.0 {
            Some(b.seconds / p.seconds)
        } else {
            None
        }
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluate prediction and the from-scratch baseline over a task list.
/// Rows: one for prediction plus one per entry of `epochs_list`.
pub fn compare<T: Scalar>(
    pud: &PudNetParams<T>,
    spec: &TargetSpec,
    tasks: &[TaskGroup],
    epochs_list: &[usize],
    shots: usize,
    baseline_lr: f64,
    tau: f64,
    seed: u64,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to evaluate".into()));
    }
    let mut accs = Vec::with_capacity(tasks.len());
    let mut times = Vec::with_capacity(tasks.len());
    for group in tasks {
        let (a, t) = predict_and_eval(pud, spec, group, shots)?;
        accs.push(a);
        times.push(t);
    }
    let (acc_mean, acc_std) = mean_std(&accs);
    let (sec_mean, _) = mean_std(&times);
    let mut report = EvalReport::default();
    report.rows.push(ReportRow {
        method: "pudnet".into(),
        epochs: 0,
        acc_mean,
        acc_std,
        seconds: sec_mean,
    });
    for &epochs in epochs_list {
        let mut accs = Vec::with_capacity(tasks.len());
        let mut times = Vec::with_capacity(tasks.len());
        for (i, group) in tasks.iter().enumerate() {
            let (a, t) = baseline_scratch(
                spec,
                group,
                epochs,
                baseline_lr,
                shots,
                tau,
                seed.wrapping_add(i as u64),
            )?;
            accs.push(a);
            times.push(t);
        }
        let (acc_mean, acc_std) = mean_std(&accs);
        let (sec_mean, _) = mean_std(&times);
        report.rows.push(ReportRow {
            method: "adam_scratch".into(),
            epochs,
            acc_mean,
            acc_std,
            seconds: sec_mean,
        });
    }
    Ok(report)
}

/// Run a closure inside a one-thread rayon pool so wall-clock timing is not
/// affected by parallel scheduling.
pub fn run_single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool")
        .install(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_corpus, sample_task_groups, PatternFamily};
    use crate::hypernet::HypernetConfig;
    use crate::targetnet::convnet3_spec;

    fn setup(n_query: usize) -> (PudNetParams<f32>, TargetSpec, Vec<TaskGroup>) {
        let corpus =
            make_synthetic_corpus(6, 2 * (4 + n_query), (1, 16, 16), PatternFamily::Gratings, 3)
                .unwrap();
        let tasks = sample_task_groups(&corpus, 4, 4, n_query, 6, 11).unwrap();
        let spec = convnet3_spec(1, 8, 8).unwrap();
        let hp = HypernetConfig {
            m: 12,
            p: 4,
            p_mid: 4,
            extractor_channels: [6, 8],
            ..Default::default()
        };
        let pud = PudNetParams::<f32>::new(&hp, &spec, 1, 8).unwrap();
        (pud, spec, tasks)
    }

    #[test]
    fn untrained_prediction_is_near_chance() {
        let corpus =
            make_synthetic_corpus(6, 24, (1, 16, 16), PatternFamily::Gratings, 5).unwrap();
        let tasks = sample_task_groups(&corpus, 4, 4, 8, 50, 13).unwrap();
        let spec = convnet3_spec(1, 8, 8).unwrap();
        let hp = HypernetConfig {
            m: 12,
            p: 4,
            p_mid: 4,
            extractor_channels: [6, 8],
            ..Default::default()
        };
        let pud = PudNetParams::<f32>::new(&hp, &spec, 1, 8).unwrap();
        let mut accs = Vec::new();
        for g in &tasks {
            let (a, _) = predict_and_eval(&pud, &spec, g, 4).unwrap();
            accs.push(a);
        }
        let (mean, _) = mean_std(&accs);
        assert!(
            (0.10..=0.40).contains(&mean),
            "untrained accuracy {mean} should sit near chance 0.25"
        );
    }

    #[test]
    fn zero_epoch_baseline_is_precondition_error() {
        let (_, spec, tasks) = setup(4);
        assert!(matches!(
            baseline_scratch(&spec, &tasks[0], 0, 1e-3, 4, 10.0, 1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn baseline_learns_separable_task() {
        let corpus = crate::data::testutil::easy_corpus(6, 24, 7);
        let tasks = sample_task_groups(&corpus, 4, 4, 8, 2, 11).unwrap();
        let spec = convnet3_spec(1, 8, 8).unwrap();
        let (acc1, _) = baseline_scratch(&spec, &tasks[0], 1, 5e-3, 4, 10.0, 2).unwrap();
        let (acc30, _) = baseline_scratch(&spec, &tasks[0], 30, 5e-3, 4, 10.0, 2).unwrap();
        assert!(
            acc30 >= acc1.max(0.9),
            "30-epoch baseline acc {acc30} should reach 0.9 and beat 1-epoch {acc1}"
        );
    }

    #[test]
    fn baseline_time_grows_with_epochs() {
        let (_, spec, tasks) = setup(4);
        run_single_threaded(|| {
            let (_, t1) = baseline_scratch(&spec, &tasks[0], 1, 1e-3, 4, 10.0, 3).unwrap();
            let (_, t30) = baseline_scratch(&spec, &tasks[0], 30, 1e-3, 4, 10.0, 3).unwrap();
            let ratio = t30 / t1.max(1e-9);
            assert!(
                (15.0..=60.0).contains(&ratio),
                "epoch scaling ratio {ratio} outside sanity band"
            );
        });
    }

    #[test]
    fn predict_seconds_independent_of_query_size() {
        let (pud, spec, _) = setup(4);
        let corpus =
            make_synthetic_corpus(4, 300, (1, 16, 16), PatternFamily::Gratings, 9).unwrap();
        let small = sample_task_groups(&corpus, 4, 10, 3, 1, 21).unwrap().remove(0);
        let large = sample_task_groups(&corpus, 4, 10, 250, 1, 22).unwrap().remove(0);
        run_single_threaded(|| {
            // warm up allocator and caches
            let _ = predict_and_eval(&pud, &spec, &small, 4).unwrap();
            let mut t_small = f64::INFINITY;
            let mut t_large = f64::INFINITY;
            for _ in 0..5 {
                let (_, ts) = predict_and_eval(&pud, &spec, &small, 4).unwrap();
                let (_, tl) = predict_and_eval(&pud, &spec, &large, 4).unwrap();
                t_small = t_small.min(ts);
                t_large = t_large.min(tl);
            }
            let ratio = t_large / t_small;
            assert!(
                ratio < 1.5,
                "parameter prediction time ratio {ratio} depends on query size"
            );
        });
    }

    #[test]
    fn report_has_one_row_per_method() {
        let (pud, spec, tasks) = setup(4);
        let report = compare(&pud, &spec, &tasks[..3], &[1, 2], 4, 1e-3, 10.0, 7).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.pudnet_row().is_some());
        assert!(report.baseline_row(1).is_some());
        assert!(report.baseline_row(2).is_some());
        assert!(report.speedup(1).unwrap() > 0.0);
        let again = compare(&pud, &spec, &tasks[..3], &[1, 2], 4, 1e-3, 10.0, 7).unwrap();
        for (a, b) in report.rows.iter().zip(&again.rows) {
            assert_eq!(a.acc_mean, b.acc_mean);
        }
    }
}
