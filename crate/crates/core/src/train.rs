//! Meta-training: iterate sampled task groups, predict parameters from each
//! task's sketch, score the query batch, and update the hypernetwork and
//! the auxiliary head jointly with Adam.
//!
//! The task/batch schedule is a pure function of (seed, epoch), so resuming
//! from a checkpoint replays the identical sequence.

use crate::data::TaskGroup;
use crate::error::{Error, Result};
use crate::hypernet::{predict_params, PudNetParams, PudNetVars};
use crate::losses::{
    centroids_from_embeddings, loss_consistency, loss_total, metric_logits_from, FullHead,
    HeadVars,
};
use crate::rng;
use crate::sketch::{compute_sketch, BnMode};
use crate::tape::{Tape, Var};
use crate::targetnet::{bind, TargetSpec};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use std::path::Path;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; stops mid-epoch when reached.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub shots: usize,
    pub clip_norm: f64,
    pub checkpoint_every: Option<usize>,
    /// Train with the metric loss only (no head, no consistency).
    pub metric_only: bool,
    /// Keep the full head but drop the consistency term.
    pub no_kl: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 120,
            epochs: 4,
            max_steps: None,
            seed: 0,
            shots: 10,
            clip_norm: 10.0,
            checkpoint_every: None,
            metric_only: false,
            no_kl: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be positive".into()));
        }
        if self.metric_only && self.no_kl {
            return Err(Error::Config(
                "metric_only already drops the consistency term; do not also set no_kl".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: usize,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: T::from_f64_lit(lr),
            beta1: T::from_f64_lit(0.9),
            beta2: T::from_f64_lit(0.999),
            eps: T::from_f64_lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over the parameter list; tensors without a gradient are
    /// treated as zero-gradient. Gradients are consumed.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state mismatches parameter list");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let mut zero_buf: Vec<T> = Vec::new();
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take();
            let g: &[T] = match grad.as_deref() {
                Some(g) => g,
                None => {
                    zero_buf.resize(p.len(), T::zero());
                    &zero_buf[..p.len()]
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((pv, (&gv, mv)), vv) in
                p.data_mut().iter_mut().zip(g.iter().zip(m.iter_mut())).zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so their global norm is at most `clip`. Returns true
/// when clipping fired.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut Tensor<T>], clip: f64) -> bool {
    let mut sq = 0.0f64;
    for p in params.iter() {
        if let Some(g) = &p.grad {
            for &v in g {
                let v = v.to_f64_lit();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= clip || norm == 0.0 {
        return false;
    }
    let scale = T::from_f64_lit(clip / norm);
    for p in params.iter_mut() {
        if let Some(g) = &mut p.grad {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task_id: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<StepRecord>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,task_id,l1,l2,l3,total\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.step, r.task_id, r.l1, r.l2, r.l3, r.total
            ));
        }
        out
    }
}

/// Sorted union of global class ids across task groups: the head's class set.
pub fn train_class_set(tasks: &[TaskGroup]) -> Vec<u32> {
    let mut set: Vec<u32> = tasks.iter().flat_map(|t| t.class_map.iter().copied()).collect();
    set.sort_unstable();
    set.dedup();
    set
}

/// Canonical ordering of every trainable tensor; registration, gradient
/// application, optimizer state, and checkpoints all follow it.
pub fn trainable_refs<'a, T: Scalar>(
    pud: &'a mut PudNetParams<T>,
    head: &'a mut FullHead<T>,
) -> Vec<&'a mut Tensor<T>> {
    let mut out: Vec<&mut Tensor<T>> = Vec::new();
    out.extend(pud.extractor.conv_w.iter_mut());
    out.extend(pud.extractor.bn_gamma.iter_mut());
    out.extend(pud.extractor.bn_beta.iter_mut());
    out.push(&mut pud.ahru.w_r);
    out.push(&mut pud.ahru.w_z);
    out.push(&mut pud.ahru.w_h);
    out.push(&mut pud.ahru.w_o);
    for g in pud.generators.iter_mut() {
        out.push(&mut g.lin_w);
        out.push(&mut g.lin_b);
        out.push(&mut g.conv1_w);
        out.push(&mut g.conv1_b);
        out.push(&mut g.conv2_w);
        out.push(&mut g.conv2_b);
    }
    if pud.tau_learnable {
        out.push(&mut pud.tau);
    }
    out.push(&mut head.w);
    out.push(&mut head.b);
    out
}

/// Tape handles in the same order as `trainable_refs`.
pub fn trainable_vars<T: Scalar>(
    pud: &PudNetParams<T>,
    pvars: &PudNetVars,
    hvars: &HeadVars,
) -> Vec<Var> {
    let mut out = Vec::new();
    out.extend(pvars.extractor.conv_w.iter().copied());
    out.extend(pvars.extractor.bn_gamma.iter().copied());
    out.extend(pvars.extractor.bn_beta.iter().copied());
    out.push(pvars.ahru.w_r);
    out.push(pvars.ahru.w_z);
    out.push(pvars.ahru.w_h);
    out.push(pvars.ahru.w_o);
    for g in &pvars.generators {
        out.push(g.lin_w);
        out.push(g.lin_b);
        out.push(g.conv1_w);
        out.push(g.conv1_b);
        out.push(g.conv2_w);
        out.push(g.conv2_b);
    }
    if pud.tau_learnable {
        out.push(pvars.tau);
    }
    out.push(hvars.w);
    out.push(hvars.b);
    out
}

/// Meta-training driver holding all mutable state, so runs can be stopped,
/// checkpointed, and resumed exactly.
pub struct Trainer<T: Scalar> {
    pub pud: PudNetParams<T>,
    pub head: FullHead<T>,
    pub spec: TargetSpec,
    pub opt: Adam<T>,
    pub step: usize,
    pub clip_events: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(pud: PudNetParams<T>, head: FullHead<T>, spec: TargetSpec, lr: f64) -> Self {
        Trainer { pud, head, spec, opt: Adam::new(lr), step: 0, clip_events: 0 }
    }

    /// Extract a query batch by row range.
    fn query_batch(group: &TaskGroup, lo: usize, hi: usize) -> (Tensor<T>, Vec<u32>, Vec<u32>) {
        let dims: usize = group.query_images.shape()[1..].iter().product();
        let shape: Vec<usize> = std::iter::once(hi - lo)
            .chain(group.query_images.shape()[1..].iter().copied())
            .collect();
        let data: Vec<T> = group.query_images.data()[lo * dims..hi * dims]
            .iter()
            .map(|&v| T::from_f64_lit(v as f64))
            .collect();
        let labels = group.query_labels[lo..hi].to_vec();
        let globals: Vec<u32> =
            labels.iter().map(|&l| group.class_map[l as usize]).collect();
        let imgs = Tensor::new(shape, data).expect("query slice from a valid task group");
        (imgs, labels, globals)
    }

    /// One optimizer step on one query batch of one task.
    fn train_step(
        &mut self,
        group: &TaskGroup,
        task_id: usize,
        lo: usize,
        hi: usize,
        cfg: &TrainConfig,
    ) -> Result<StepRecord> {
        let mut tape = Tape::new();
        let pvars = self.pud.register(&mut tape);
        let hvars = self.head.register(&mut tape);

        // sketch from support, batch-norm in training mode
        let support = tape.constant(group.support_images.cast::<T>());
        let (sketch, bn_stats) =
            compute_sketch(&mut tape, &self.pud.extractor, &pvars.extractor, support, BnMode::Train)?;

        // predict parameters and bind them to the target spec
        let predicted = predict_params(&mut tape, &self.pud, &pvars, &self.spec, sketch)?;
        let net = bind(&tape, &self.spec, predicted.layers)?;

        // centroids from support embeddings
        let sup_emb = net.embed(&mut tape, support)?;
        let centroids = centroids_from_embeddings(
            &mut tape,
            sup_emb,
            &group.support_labels,
            group.n_way(),
            cfg.shots,
        )?;

        // query batch losses
        let (qimgs, qlabels, qglobals) = Self::query_batch(group, lo, hi);
        let query = tape.constant(qimgs);
        let q_emb = net.embed(&mut tape, query)?;
        let m_logits = metric_logits_from(&mut tape, q_emb, &centroids, pvars.tau)?;
        let labels_usize: Vec<usize> = qlabels.iter().map(|&l| l as usize).collect();
        let l1 = tape.softmax_cross_entropy(m_logits, &labels_usize)?;

        let zero = tape.constant(Tensor::scalar(T::zero()));
        let (l2, l3) = if cfg.metric_only {
            (zero, zero)
        } else {
            let h_logits = self.head.logits(&mut tape, &hvars, q_emb)?;
            let cols: Vec<usize> = qglobals
                .iter()
                .map(|&g| self.head.column_of(g))
                .collect::<Result<_>>()?;
            let l2 = tape.softmax_cross_entropy(h_logits, &cols)?;
            let l3 = if cfg.no_kl {
                zero
            } else {
                let positions: Vec<usize> = group
                    .class_map
                    .iter()
                    .map(|&g| self.head.column_of(g))
                    .collect::<Result<_>>()?;
                let p_probs = tape.softmax_rows(m_logits)?;
                let q_probs = tape.softmax_rows(h_logits)?;
                loss_consistency(&mut tape, p_probs, q_probs, &positions)?
            };
            (l2, l3)
        };
        let total = loss_total(&mut tape, l1, l2, l3)?;

        let record = StepRecord {
            step: self.step,
            task_id,
            l1: tape.value(l1).data()[0].to_f64_lit(),
            l2: tape.value(l2).data()[0].to_f64_lit(),
            l3: tape.value(l3).data()[0].to_f64_lit(),
            total: tape.value(total).data()[0].to_f64_lit(),
            clipped: false,
        };
        if !record.total.is_finite() {
            return Err(Error::Numeric(format!(
                "total loss is not finite at step {} (task {task_id})",
                self.step
            )));
        }

        let vars = trainable_vars(&self.pud, &pvars, &hvars);
        let grads = tape.backward(total)?;
        let mut refs = trainable_refs(&mut self.pud, &mut self.head);
        debug_assert_eq!(vars.len(), refs.len());
        for (t, &v) in refs.iter_mut().zip(&vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
        let clipped = clip_grad_norm(&mut refs, cfg.clip_norm);
        self.opt.step(&mut refs);
        if self.pud.tau_learnable {
            // temperature must stay positive
            let floor = T::from_f64_lit(1e-3);
            let t = &mut self.pud.tau.data_mut()[0];
            if *t < floor {
                *t = floor;
            }
        }
        self.pud.extractor.apply_bn_updates(&bn_stats);
        if clipped {
            self.clip_events += 1;
        }
        self.step += 1;
        Ok(StepRecord { clipped, ..record })
    }

    /// Run meta-training over the task list. Steps already taken (after a
    /// checkpoint restore) are skipped so the schedule stays aligned.
    pub fn run(
        &mut self,
        tasks: &[TaskGroup],
        cfg: &TrainConfig,
        checkpoint_path: Option<&Path>,
    ) -> Result<LossLog> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("no task groups to train on".into()));
        }
        let mut log = LossLog::default();
        let mut scheduled = 0usize;
        'outer: for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..tasks.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, &format!("epoch/{epoch}")));
            for &task_id in &order {
                let group = &tasks[task_id];
                let nq = group.query_images.shape()[0];
                let mut lo = 0;
                while lo < nq {
                    let hi = (lo + cfg.batch_size).min(nq);
                    if let Some(max) = cfg.max_steps {
                        if scheduled >= max {
                            break 'outer;
                        }
                    }
                    if scheduled >= self.step {
                        let rec = self.train_step(group, task_id, lo, hi, cfg)?;
                        log.records.push(rec);
                        if let (Some(every), Some(path)) = (cfg.checkpoint_every, checkpoint_path)
                        {
                            if self.step % every == 0 {
                                self.save_checkpoint(path)?;
                            }
                        }
                    }
                    scheduled += 1;
                    lo = hi;
                }
            }
        }
        if let Some(path) = checkpoint_path {
            self.save_checkpoint(path)?;
        }
        Ok(log)
    }

    /// Full training state: parameters, batch-norm running averages, head,
    /// optimizer moments, and the step counter.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut named = crate::hypernet::named_tensors(&self.pud);
        named.push(("head/W".to_string(), self.head.w.clone()));
        named.push(("head/b".to_string(), self.head.b.clone()));
        let classes: Vec<T> = self
            .head
            .global_classes
            .iter()
            .map(|&c| T::from_f64_lit(c as f64))
            .collect();
        named.push((
            "head/classes".to_string(),
            Tensor::new(vec![classes.len()], classes)?,
        ));
        for (i, (m, v)) in self.opt.m.iter().zip(&self.opt.v).enumerate() {
            named.push((format!("opt/{i}/m"), Tensor::new(vec![m.len()], m.clone())?));
            named.push((format!("opt/{i}/v"), Tensor::new(vec![v.len()], v.clone())?));
        }
        named.push((
            "opt/step".to_string(),
            Tensor::new(vec![1], vec![T::from_f64_lit(self.opt.step as f64)])?,
        ));
        named.push((
            "train/step".to_string(),
            Tensor::new(vec![1], vec![T::from_f64_lit(self.step as f64)])?,
        ));
        let refs: Vec<(String, &Tensor<T>)> =
            named.iter().map(|(n, t)| (n.clone(), t)).collect();
        crate::tensor::save_named_tensors(path, &refs)
    }

    /// Restore a checkpoint into an architecturally matching trainer.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let all = crate::tensor::load_named_tensors::<T>(path)?;
        let mut model = Vec::new();
        let mut head_w = None;
        let mut head_b = None;
        let mut head_classes = None;
        let mut moments: std::collections::HashMap<String, Tensor<T>> = Default::default();
        let mut opt_step = None;
        let mut train_step = None;
        for (name, t) in all {
            match name.as_str() {
                "head/W" => head_w = Some(t),
                "head/b" => head_b = Some(t),
                "head/classes" => head_classes = Some(t),
                "opt/step" => opt_step = Some(t),
                "train/step" => train_step = Some(t),
                n if n.starts_with("opt/") => {
                    moments.insert(name.clone(), t);
                }
                _ => model.push((name, t)),
            }
        }
        crate::hypernet::load_named_tensors_into(&mut self.pud, model)?;
        let mut head_w = head_w.ok_or_else(|| Error::Format("checkpoint missing head/W".into()))?;
        let mut head_b = head_b.ok_or_else(|| Error::Format("checkpoint missing head/b".into()))?;
        head_w.requires_grad = true;
        head_b.requires_grad = true;
        let classes = head_classes
            .ok_or_else(|| Error::Format("checkpoint missing head/classes".into()))?;
        let global_classes: Vec<u32> =
            classes.data().iter().map(|&v| v.to_f64_lit() as u32).collect();
        if head_w.shape()[1] != global_classes.len() {
            return Err(Error::Format("head/W width disagrees with head/classes".into()));
        }
        self.head = FullHead { w: head_w, b: head_b, global_classes };

        let n_params = {
            let mut count = 0;
            let refs = trainable_refs(&mut self.pud, &mut self.head);
            count += refs.len();
            count
        };
        let mut m = Vec::with_capacity(n_params);
        let mut v = Vec::with_capacity(n_params);
        for i in 0..n_params {
            let mk = format!("opt/{i}/m");
            let vk = format!("opt/{i}/v");
            match (moments.remove(&mk), moments.remove(&vk)) {
                (Some(tm), Some(tv)) => {
                    m.push(tm.data().to_vec());
                    v.push(tv.data().to_vec());
                }
                _ if i == 0 && moments.is_empty() => {
                    // checkpoint from a fresh, never-stepped trainer
                    m.clear();
                    v.clear();
                    break;
                }
                _ => return Err(Error::Format(format!("checkpoint missing {mk}/{vk}"))),
            }
        }
        if !moments.is_empty() {
            return Err(Error::Format("checkpoint has stray optimizer tensors".into()));
        }
        self.opt.m = m;
        self.opt.v = v;
        self.opt.step = opt_step
            .ok_or_else(|| Error::Format("checkpoint missing opt/step".into()))?
            .data()[0]
            .to_f64_lit() as usize;
        self.step = train_step
            .ok_or_else(|| Error::Format("checkpoint missing train/step".into()))?
            .data()[0]
            .to_f64_lit() as usize;
        Ok(())
    }
}

/// Convenience wrapper matching the one-call training surface.
pub fn train<T: Scalar>(
    pud: PudNetParams<T>,
    head: FullHead<T>,
    spec: TargetSpec,
    tasks: &[TaskGroup],
    cfg: &TrainConfig,
) -> Result<(PudNetParams<T>, FullHead<T>, LossLog)> {
    let mut trainer = Trainer::new(pud, head, spec, cfg.lr);
    let log = trainer.run(tasks, cfg, None)?;
    Ok((trainer.pud, trainer.head, log))
}
