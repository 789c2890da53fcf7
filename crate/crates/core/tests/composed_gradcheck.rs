//! Finite-difference verification of the fully composed training path:
//! loss -> target net -> predicted parameters -> generators -> recurrence ->
//! sketch extractor, in f64 on tiny dimensions.

mod common;

use pudnet::data::TaskGroup;
use pudnet::hypernet::{predict_params, HypernetConfig, PudNetParams};
use pudnet::losses::{
    centroids_from_embeddings, loss_consistency, loss_total, metric_logits_from, FullHead,
};
use pudnet::rng;
use pudnet::sketch::{compute_sketch, BnMode};
use pudnet::tape::Tape;
use pudnet::targetnet::{bind, convnet3_spec, TargetSpec};
use pudnet::tensor::Tensor;
use pudnet::train::{trainable_refs, trainable_vars};
use rand::Rng;

fn tiny_task(seed: u64) -> TaskGroup {
    let mut r = rng::stream(seed, "composed/task");
    let (ns, nq, c, h, w) = (4usize, 2usize, 1usize, 8usize, 8usize);
    let mk = |n: usize, r: &mut rand_chacha::ChaCha8Rng| -> Tensor<f32> {
        let data: Vec<f32> = (0..n * c * h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    };
    TaskGroup {
        support_images: mk(ns, &mut r),
        support_labels: vec![0, 0, 1, 1],
        query_images: mk(nq, &mut r),
        query_labels: vec![1, 0],
        class_map: vec![2, 0],
    }
}

struct Model {
    pud: PudNetParams<f64>,
    head: FullHead<f64>,
    spec: TargetSpec,
    group: TaskGroup,
}

impl Model {
    fn new(tau_learnable: bool) -> Self {
        let spec = convnet3_spec(1, 3, 3).unwrap();
        let hp = HypernetConfig {
            m: 4,
            p: 2,
            p_mid: 2,
            eta: 0.3,
            tau: 5.0,
            tau_learnable,
            no_context: false,
            extractor_channels: [2, 3],
        };
        let pud = PudNetParams::<f64>::new(&hp, &spec, 1, 41).unwrap();
        let head = FullHead::<f64>::new(spec.embedding_dim, vec![0, 1, 2], 42);
        Model { pud, head, spec, group: tiny_task(43) }
    }

    /// Full-loss forward; when `want_grads`, returns the gradient of every
    /// trainable tensor in canonical order.
    fn loss(&mut self, want_grads: bool) -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = if want_grads { Tape::new() } else { Tape::no_grad() };
        let pvars = self.pud.register(&mut tape);
        let hvars = self.head.register(&mut tape);
        let support = tape.constant(self.group.support_images.cast::<f64>());
        let (sketch, _) = compute_sketch(
            &mut tape,
            &self.pud.extractor,
            &pvars.extractor,
            support,
            BnMode::Train,
        )
        .unwrap();
        let predicted = predict_params(&mut tape, &self.pud, &pvars, &self.spec, sketch).unwrap();
        let net = bind(&tape, &self.spec, predicted.layers).unwrap();
        let sup_emb = net.embed(&mut tape, support).unwrap();
        let cents = centroids_from_embeddings(
            &mut tape,
            sup_emb,
            &self.group.support_labels,
            2,
            2,
        )
        .unwrap();
        let query = tape.constant(self.group.query_images.cast::<f64>());
        let q_emb = net.embed(&mut tape, query).unwrap();
        let m_logits = metric_logits_from(&mut tape, q_emb, &cents, pvars.tau).unwrap();
        let l1 = tape.softmax_cross_entropy(m_logits, &[1, 0]).unwrap();
        let h_logits = self.head.logits(&mut tape, &hvars, q_emb).unwrap();
        let cols: Vec<usize> = self
            .group
            .query_globals()
            .iter()
            .map(|&g| self.head.column_of(g).unwrap())
            .collect();
        let l2 = tape.softmax_cross_entropy(h_logits, &cols).unwrap();
        let positions: Vec<usize> = self
            .group
            .class_map
            .iter()
            .map(|&g| self.head.column_of(g).unwrap())
            .collect();
        let p_probs = tape.softmax_rows(m_logits).unwrap();
        let q_probs = tape.softmax_rows(h_logits).unwrap();
        let l3 = loss_consistency(&mut tape, p_probs, q_probs, &positions).unwrap();
        let total = loss_total(&mut tape, l1, l2, l3).unwrap();
        let value = tape.value(total).data()[0];
        if !want_grads {
            return (value, None);
        }
        let vars = trainable_vars(&self.pud, &pvars, &hvars);
        let grads = tape.backward(total).unwrap();
        let out = vars
            .iter()
            .map(|&v| grads.get(v).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        (value, Some(out))
    }
}

#[test]
fn composed_path_matches_finite_differences() {
    let start = std::time::Instant::now();
    for tau_learnable in [false, true] {
        let mut model = Model::new(tau_learnable);
        let (_, grads) = model.loss(true);
        let analytic = grads.unwrap();
        let n_tensors = trainable_refs(&mut model.pud, &mut model.head).len();
        assert_eq!(analytic.len(), n_tensors);

        let h = 1e-5;
        let mut max_err = 0.0f64;
        let mut worst = (0usize, 0usize);
        for ti in 0..n_tensors {
            let len = trainable_refs(&mut model.pud, &mut model.head)[ti].len();
            // probe a deterministic subset of coordinates of each tensor to
            // keep the suite fast; every tensor is covered
            let stride = (len / 7).max(1);
            for j in (0..len).step_by(stride) {
                {
                    let mut refs = trainable_refs(&mut model.pud, &mut model.head);
                    refs[ti].data_mut()[j] += h;
                }
                let (up, _) = model.loss(false);
                {
                    let mut refs = trainable_refs(&mut model.pud, &mut model.head);
                    refs[ti].data_mut()[j] -= 2.0 * h;
                }
                let (down, _) = model.loss(false);
                {
                    let mut refs = trainable_refs(&mut model.pud, &mut model.head);
                    refs[ti].data_mut()[j] += h;
                }
                let fd = (up - down) / (2.0 * h);
                let a = analytic[ti].get(j).copied().unwrap_or(0.0);
                let err = common::rel_err(a, fd);
                if err > max_err {
                    max_err = err;
                    worst = (ti, j);
                }
            }
        }
        assert!(
            max_err < 1e-4,
            "composed-path gradient mismatch {max_err} at tensor {} coord {} (tau_learnable={tau_learnable})",
            worst.0,
            worst.1
        );
    }
    assert!(
        start.elapsed().as_secs_f64() < 120.0,
        "composed gradient check exceeded its runtime budget"
    );
}

#[test]
fn end_to_end_chain_reaches_every_component() {
    // every trainable tensor must receive a nonzero gradient through the
    // composed path (no silently dead branches)
    let mut model = Model::new(true);
    let (_, grads) = model.loss(true);
    let analytic = grads.unwrap();
    for (i, g) in analytic.iter().enumerate() {
        assert!(!g.is_empty(), "tensor {i} missing gradient");
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>();
        assert!(norm > 0.0, "tensor {i} has an all-zero gradient");
    }
}
