use pudnet::data::{make_synthetic_corpus, sample_task_groups, subset_classes, PatternFamily};
use pudnet::hypernet::{HypernetConfig, PudNetParams};
use pudnet::infer::{mean_std, predict_and_eval};
use pudnet::losses::FullHead;
use pudnet::targetnet::convnet3_spec;
use pudnet::train::{train_class_set, TrainConfig, Trainer};

#[test]
fn probe() {
    let corpus = make_synthetic_corpus(10, 60, (1, 16, 16), PatternFamily::Gratings, 5).unwrap();
    let train_corpus = subset_classes(&corpus, &[0, 1, 2, 3, 4, 5]).unwrap();
    let test_corpus = subset_classes(&corpus, &[6, 7, 8, 9]).unwrap();
    let train_tasks = sample_task_groups(&train_corpus, 4, 10, 30, 500, 13).unwrap();
    let eval_tasks = sample_task_groups(&test_corpus, 4, 10, 30, 50, 14).unwrap();
    let rings = make_synthetic_corpus(10, 60, (1, 16, 16), PatternFamily::Rings, 6).unwrap();
    let ring_tasks = sample_task_groups(&rings, 4, 10, 30, 50, 15).unwrap();

    let spec = convnet3_spec(1, 32, 32).unwrap();
    let lr = 3e-3;
    for (label, metric_only, no_kl, no_context) in [
        ("full   ", false, false, false),
        ("no_kl  ", false, true, false),
        ("metric ", true, false, false),
        ("no_ctx ", false, false, true),
    ] {
        let hp = HypernetConfig { no_context, ..Default::default() };
        let pud = PudNetParams::<f32>::new(&hp, &spec, 1, 8).unwrap();
        let head = FullHead::new(spec.embedding_dim, train_class_set(&train_tasks), 9);
        let mut trainer = Trainer::new(pud, head, spec.clone(), lr);
        let t0 = std::time::Instant::now();
        for round in 0..4 {
            let cfg = TrainConfig {
                lr,
                epochs: 100,
                max_steps: Some((round + 1) * 750),
                shots: 10,
                batch_size: 120,
                seed: 0,
                metric_only,
                no_kl,
                ..Default::default()
            };
            let log = trainer.run(&train_tasks, &cfg, None).unwrap();
            let mut accs = vec![];
            for g in &eval_tasks {
                let (a, _) = predict_and_eval(&trainer.pud, &spec, g, 10).unwrap();
                accs.push(a);
            }
            let (mean, std) = mean_std(&accs);
            let l: Vec<f64> = log.records.iter().rev().take(20).map(|r| r.total).collect();
            let lavg = l.iter().sum::<f64>() / l.len().max(1) as f64;
            eprintln!(
                "[{label}] steps {:4}: eval {mean:.3}+/-{std:.3} loss {lavg:.3} ({:.0}s)",
                trainer.step,
                t0.elapsed().as_secs_f64()
            );
        }
        let mut accs = vec![];
        for g in &ring_tasks {
            let (a, _) = predict_and_eval(&trainer.pud, &spec, g, 10).unwrap();
            accs.push(a);
        }
        let (mean, std) = mean_std(&accs);
        eprintln!("[{label}] rings eval {mean:.3}+/-{std:.3}");
    }
}
