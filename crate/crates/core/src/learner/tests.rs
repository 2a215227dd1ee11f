use super::train::batch_gradients;
use super::*;
use crate::attention::{init_adapter_ablation, init_prompt};
use crate::backbone::BackboneConfig;
use crate::bench::{gen_stream, StreamSpec, Task};

fn small_backbone() -> DualEncoder {
    DualEncoder::new(&BackboneConfig { dim: 6, depth: 2, vocab: 16, ..Default::default() }).unwrap()
}

fn small_batch() -> (Vec<Sample>, Vec<ClassTemplate>) {
    let classes = (0..3).map(|c| ClassTemplate { prefix: [0, 1, 2], class_token: 3 + c }).collect();
    let samples = [[3, 7, 9, 3], [4, 4, 11, 8], [5, 12, 5, 6], [3, 10, 13, 14]]
        .iter()
        .zip([0, 1, 2, 0])
        .map(|(ids, label)| Sample { tokens: TokenSeq::new(ids.to_vec()).unwrap(), label })
        .collect();
    (samples, classes)
}

fn stream(tasks: usize, samples: usize) -> (Vec<Task>, DualEncoder) {
    let spec = StreamSpec { num_tasks: tasks, samples_per_class: samples, ..Default::default() };
    (gen_stream(&spec).unwrap(), DualEncoder::new(&BackboneConfig::default()).unwrap())
}

#[test]
fn cosine_schedule() {
    assert_eq!(cosine_lr(0, 100, 0.5).unwrap(), 0.5);
    assert!(cosine_lr(100, 100, 0.5).unwrap().abs() < 1e-15);
    assert!((cosine_lr(50, 100, 0.5).unwrap() - 0.25).abs() < 1e-15);
    assert!(cosine_lr(101, 100, 0.5).is_err());
    assert!(cosine_lr(0, 0, 0.5).is_err());
}

#[test]
fn mode_strings() {
    for m in [AdapterMode::Iki, AdapterMode::Prepend, AdapterMode::IkiAblation(1.0), AdapterMode::IkiAblation(0.25)] {
        assert_eq!(m.to_string().parse::<AdapterMode>().unwrap(), m);
    }
    assert!("iki-ablation:-1".parse::<AdapterMode>().is_err());
    assert!("lora".parse::<AdapterMode>().is_err());
}

#[test]
fn zero_epochs_is_fresh_init() {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    let (params, report) = train_task(&samples, &classes, &backbone, &cfg, AdapterMode::Iki, &mut Rng::seed(4)).unwrap();
    assert_eq!(params, TaskParams::init(AdapterMode::Iki, &cfg, 6, &mut Rng::seed(4)));
    assert_eq!(report.steps, 0);
    let TaskParams::Residual(a) = params else { panic!("residual expected") };
    assert!(a.image.iter().chain(&a.text).all(|ad| ad.values().max_abs() == 0.0));
}

#[test]
fn rejects_bad_labels_and_config() {
    let (mut samples, classes) = small_batch();
    let backbone = small_backbone();
    let cfg = TrainConfig::default();
    samples[0].label = 7;
    let r = train_task(&samples, &classes, &backbone, &cfg, AdapterMode::Iki, &mut Rng::seed(0));
    assert!(matches!(r, Err(Error::Index { index: 7, len: 3 })));
    let bad = TrainConfig { adapter_depth: 3, ..Default::default() };
    assert!(matches!(bad.validate(2), Err(Error::Config(_))));
    let bad = TrainConfig { lr0: 0.0, ..Default::default() };
    assert!(matches!(bad.validate(2), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic() {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let cfg = TrainConfig { epochs: 3, batch: 2, ..Default::default() };
    let run = || train_task(&samples, &classes, &backbone, &cfg, AdapterMode::Iki, &mut Rng::seed(9)).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.steps, 6);
}

fn perturbed(params: &TaskParams, side: usize, layer: usize, which: usize, idx: usize, delta: f64) -> TaskParams {
    let bump = |m: &Mat| {
        let mut m = m.clone();
        let (r, c) = (idx / m.cols(), idx % m.cols());
        m.set(r, c, m.get(r, c) + delta);
        m
    };
    let mut out = params.clone();
    match &mut out {
        TaskParams::Residual(a) => {
            let layers = if side == 0 { &mut a.image } else { &mut a.text };
            let ad = &layers[layer];
            layers[layer] = if which == 0 {
                Adapter::new(bump(ad.keys()), ad.values().clone()).unwrap()
            } else {
                Adapter::new(ad.keys().clone(), bump(ad.values())).unwrap()
            };
        }
        TaskParams::Prepend(p) => {
            let layers = if side == 0 { &mut p.image } else { &mut p.text };
            layers[layer] = PromptBaseline::new(bump(layers[layer].prompts())).unwrap();
        }
    }
    out
}

fn grad_mats(g: &ParamGrads) -> Vec<&Mat> {
    match g {
        ParamGrads::Residual { d_keys, d_values } => vec![d_keys, d_values],
        ParamGrads::Prepend { d_prompts } => vec![d_prompts],
        ParamGrads::None => vec![],
    }
}

fn check_batch_grads(params: &TaskParams) {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let batch: Vec<&Sample> = samples.iter().collect();
    let scale = 10.0;
    let (_, gi, gt) = batch_gradients(params, &batch, &classes, &backbone, scale).unwrap();
    let loss = |p: &TaskParams| batch_gradients(p, &batch, &classes, &backbone, scale).unwrap().0;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (side, grads) in [gi, gt].iter().enumerate() {
        for (layer, g) in grads.iter().enumerate() {
            for (which, m) in grad_mats(g).into_iter().enumerate() {
                for idx in 0..m.data().len() {
                    let fd = (loss(&perturbed(params, side, layer, which, idx, h))
                        - loss(&perturbed(params, side, layer, which, idx, -h)))
                        / (2.0 * h);
                    let an = m.data()[idx];
                    worst = worst.max((fd - an).abs() / (1e-6 + fd.abs().max(an.abs())));
                }
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn batch_gradients_match_finite_differences() {
    let mut rng = Rng::seed(21);
    let make = |rng: &mut Rng| (0..2).map(|_| init_adapter_ablation(2, 6, 0.5, rng)).collect::<Vec<_>>();
    let image = make(&mut rng);
    let text = make(&mut rng);
    check_batch_grads(&TaskParams::Residual(AdapterSet { image, text }));
}

#[test]
fn prompt_gradients_match_finite_differences() {
    let mut rng = Rng::seed(22);
    let make = |rng: &mut Rng| (0..2).map(|_| init_prompt(2, 6, 0.5, rng)).collect::<Vec<_>>();
    let image = make(&mut rng);
    let text = make(&mut rng);
    check_batch_grads(&TaskParams::Prepend(PromptSet { image, text }));
}

#[test]
fn single_sample_statistics() {
    let (samples, _) = small_batch();
    let backbone = small_backbone();
    let (g, key) = estimate_task_stats(&samples[..1], &backbone, DEFAULT_RIDGE).unwrap();
    let f = encode_with(&samples[0].tokens, &backbone.image, &StackInsert::None).unwrap();
    assert_eq!(g.mean(), f.as_slice());
    assert!(g.cov().max_abs_diff(&Mat::identity(6).scale(g.ridge())) < 1e-18);
    assert!((crate::numkernel::norm(&key) - 1.0).abs() < 1e-12);
}

#[test]
fn statistics_match_direct_fit() {
    let (samples, _) = small_batch();
    let backbone = small_backbone();
    let (g, _) = estimate_task_stats(&samples, &backbone, 1e-3).unwrap();
    let direct = fit_gaussian(&frozen_features(&samples, &backbone).unwrap(), 1e-3).unwrap();
    assert_eq!(g, direct);
}

#[test]
fn empty_pool_and_candidates_rejected() {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let pool = TaskPool::new();
    assert!(infer(&samples[0].tokens, &pool, &classes, &backbone, &InferConfig::default()).is_err());
}

#[test]
fn fresh_adapters_match_zero_shot() {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    let mut pool = TaskPool::new();
    learn_task(&mut pool, &samples, &classes, &backbone, &cfg, AdapterMode::Iki, &mut Rng::seed(1)).unwrap();
    for calibrate in [true, false] {
        let ic = InferConfig { calibrate, ..Default::default() };
        for s in &samples {
            let p = infer(&s.tokens, &pool, &classes, &backbone, &ic).unwrap();
            let frozen = logits_with(&s.tokens, None, 0.0, &classes, &backbone, ic.logit_scale).unwrap();
            assert_eq!(p.logits, frozen);
            assert_eq!(p.class, zero_shot_infer(&s.tokens, &classes, &backbone, ic.logit_scale).unwrap());
        }
    }
}

#[test]
fn calibration_off_uses_unit_weight() {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let cfg = TrainConfig { epochs: 2, batch: 2, ..Default::default() };
    let mut pool = TaskPool::new();
    learn_task(&mut pool, &samples, &classes, &backbone, &cfg, AdapterMode::Iki, &mut Rng::seed(1)).unwrap();
    let ic = InferConfig { calibrate: false, ..Default::default() };
    for s in &samples {
        assert_eq!(infer(&s.tokens, &pool, &classes, &backbone, &ic).unwrap().weight, 1.0);
    }
}

#[test]
fn training_learns_and_far_samples_are_gated() {
    let (tasks, backbone) = stream(2, 40);
    let cfg = TrainConfig::default();
    let mut pool = TaskPool::new();
    let report =
        learn_task(&mut pool, &tasks[0].train, &tasks[0].classes, &backbone, &cfg, AdapterMode::Iki, &mut Rng::seed(3)).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);

    let ic = InferConfig::default();
    let acc = |task: &Task, adapted: bool| {
        task.test
            .iter()
            .filter(|s| {
                let pred = if adapted {
                    infer(&s.tokens, &pool, &task.classes, &backbone, &ic).unwrap().class
                } else {
                    zero_shot_infer(&s.tokens, &task.classes, &backbone, ic.logit_scale).unwrap()
                };
                pred == s.label
            })
            .count()
    };
    assert!(acc(&tasks[0], true) > acc(&tasks[0], false));

    for s in &tasks[1].test {
        let p = infer(&s.tokens, &pool, &tasks[1].classes, &backbone, &ic).unwrap();
        assert!(p.weight < 1e-3, "weight {}", p.weight);
        assert_eq!(p.class, zero_shot_infer(&s.tokens, &tasks[1].classes, &backbone, ic.logit_scale).unwrap());
    }
}

#[test]
fn earlier_entries_never_change() {
    let (tasks, backbone) = stream(3, 10);
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let mut pool = TaskPool::new();
    let mut rng = Rng::seed(0);
    let mut snapshots = Vec::new();
    for t in &tasks {
        learn_task(&mut pool, &t.train, &t.classes, &backbone, &cfg, AdapterMode::Iki, &mut rng).unwrap();
        snapshots.push(pool.clone());
    }
    for (i, snap) in snapshots.iter().enumerate() {
        assert_eq!(snap, &pool.prefix(i + 1));
    }
}

#[test]
fn pool_kinds_cannot_mix() {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    let mut pool = TaskPool::new();
    learn_task(&mut pool, &samples, &classes, &backbone, &cfg, AdapterMode::Iki, &mut Rng::seed(0)).unwrap();
    assert!(learn_task(&mut pool, &samples, &classes, &backbone, &cfg, AdapterMode::Prepend, &mut Rng::seed(0)).is_err());
    assert_eq!(pool.len(), 1);
}

#[test]
fn pool_round_trip_is_bit_exact() {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let cfg = TrainConfig { epochs: 2, batch: 2, ..Default::default() };
    for mode in [AdapterMode::Iki, AdapterMode::Prepend] {
        let mut pool = TaskPool::new();
        let mut rng = Rng::seed(5);
        for _ in 0..2 {
            learn_task(&mut pool, &samples, &classes, &backbone, &cfg, mode, &mut rng).unwrap();
        }
        let text = pool_io::encode_pool(&pool);
        let back = pool_io::decode_pool(&text).unwrap();
        assert_eq!(back, pool);
        assert_eq!(pool_io::encode_pool(&back), text);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.txt");
        write_pool(&pool, &path).unwrap();
        assert_eq!(read_pool(&path).unwrap(), pool);
    }
}

#[test]
fn corrupt_pool_files_are_rejected() {
    let (samples, classes) = small_batch();
    let backbone = small_backbone();
    let mut pool = TaskPool::new();
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    learn_task(&mut pool, &samples, &classes, &backbone, &cfg, AdapterMode::Iki, &mut Rng::seed(0)).unwrap();
    let text = pool_io::encode_pool(&pool);
    assert!(matches!(pool_io::decode_pool("not-a-pool 1"), Err(Error::Format(_))));
    assert!(matches!(pool_io::decode_pool(&text.replace("adapterlab-pool 1", "adapterlab-pool 9")), Err(Error::Format(_))));
    assert!(matches!(pool_io::decode_pool(&text[..text.len() / 2]), Err(Error::Format(_))));
    assert!(matches!(pool_io::decode_pool(&text.replace("residual", "lora")), Err(Error::Format(_))));
}
