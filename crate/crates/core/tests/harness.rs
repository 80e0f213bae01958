use eatt::harness::{
    collect_binarization_stats, generate_task, metrics_to_csv, train, Architecture, Example, LrSchedule, ModelConfig,
    RoleKinds, Task, ToyTaskConfig, TrainOptions, TrainState,
};
use eatt::{AttentionKind, Error, Tape, Tensor};

fn small_task(task: Task) -> ToyTaskConfig {
    ToyTaskConfig { task, train_examples: 2000, eval_examples: 64, seed: 3, ..Default::default() }
}

fn model(spec: &str) -> ModelConfig {
    ModelConfig { attention: RoleKinds::all(AttentionKind::Vanilla).parse_onto(spec).unwrap(), ..Default::default() }
}

fn opts(steps: u64) -> TrainOptions {
    TrainOptions { steps, eval_every: 20, ..Default::default() }
}

#[test]
fn untrained_model_is_at_chance() {
    let s = train(&model("all=e-att"), &small_task(Task::Copy), &opts(0)).unwrap();
    assert_eq!(s.step, 0);
    assert_eq!(s.history.len(), 1);
    // One near-constant greedy guess over 13 content symbols plus EOS.
    assert!(s.final_accuracy().unwrap() <= 1.0 / 13.0 + 0.03);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let run = || metrics_to_csv(&train(&model("all=e-att"), &small_task(Task::Reverse), &opts(40)).unwrap().history);
    let a = run();
    assert_eq!(a, run());
    assert!(a.starts_with("step,loss,token_accuracy,lr\n"));
    assert_eq!(a.lines().count(), 1 + 3);
}

#[test]
fn checkpoint_round_trip_and_resume_are_bit_exact() {
    let task = small_task(Task::Copy);
    let data = generate_task(&task).unwrap();
    let m = ModelConfig { dropout: 0.1, ..model("cross=e-att,enc-self=dense") };
    let o = opts(40);

    let mut straight = TrainState::new(&m, &task, &o).unwrap();
    straight.run(&data, 40).unwrap();

    let mut first = TrainState::new(&m, &task, &o).unwrap();
    first.run(&data, 20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    first.save(dir.path()).unwrap();
    let mut resumed = TrainState::load(dir.path()).unwrap();
    assert_eq!(resumed.model, first.model);
    assert_eq!(resumed.adam_m, first.adam_m);
    assert_eq!(resumed.adam_v, first.adam_v);
    assert_eq!(resumed.history, first.history);
    assert_eq!(resumed.step_losses, first.step_losses);
    resumed.run(&data, 20).unwrap();

    assert_eq!(metrics_to_csv(&resumed.history), metrics_to_csv(&straight.history));
    let bits = |s: &TrainState| s.model.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed), bits(&straight));
}

#[test]
fn stats_labels_and_shared_key() {
    let task = small_task(Task::Reverse);
    let s = train(&model("all=e-att"), &task, &opts(20)).unwrap();
    let data = generate_task(&task).unwrap();
    let stats = collect_binarization_stats(&s, &data.eval).unwrap();
    let labels: Vec<(&str, usize)> = stats.iter().map(|r| (r.module_label.as_str(), r.layer_index)).collect();
    assert_eq!(
        labels,
        [
            ("encoder-self", 1),
            ("encoder-self", 2),
            ("decoder-self", 1),
            ("decoder-self", 2),
            ("decoder-cross-query", 1),
            ("decoder-cross-query", 2),
            ("decoder-cross-key", 1),
            ("decoder-cross-key", 2),
        ]
    );
    let keys: Vec<f64> = stats.iter().filter(|r| r.module_label == "decoder-cross-key").map(|r| r.rho).collect();
    assert_eq!(keys[0], keys[1]);
    assert!(stats.iter().all(|r| (0.0..=1.0).contains(&r.rho)));
}

#[test]
fn large_shift_saturates_one_module() {
    let task = small_task(Task::Copy);
    let mut s = TrainState::new(&model("self=e-att"), &task, &opts(0)).unwrap();
    *s.model.params.get_mut("enc.0.self.shift").unwrap() = Tensor::full(vec![32], 100.0);
    let data = generate_task(&task).unwrap();
    let stats = collect_binarization_stats(&s, &data.eval).unwrap();
    let enc0 = stats.iter().find(|r| r.module_label == "encoder-self" && r.layer_index == 1).unwrap();
    assert_eq!(enc0.rho, 1.0);
    let enc1 = stats.iter().find(|r| r.module_label == "encoder-self" && r.layer_index == 2).unwrap();
    assert!(enc1.rho < 1.0);
    assert!(stats.iter().all(|r| !r.module_label.starts_with("decoder-cross")));
}

#[test]
fn stats_require_a_binarized_role() {
    let task = small_task(Task::Copy);
    let s = TrainState::new(&model("all=vanilla"), &task, &opts(0)).unwrap();
    let data = generate_task(&task).unwrap();
    assert!(matches!(collect_binarization_stats(&s, &data.eval), Err(Error::NoBinarizedRole)));
}

#[test]
fn decoder_positions_only_see_their_prefix() {
    let task = small_task(Task::Copy);
    for spec in ["all=vanilla", "all=e-att", "dec-self=dense", "dec-self=rand-init"] {
        let s = TrainState::new(&model(spec), &task, &opts(0)).unwrap();
        let base = Example { source: vec![3, 4, 5, 6, 7, 8], target: vec![3, 4, 5, 6, 7, 8] };
        let logits = |e: &Example| {
            let mut tape = Tape::new();
            let b = s.model.params.bind(&mut tape);
            let pass = s.model.forward(&mut tape, &b, &[e], None).unwrap();
            tape.value(pass.logits).clone()
        };
        let a = logits(&base);
        // Target position 2 is decoder input position 3.
        let mut changed = base.clone();
        changed.target[2] = 15;
        let b = logits(&changed);
        let v = s.model.vocab_size;
        for pos in 0..s.model.target_len() {
            let same = a.data()[pos * v..(pos + 1) * v] == b.data()[pos * v..(pos + 1) * v];
            assert_eq!(same, pos < 3, "{spec} position {pos}");
        }
        // Every decoder position reads the whole source.
        let mut src = base.clone();
        src.source[5] = 15;
        let c = logits(&src);
        assert!(a.data()[..v] != c.data()[..v], "{spec}");
    }
}

#[test]
fn huge_learning_rate_diverges() {
    let o = TrainOptions { schedule: LrSchedule { peak: 1e30, warmup: 1.0, decay: 1e30 }, clip_norm: 0.0, ..opts(50) };
    match train(&model("all=vanilla"), &small_task(Task::Copy), &o) {
        Err(Error::Divergence { step, lr }) => {
            assert!(step >= 1);
            assert_eq!(lr, 1e30);
        }
        other => panic!("expected divergence, got {:?}", other.map(|s| s.history)),
    }
}

#[test]
fn loss_falls_for_every_variant_on_copy() {
    for kind in AttentionKind::ALL {
        let m = ModelConfig { attention: RoleKinds::all(kind), ..Default::default() };
        let o = TrainOptions { steps: 600, eval_every: 600, ..Default::default() };
        let s = train(&m, &small_task(Task::Copy), &o).unwrap();
        let mean = |xs: &[f32]| xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64;
        let n = s.step_losses.len();
        assert!(mean(&s.step_losses[..200]) > mean(&s.step_losses[n - 200..]), "{kind}");
    }
}

#[test]
fn encoder_only_tagging_trains() {
    let m = ModelConfig { architecture: Architecture::EncoderOnly, ..model("all=e-att") };
    let s = train(&m, &small_task(Task::Copy), &opts(100)).unwrap();
    assert!(!s.model.params.contains("embed.tgt"));
    assert_eq!(s.model.target_len(), 12);
    let first = s.history.first().unwrap().loss;
    assert!(s.history.last().unwrap().loss < first);
}

#[test]
fn variable_length_padding() {
    let task = ToyTaskConfig { min_len: Some(2), seq_len: 5, train_examples: 100, eval_examples: 10, ..small_task(Task::Reverse) };
    let data = generate_task(&task).unwrap();
    assert!(data.train.iter().any(|e| e.source.len() < 5));
    assert!(data.train.iter().all(|e| (2..=5).contains(&e.source.len())));
    let s = TrainState::new(&model("all=vanilla"), &task, &opts(0)).unwrap();
    let e = Example { source: vec![3, 4], target: vec![4, 3] };
    assert_eq!(s.model.source_ids(&[&e]).unwrap(), [3, 4, 0, 0, 0]);
    assert_eq!(s.model.target_ids(&[&e]).unwrap(), [4, 3, 2, 0, 0, 0]);
    let long = Example { source: vec![3; 6], target: vec![3; 6] };
    assert!(matches!(s.model.source_ids(&[&long]), Err(Error::Capacity { .. })));
    assert!(generate_task(&ToyTaskConfig { min_len: Some(6), ..task.clone() }).is_err());
}

#[test]
fn trained_binarizations_are_mixed() {
    let task = small_task(Task::Reverse);
    let s = train(&model("all=e-att"), &task, &TrainOptions { steps: 300, eval_every: 300, ..Default::default() }).unwrap();
    let data = generate_task(&task).unwrap();
    let stats = collect_binarization_stats(&s, &data.eval).unwrap();
    assert_eq!(stats.len(), 8);
    for r in &stats {
        assert!(r.rho > 0.0 && r.rho < 1.0, "{} {}: {}", r.module_label, r.layer_index, r.rho);
    }
}
