use super::*;
use crate::synth::GeneratorSpec;

fn tiny() -> (TrainConfig, Dataset) {
    let mut cfg = TrainConfig::default();
    cfg.train.stage1_epochs = 2;
    cfg.train.stage2_epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.eval_every = 1;
    let mut spec = GeneratorSpec::default_imbalanced(3);
    spec.samples_per_class = 12;
    let data = Dataset::generate(&spec, 48, 40).unwrap();
    (cfg, data)
}

#[test]
fn header_line_round_trips() {
    let h = RunHeader::new("seed4", &TrainConfig::default());
    assert_eq!(RunHeader::parse_comment(&format!("# {}", h.line())), Some(h));
    assert_eq!(RunHeader::parse_comment("run_id=x"), None);
}

#[test]
fn ablation_parsing_and_labels() {
    let a: Ablation = "emc, IMTD".parse().unwrap();
    assert_eq!(a, Ablation::without(&[Module::Emc, Module::Imtd]));
    assert_eq!(a.label(), "without-emc+imtd");
    assert_eq!("".parse::<Ablation>().unwrap(), Ablation::full());
    assert!("emcc".parse::<Ablation>().is_err());
}

#[test]
fn stage_settings_follow_ablation() {
    let cfg = TrainConfig::default();
    let full = RunPlan::new(cfg.clone(), Ablation::full());
    let s1 = full.settings(Stage::One);
    assert_eq!((s1.weights.zeta, s1.weights.gamma, s1.weights.eta), (1.0, 0.0, 0.0));
    assert!(!s1.task && !s1.energy);
    let s2 = full.settings(Stage::Two);
    assert_eq!(s2.weights, cfg.objective);
    assert!(full.eval_flow().is_some());

    let no_emc = RunPlan::new(cfg.clone(), Ablation::without(&[Module::Emc]));
    assert_eq!(no_emc.settings(Stage::Two).weights.gamma, 0.0);
    assert_eq!(no_emc.energy().lambda_flow, 0.0);
    assert!(no_emc.eval_flow().is_none());

    let no_cce = RunPlan::new(cfg, Ablation::without(&[Module::Cce, Module::Msd]));
    let s = no_cce.settings(Stage::Two);
    assert!(!s.enhance);
    assert_eq!((s.weights.zeta, s.weights.beta), (0.0, 0.0));
    assert!(!full.trainable(Stage::Two, "teacher.text.l1.w"));
    assert!(full.trainable(Stage::Two, "encoder.text.l1.w"));
}

#[test]
fn tiny_run_logs_every_epoch() {
    let (cfg, data) = tiny();
    let plan = RunPlan::new(cfg, Ablation::full());
    let run = train(&plan, &data).unwrap();
    let stages: Vec<u8> = run.log.epochs.iter().map(|e| e.stage).collect();
    assert_eq!(stages, [1, 1, 2, 2]);
    assert!(run.log.stage_epochs(1).all(|e| e.energy.is_none() && e.eval.is_none()));
    assert!(run.log.stage_epochs(2).all(|e| e.energy.is_some() && e.trust.len() == 3 && e.eval.is_some()));
    let audit = run.log.trust_audit();
    assert!(audit.samples > 0 && audit.max_sum_error <= 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (mut cfg, data) = tiny();
    cfg.train.learning_rate = 0.0;
    let plan = RunPlan::new(cfg, Ablation::full());
    let before = new_model(&plan, &data).unwrap();
    let after = train_stage1(&plan, &data).unwrap().model;
    assert_eq!(before.store, after.store);
}

#[test]
fn frozen_groups_do_not_move() {
    let (mut cfg, data) = tiny();
    cfg.train.stage2_freeze_stage1 = true;
    let plan = RunPlan::new(cfg, Ablation::full());
    let s1 = train_stage1(&plan, &data).unwrap();
    let before = s1.model.store.clone();
    let s2 = train_stage2(&plan, s1, &data).unwrap();
    let mut moved = 0;
    for (a, b) in before.iter().zip(s2.model.store.iter()) {
        if is_fusion(&a.name) {
            moved += usize::from(a.value != b.value);
        } else {
            let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{} changed while frozen", a.name);
        }
    }
    assert!(moved > 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (cfg, data) = tiny();
    let plan = RunPlan::new(cfg, Ablation::full());
    let run = train(&plan, &data).unwrap();
    let header = RunHeader::new("t", &plan.cfg);
    let text = checkpoint::to_string(&run.model, &header, Some(&plan));
    let loaded = checkpoint::from_str(&text, std::path::Path::new("mem")).unwrap();
    assert_eq!(loaded.header, Some(header));
    assert_eq!(loaded.plan.as_ref(), Some(&plan));
    let back = loaded.model;
    assert_eq!(back.store, run.model.store);
    let a = evaluate(&run.model, &plan, &data.test).unwrap();
    let b = evaluate(&back, &plan, &data.test).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn robustness_condition_counts() {
    let (cfg, data) = tiny();
    let plan = RunPlan::new(cfg, Ablation::full());
    let run = train(&plan, &data).unwrap();
    let missing = run_robustness(&run.model, &plan, &data.test, Protocol::ModalityMissing).unwrap();
    assert_eq!(missing.len(), 7);
    let clean = evaluate(&run.model, &plan, &data.test).unwrap().entries();
    assert_eq!(missing.last().unwrap().entries, clean);
    let drop = run_robustness(&run.model, &plan, &data.test, Protocol::FeatureDropout).unwrap();
    assert_eq!(drop.len(), 11);
    assert_eq!(drop[0].entries, clean);
    assert_eq!(drop[10].name, "dropout:avg");
}
