mod common;

use mergeforge::expert::ActionExpert;
use mergeforge::task_vector::{extract, fingerprint};
use mergeforge::toy::{distance, finetune_task, gen_tasks, pretrain_backbone, progressive_merge_eval, TaskFamilyConfig, ToyConfig};

fn quick(steps: usize) -> ToyConfig {
    let mut cfg = ToyConfig::default();
    cfg.training.pretrain_steps = steps;
    cfg.training.finetune_steps = steps;
    cfg
}

#[test]
fn gen_tasks_is_deterministic_and_separated() {
    let family = TaskFamilyConfig::default();
    let a = gen_tasks(1, 0, family, 2, 4).unwrap();
    let b = gen_tasks(1, 0, family, 2, 4).unwrap();
    assert_eq!(a, b);
    let four = gen_tasks(4, 0, family, 2, 4).unwrap();
    let ids: std::collections::BTreeSet<_> = four.iter().map(|t| t.task_id.clone()).collect();
    assert_eq!(ids.len(), 4);
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(distance(&four[i].goal_vector(), &four[j].goal_vector()) >= family.goal_floor);
        }
    }
    assert_eq!(four[0], a[0], "smaller families are prefixes");
}

#[test]
fn different_seeds_give_different_goals() {
    let family = TaskFamilyConfig::default();
    let a = gen_tasks(2, 0, family, 2, 4).unwrap();
    let b = gen_tasks(2, 1, family, 2, 4).unwrap();
    assert_ne!(a[0].goal_vector(), b[0].goal_vector());
}

#[test]
fn gen_tasks_rejects_bad_counts() {
    let family = TaskFamilyConfig::default();
    assert!(gen_tasks(0, 0, family, 2, 4).is_err());
    assert!(gen_tasks(family.channel_groups + 1, 0, family, 2, 4).is_err());
}

#[test]
fn zero_pretrain_steps_keeps_initialization() {
    let cfg = quick(0);
    let tasks = cfg.tasks().unwrap();
    let pre = pretrain_backbone(&cfg, &tasks).unwrap();
    assert!(pre.theta_0.bitwise_eq(&cfg.initial_backbone()));
    assert_eq!(pre.initial_loss, pre.final_loss);
}

#[test]
fn pretraining_reduces_heldout_loss_and_is_deterministic() {
    let cfg = quick(400);
    let tasks = cfg.tasks().unwrap();
    let a = pretrain_backbone(&cfg, &tasks).unwrap();
    assert!(a.final_loss < a.initial_loss, "{} -> {}", a.initial_loss, a.final_loss);
    let b = pretrain_backbone(&cfg, &tasks).unwrap();
    assert!(a.theta_0.bitwise_eq(&b.theta_0));
}

#[test]
fn zero_finetune_steps_gives_zero_task_vector() {
    let cfg = quick(0);
    let tasks = cfg.tasks().unwrap();
    let theta_0 = pretrain_backbone(&cfg, &tasks).unwrap().theta_0;
    let f = finetune_task(&cfg, &theta_0, &tasks[0]).unwrap();
    let tau = extract(&f.theta_m, &theta_0, &f.task_id).unwrap();
    assert!(tau.delta.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn finetuning_beats_the_untrained_expert_with_shared_lineage() {
    let cfg = quick(300);
    let tasks = cfg.tasks().unwrap();
    let theta_0 = pretrain_backbone(&cfg, &tasks).unwrap().theta_0;
    let a = finetune_task(&cfg, &theta_0, &tasks[0]).unwrap();
    let b = finetune_task(&cfg, &theta_0, &tasks[1]).unwrap();
    assert!(a.final_mse < a.initial_mse);
    let ta = extract(&a.theta_m, &theta_0, &a.task_id).unwrap();
    let tb = extract(&b.theta_m, &theta_0, &b.task_id).unwrap();
    assert_eq!(ta.base_fingerprint, tb.base_fingerprint);
    assert_eq!(ta.base_fingerprint, fingerprint(&theta_0));
    // Only the adapted tensors move.
    assert_eq!(ta.delta.len(), 2);
}

#[test]
fn progressive_merge_endpoints() {
    let cfg = ToyConfig::default().expert_config();
    let a = ActionExpert::init(cfg, 1).unwrap();
    let b = ActionExpert::init(cfg, 2).unwrap();
    let score = |e: &ActionExpert| Ok(e.to_map().iter().map(|(_, t)| t.l2_norm()).sum::<f64>());
    let rows = progressive_merge_eval(&[a.clone(), b], 0, &[0, 1], score).unwrap();
    assert_eq!(rows[0].1, score(&a).unwrap());
    assert_ne!(rows[1].1, rows[0].1);
    let same = progressive_merge_eval(&[a.clone(), a.clone()], 1, &[cfg.num_blocks], score).unwrap();
    assert_eq!(same[0].1, score(&a).unwrap());
    assert!(progressive_merge_eval(&[a.clone(), a.clone()], 0, &[cfg.num_blocks + 1], score).is_err());
    assert!(progressive_merge_eval(&[a], 0, &[0], score).is_err());
}

#[test]
fn config_json_defaults_and_unknown_fields() {
    let cfg = ToyConfig::from_json(r#"{"seed": 3, "training": {"finetune_steps": 10}}"#).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.training.finetune_steps, 10);
    assert_eq!(cfg.model, ToyConfig::default().model);
    assert!(ToyConfig::from_json(r#"{"sede": 3}"#).is_err());
    assert!(ToyConfig::from_json(r#"{"num_tasks": 9}"#).is_err());
}
