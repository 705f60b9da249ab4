mod common;

use weightlora::adapters::ExpansionScheme;
use weightlora::config::RunConfig;
use weightlora::trainer::{constant_memory_rank, run_method, Method};

fn preset() -> RunConfig {
    RunConfig::default()
}

/// Fine-tuning only the planted layers must be able to fit the teacher;
/// otherwise the selection criteria would measure nothing.
#[test]
fn lora_on_planted_layers_fits_the_teacher() {
    let c = preset();
    for seed in 0..20 {
        let task = c.build_task(seed).unwrap();
        let baseline = task.baseline_val_loss().unwrap();
        let mut s = c.schedule_for(seed);
        s.total_steps = 2000;
        let run = run_method(Method::Lora, &task.student, &task.spec.planted, &c.adapter(), &task, &s).unwrap();
        let ratio = run.report.final_val_loss / baseline;
        assert!(ratio <= 0.1, "seed {seed}: val loss ratio {ratio:.3}");
    }
}

#[test]
fn same_seed_same_run() {
    let c = preset();
    let task = c.build_task(7).unwrap();
    let s = c.schedule_for(7);
    for method in [Method::WLora, Method::RLora, Method::Lora] {
        let a = run_method(method, &task.student, &task.slots(), &c.adapter(), &task, &s).unwrap();
        let b = run_method(method, &task.student, &task.slots(), &c.adapter(), &task, &s).unwrap();
        assert_eq!(a.report, b.report, "{method}");
    }
    let rebuilt = c.build_task(7).unwrap();
    assert_eq!(rebuilt.train.inputs, task.train.inputs);
}

#[test]
fn different_seeds_plant_different_layers() {
    let c = preset();
    let sets: std::collections::BTreeSet<Vec<usize>> =
        (0..20).map(|s| c.build_task(s).unwrap().spec.planted).collect();
    assert!(sets.len() > 5, "{sets:?}");
}

#[test]
fn disconnect_drops_trainable_parameters() {
    let c = preset();
    let task = c.build_task(1).unwrap();
    let s = c.schedule_for(1);
    let run = run_method(Method::WLora, &task.student, &task.slots(), &c.adapter(), &task, &s).unwrap();
    let r = &run.report;
    let per_adapter = c.rank * (16 + 16);
    assert_eq!(r.params_before_t, 6 * per_adapter);
    assert_eq!(r.params_after_t, 2 * per_adapter);
    for step in &r.steps {
        if step.step > s.t {
            assert_eq!(step.trainable_params, r.params_after_t);
            assert!(step.adapters_with_grad <= s.k);
        } else {
            assert_eq!(step.adapters_with_grad, 6);
        }
    }
}

#[test]
fn rank_expansion_keeps_memory_constant() {
    let c = preset();
    let task = c.build_task(2).unwrap();
    let r_new = constant_memory_rank(6, c.rank, c.schedule.k);
    assert_eq!(r_new, 6);
    for scheme in [ExpansionScheme::Gaussian, ExpansionScheme::Qr] {
        let mut s = c.schedule_for(2);
        s.expansion = Some(scheme);
        let run = run_method(Method::WLoraPlus, &task.student, &task.slots(), &c.adapter(), &task, &s).unwrap();
        let r = &run.report;
        assert_eq!(r.params_after_t, r.params_before_t, "{scheme:?}");
        let e = r.expansion.as_ref().unwrap();
        assert_eq!((e.r_before, e.r_new), (2, 6));
        assert!(e.max_residual <= 1e-10);
        assert!(run.model.adapters().iter().filter(|a| a.active).all(|a| a.rank() == 6));
        assert!(r.final_val_loss < r.initial_val_loss);
    }
}

#[test]
fn post_phase_batch_size_is_logged() {
    let c = preset();
    let task = c.build_task(3).unwrap();
    let mut s = c.schedule_for(3);
    s.post_t_batch_size = 64;
    s.total_steps = 260;
    let run = run_method(Method::WLora, &task.student, &task.slots(), &c.adapter(), &task, &s).unwrap();
    for step in &run.report.steps {
        let expected = if step.step > s.t { 64 } else { 32 };
        assert_eq!(step.batch_size, expected, "step {}", step.step);
    }
}

#[test]
fn full_fine_tuning_leaves_the_student_untouched() {
    let c = preset();
    let task = c.build_task(4).unwrap();
    let before = task.student.clone();
    let mut s = c.schedule_for(4);
    s.total_steps = 100;
    s.t = 50;
    let run = run_method(Method::Full, &task.student, &task.slots(), &c.adapter(), &task, &s).unwrap();
    assert_eq!(task.student, before);
    assert!(run.report.final_val_loss < run.report.initial_val_loss);
}
