use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::divergence::finite_diff;
use crate::model::{Sequence, TabularLM, Vocab};

fn small_task(seed: u64) -> (SyntheticTask, TabularLM) {
    let c = TaskConfig {
        vocab_size: 4,
        n_prompts: 6,
        n_train: 400,
        n_valid: 50,
        n_test: 50,
        n_pt: 50,
        max_len: 6,
        ..TaskConfig::default()
    };
    make_synthetic_task(&c, &mut stream(seed, Stream::Task)).unwrap()
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let (task, _) = small_task(1);
    let s0 = TabularLM::uniform(*task.vocab(), 1).unwrap();
    let cfg = SupervisedConfig {
        epochs: 0,
        ..SupervisedConfig::default()
    };
    let out = sft_train(&s0, &task, &cfg, "fp", &mut stream(1, Stream::Sft)).unwrap();
    assert_eq!(out.best_loss.model, s0);
    assert_eq!(out.last.model, s0);
    assert_eq!(out.history.len(), 1);
}

#[test]
fn best_loss_checkpoint_is_the_argmin() {
    let (task, _) = small_task(2);
    let s0 = TabularLM::uniform(*task.vocab(), 1).unwrap();
    let cfg = SupervisedConfig {
        epochs: 8,
        lr: 3.0,
        ..SupervisedConfig::default()
    };
    let out = sft_train(&s0, &task, &cfg, "fp", &mut stream(2, Stream::Sft)).unwrap();
    let best = crate::metrics::test_lm_loss_per_token(&out.best_loss.model, &task.valid).unwrap();
    assert!(out.history.iter().all(|h| best <= h.valid_loss + 1e-15));
    let best_r = out
        .history
        .iter()
        .map(|h| h.valid_rouge)
        .fold(f64::MIN, f64::max);
    let got = sampled_rouge(
        &out.best_rouge.model,
        &task.valid,
        task.max_len(),
        cfg.eval_seed,
    )
    .unwrap();
    assert_eq!(got, best_r);
}

#[test]
fn kd_without_teacher_mass_is_sft() {
    let (task, teacher) = small_task(3);
    let s0 = TabularLM::uniform(*task.vocab(), 1).unwrap();
    let cfg = SupervisedConfig {
        epochs: 3,
        mix_rate: 0.0,
        ..SupervisedConfig::default()
    };
    let a = sft_train(&s0, &task, &cfg, "fp", &mut stream(3, Stream::Sft)).unwrap();
    let b = word_kd_train(
        &s0,
        &teacher,
        &task,
        &cfg,
        "fp",
        &mut stream(3, Stream::Sft),
    )
    .unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.last.model, b.last.model);
}

#[test]
fn degenerate_teacher_term_is_argmax_nll() {
    let v = Vocab::new(3, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let student = TabularLM::random(v, 1, 1.0, &mut rng).unwrap();
    // teacher puts logit +50 on token 2 everywhere except after token 2,
    // where it favours EOS
    let teacher = TabularLM::from_fn(v, 1, |k| {
        if k == [2] {
            vec![50.0, 0.0, 0.0]
        } else {
            vec![0.0, 0.0, 50.0]
        }
    })
    .unwrap();
    let x = Sequence::prompt(vec![1]);
    let pairs = vec![(x.clone(), Sequence::new(vec![2, 0], true))];
    let refs: Vec<&Pair> = pairs.iter().collect();
    let kd = TargetStats::collect(&student, Some((&teacher, 1.0)), &refs).unwrap();
    let nll = -student.log_prob_seq(&x, &pairs[0].1).unwrap() / 2.0;
    assert!((kd.loss(&student) - nll).abs() < 1e-6);
}

#[test]
fn ce_minimizer_matches_teacher() {
    let v = Vocab::new(2, 0).unwrap();
    let teacher = TabularLM::new(v, 0, vec![0.3f64.ln(), 0.7f64.ln()]).unwrap();
    let mut student = TabularLM::uniform(v, 0).unwrap();
    let x = Sequence::empty_prompt();
    let pairs = vec![(x, Sequence::new(vec![0], true))];
    let refs: Vec<&Pair> = pairs.iter().collect();
    for _ in 0..2000 {
        let st = TargetStats::collect(&student, Some((&teacher, 1.0)), &refs).unwrap();
        let g = st.grad(&student);
        student.apply_update(&g, -2.0).unwrap();
    }
    let d = student.next_token_dist(&[]).unwrap();
    assert!((d[0] - 0.3).abs() < 1e-4);
}

#[test]
fn target_gradient_matches_finite_differences() {
    let (task, teacher) = small_task(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let student = TabularLM::random(*task.vocab(), 1, 1.0, &mut rng).unwrap();
    let refs: Vec<&Pair> = task.train.iter().take(20).collect();
    let st = TargetStats::collect(&student, Some((&teacher, 0.5)), &refs).unwrap();
    let fd = finite_diff(
        |theta| {
            let mut m = student.clone();
            m.set_params(theta.to_vec())?;
            Ok(st.loss(&m))
        },
        student.params(),
        1e-5,
    )
    .unwrap();
    assert!(st.grad(&student).max_abs_diff(&fd) < 1e-6);
}

#[test]
fn pt_gradient_oracles() {
    let v = Vocab::new(3, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = TabularLM::random(v, 1, 1.0, &mut rng).unwrap();
    let empty = Sequence::empty_prompt();
    let batch: Vec<Sequence> = (0..5)
        .map(|_| m.sample(&empty, 5, &mut rng).unwrap())
        .collect();
    let g = pt_loss_grad(&m, &batch).unwrap();
    let fd = finite_diff(
        |theta| {
            let mut q = m.clone();
            q.set_params(theta.to_vec())?;
            let mut s = 0.0;
            for d in &batch {
                s -= q.log_prob_seq(&empty, d)?;
            }
            Ok(s / batch.len() as f64)
        },
        m.params(),
        1e-5,
    )
    .unwrap();
    assert!(g.max_abs_diff(&fd) < 1e-6);
    let doubled: Vec<Sequence> = batch.iter().chain(&batch).cloned().collect();
    assert!(pt_loss_grad(&m, &doubled).unwrap().max_abs_diff(&g) < 1e-15);

    let sure = TabularLM::from_fn(v, 1, |k| {
        if k == [3] {
            vec![0.0, 40.0, 0.0]
        } else {
            vec![40.0, 0.0, 0.0]
        }
    })
    .unwrap();
    let d = vec![Sequence::new(vec![1, 0], true)];
    assert!(pt_loss_grad(&sure, &d).unwrap().max_abs() < 1e-8);
}

fn distill_cfg(steps: usize) -> DistillConfig {
    DistillConfig {
        steps,
        lr: 0.5,
        collect_size: 32,
        batch: 8,
        inner_epochs: 2,
        eval_interval: 5,
        seed: 11,
        ..DistillConfig::default()
    }
}

#[test]
fn teacher_is_a_fixed_point() {
    let (task, teacher) = small_task(7);
    let init = Checkpoint::new(teacher.clone(), 0, "fp");
    let cfg = DistillConfig {
        lr: 1e-2,
        ..distill_cfg(100)
    };
    let out = minillm_train(&init, &teacher, &task, &cfg, 0, "fp").unwrap();
    assert!(out.last.model.param_vector().max_abs_diff(teacher.params()) < 1e-3);
    assert!(out.trace[0].rev_kld.unwrap().abs() < 1e-12);
}

#[test]
fn update_is_exactly_the_recorded_parts() {
    let (task, teacher) = small_task(8);
    let s0 = TabularLM::uniform(*task.vocab(), 1).unwrap();
    let cfg = DistillConfig {
        pt_loss: true,
        ..distill_cfg(10)
    };
    let mut tr = MiniLlmTrainer::new(s0, &teacher, &task, cfg.clone()).unwrap();
    for _ in 0..6 {
        let out = tr.step().unwrap();
        assert!(out.parts.pt.as_ref().unwrap().max_abs() > 0.0);
        let total = out.parts.total();
        for ((after, before), g) in tr
            .model()
            .params()
            .iter()
            .zip(&out.before)
            .zip(total.iter())
        {
            assert!((after - (before - cfg.lr * g)).abs() < 1e-12);
        }
    }
}

#[test]
fn distillation_is_deterministic() {
    let (task, teacher) = small_task(9);
    let s0 = Checkpoint::new(TabularLM::uniform(*task.vocab(), 1).unwrap(), 0, "fp");
    let cfg = distill_cfg(20);
    let a = minillm_train(&s0, &teacher, &task, &cfg, 3, "fp").unwrap();
    let b = minillm_train(&s0, &teacher, &task, &cfg, 3, "fp").unwrap();
    let strip = |t: &[TraceRecord]| -> Vec<TraceRecord> {
        t.iter()
            .cloned()
            .map(|mut r| {
                r.wall_time_s = 0.0;
                r
            })
            .collect()
    };
    assert_eq!(strip(&a.trace), strip(&b.trace));
    assert_eq!(a.best, b.best);
    assert_eq!(a.last, b.last);
    assert_ne!(a.best.step, 0);
}

#[test]
fn config_validation() {
    assert!(DistillConfig::default().validate().is_ok());
    let bad = [
        DistillConfig {
            batch: 300,
            ..DistillConfig::default()
        },
        DistillConfig {
            clip_eps: Some(-1.0),
            ..DistillConfig::default()
        },
        DistillConfig {
            alpha: 1.5,
            ..DistillConfig::default()
        },
        DistillConfig {
            lr: 0.0,
            ..DistillConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}

#[test]
fn seqkd_corpus_is_seeded_and_degenerate_teacher_is_deterministic() {
    let (task, teacher) = small_task(10);
    let a = generate_teacher_corpus(&teacher, &task, 50, &mut stream(1, Stream::SeqKd)).unwrap();
    let b = generate_teacher_corpus(&teacher, &task, 50, &mut stream(1, Stream::SeqKd)).unwrap();
    assert_eq!(a, b);
    let v = *task.vocab();
    // after token t emit t+1, after the last content token emit EOS
    let det = TabularLM::from_fn(v, 2, |k| {
        let mut row = vec![-60.0; v.size()];
        let last = k[1] as usize;
        let next = if last + 1 < v.size() { last + 1 } else { 0 };
        row[next] = 60.0;
        row
    })
    .unwrap();
    let corpus = generate_teacher_corpus(&det, &task, 200, &mut stream(2, Stream::SeqKd)).unwrap();
    for x in &task.prompts {
        let ys: std::collections::HashSet<_> = corpus
            .iter()
            .filter(|(p, _)| p == x)
            .map(|(_, y)| y.clone())
            .collect();
        assert!(ys.len() <= 1);
    }
}
