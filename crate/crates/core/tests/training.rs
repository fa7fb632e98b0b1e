use gkd_core::distributions::{Logits, Vocab};
use gkd_core::divergences::DivergenceSpec;
use gkd_core::gkd::{
    draw_batch, gkd_step, supervised_ft_step, train, write_metrics_csv, BatchSources, GkdConfig, LossKind, Preset,
    TrainSetup, TrainState, METRICS_COLUMNS, RL_COLUMNS,
};
use gkd_core::policies::{Context, ParametricPolicy, Policy};
use gkd_core::rl_gkd::{rl_gkd_step, train_rl, RlConfig};
use gkd_core::rng::{stream, Stream};
use gkd_core::tasks::{generate_dataset, DataSource, Decode, Example, Task, TaskName};

fn base(task: &Task) -> GkdConfig {
    GkdConfig {
        lambda: 0.0,
        divergence: DivergenceSpec::ForwardKl,
        teacher_gamma: 1.0,
        learning_rate: 0.3,
        batch_size: 8,
        steps: 200,
        max_len: task.max_len(),
        seed: 4,
        eval_every: 50,
        per_example_mixing: false,
    }
}

fn student_for(task: &Task, seed: u64) -> ParametricPolicy {
    ParametricPolicy::init(task.vocab(), task.student_architecture(), seed, &mut stream(seed, Stream::Init)).unwrap()
}

fn setup<'a>(task: &'a Task, dataset: &'a [Example]) -> TrainSetup<'a> {
    TrainSetup {
        task,
        dataset,
        n_eval: 64,
        decode: Decode::Sample,
        record_wallclock: false,
    }
}

/// The loop written out by hand: one `draw_batch` and one step per
/// iteration, no logging.
fn manual_losses(task: &Task, dataset: &[Example], config: &GkdConfig, loss: LossKind) -> (Vec<f64>, Vec<f64>) {
    let mut state = TrainState::new(student_for(task, config.seed), config.seed);
    let sources = BatchSources {
        contexts: task.contexts(),
        dataset,
    };
    let losses = (0..config.steps)
        .map(|_| {
            let batch = draw_batch(&mut state, sources, config).unwrap();
            match loss {
                LossKind::Distill => gkd_step(&mut state, task.teacher(), &batch, config).unwrap(),
                LossKind::Nll => supervised_ft_step(&mut state, &batch, config).unwrap(),
            }
        })
        .collect();
    (losses, state.student.theta().to_vec())
}

#[test]
fn presets_are_the_special_cases_bit_for_bit() {
    let task = Task::named(TaskName::Pcfg).unwrap();
    let data = generate_dataset(&task, DataSource::TeacherSamples, 300, 1).unwrap();
    let b = base(&task);
    let explicit = [
        (Preset::SupervisedKd, 0.0),
        (Preset::OnPolicyKd, 1.0),
        (Preset::Imitkd, 0.5),
    ];
    for (preset, lambda) in explicit {
        let by_preset = preset.apply(&b);
        let by_hand = GkdConfig {
            lambda,
            divergence: DivergenceSpec::ForwardKl,
            ..b.clone()
        };
        assert_eq!(by_preset, by_hand);
        let s = setup(&task, &data.examples);
        let a = train(&by_preset, preset.loss(), &s, student_for(&task, b.seed)).unwrap();
        let c = train(&by_hand, LossKind::Distill, &s, student_for(&task, b.seed)).unwrap();
        let (manual, theta) = manual_losses(&task, &data.examples, &by_hand, LossKind::Distill);
        assert_eq!(a.losses.len(), 200);
        assert_eq!(a.losses, c.losses, "{preset}");
        assert_eq!(a.losses, manual, "{preset}");
        assert_eq!(a.student.theta(), &theta[..]);
        assert_eq!(a.metrics, c.metrics);
    }

    let sft = Preset::SupervisedFt.apply(&b);
    assert_eq!(sft.lambda, 0.0);
    let out = train(&sft, LossKind::Nll, &setup(&task, &data.examples), student_for(&task, b.seed)).unwrap();
    let (manual, _) = manual_losses(&task, &data.examples, &sft, LossKind::Nll);
    assert_eq!(out.losses, manual);
}

#[test]
fn imitkd_mixes_both_sources() {
    let task = Task::named(TaskName::ModularAdd).unwrap();
    let data = generate_dataset(&task, DataSource::GroundTruth, 100, 0).unwrap();
    let config = Preset::Imitkd.apply(&base(&task));
    let mut state = TrainState::new(student_for(&task, 0), 0);
    let sources = BatchSources {
        contexts: task.contexts(),
        dataset: &data.examples,
    };
    let mut student_steps = 0;
    for _ in 0..200 {
        let batch = draw_batch(&mut state, sources, &config).unwrap();
        if batch.source() == Some(gkd_core::gkd::BatchSource::Student) {
            student_steps += 1;
        }
    }
    assert!((50..=150).contains(&student_steps), "{student_steps}");
}

#[test]
fn training_is_deterministic() {
    let task = Task::named(TaskName::NoisyCopy).unwrap();
    let data = generate_dataset(&task, DataSource::GroundTruth, 100, 2).unwrap();
    let config = GkdConfig {
        lambda: 0.5,
        divergence: DivergenceSpec::jsd(0.3).unwrap(),
        ..base(&task)
    };
    let s = setup(&task, &data.examples);
    let a = train(&config, LossKind::Distill, &s, student_for(&task, 1)).unwrap();
    let b = train(&config, LossKind::Distill, &s, student_for(&task, 1)).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.student.theta(), b.student.theta());

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_metrics_csv(&p1, &a.metrics, false).unwrap();
    write_metrics_csv(&p2, &b.metrics, false).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn zero_steps_and_zero_rate_leave_the_student_alone() {
    let task = Task::named(TaskName::Pcfg).unwrap();
    let data = generate_dataset(&task, DataSource::GroundTruth, 50, 0).unwrap();
    let init = student_for(&task, 3);
    let s = setup(&task, &data.examples);

    let k0 = GkdConfig { steps: 0, ..base(&task) };
    let out = train(&k0, LossKind::Distill, &s, init.clone()).unwrap();
    assert_eq!(out.student, init);
    assert!(out.losses.is_empty() && out.metrics.is_empty());

    let eta0 = GkdConfig {
        learning_rate: 0.0,
        steps: 20,
        lambda: 0.5,
        ..base(&task)
    };
    let out = train(&eta0, LossKind::Distill, &s, init.clone()).unwrap();
    assert_eq!(out.student.theta(), init.theta());
}

#[test]
fn metrics_are_logged_on_schedule_and_written_as_documented() {
    let task = Task::named(TaskName::ModularAdd).unwrap();
    let data = generate_dataset(&task, DataSource::GroundTruth, 50, 0).unwrap();
    let config = GkdConfig {
        steps: 23,
        eval_every: 10,
        ..base(&task)
    };
    let out = train(&config, LossKind::Distill, &setup(&task, &data.examples), student_for(&task, 0)).unwrap();
    let steps: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![10, 20, 23]);
    for r in &out.metrics {
        assert_eq!(r.loss, out.losses[r.step - 1]);
        assert!((0.0..=1.0).contains(&r.exact_match));
        assert!(r.on_policy_discrepancy >= 0.0);
        assert!(r.teacher_loglik <= 0.0);
        assert_eq!(r.wallclock_s, 0.0);
        assert!(r.rl.is_none());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(&path, &out.metrics, false).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), METRICS_COLUMNS.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    let first: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(first[0], "10");
    assert_eq!(first[1].parse::<f64>().unwrap(), out.metrics[0].loss);

    let rl = train_rl(
        &config,
        &RlConfig::default(),
        &setup(&task, &[]),
        &|x: &Context, y: &[usize]| task.reward(x, y),
        student_for(&task, 0),
    )
    .unwrap();
    write_metrics_csv(&path, &rl.metrics, true).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let header: Vec<&str> = METRICS_COLUMNS.iter().chain(RL_COLUMNS.iter()).copied().collect();
    assert_eq!(text.lines().next().unwrap(), header.join(","));
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 9 && l.ends_with(",0.5")));
}

#[test]
fn alpha_one_is_on_policy_distillation_bit_for_bit() {
    let task = Task::named(TaskName::ModularAdd).unwrap();
    let config = GkdConfig {
        steps: 120,
        eval_every: 40,
        ..base(&task)
    };
    let s = setup(&task, &[]);
    let reward = |x: &Context, y: &[usize]| task.reward(x, y);
    let rl = train_rl(
        &config,
        &RlConfig { alpha: 1.0, baseline_decay: 0.99 },
        &s,
        &reward,
        student_for(&task, 2),
    )
    .unwrap();
    let kd = train(&Preset::OnPolicyKd.apply(&config), LossKind::Distill, &s, student_for(&task, 2)).unwrap();
    assert_eq!(rl.losses, kd.losses);
    assert_eq!(rl.student.theta(), kd.student.theta());
    for (a, b) in rl.metrics.iter().zip(&kd.metrics) {
        assert_eq!(
            (a.loss, a.on_policy_discrepancy, a.exact_match, a.teacher_loglik),
            (b.loss, b.on_policy_discrepancy, b.exact_match, b.teacher_loglik)
        );
    }
}

struct PanickingTeacher(Vocab);

impl Policy for PanickingTeacher {
    fn vocab(&self) -> Vocab {
        self.0
    }
    fn next_token_logits(&self, _: &Context, _: &[usize]) -> gkd_core::Result<Logits> {
        panic!("the teacher was queried")
    }
}

#[test]
fn alpha_zero_never_queries_the_teacher() {
    let task = Task::named(TaskName::ModularAdd).unwrap();
    let config = GkdConfig {
        lambda: 1.0,
        ..base(&task)
    };
    let teacher = PanickingTeacher(task.vocab());
    let reward = |x: &Context, y: &[usize]| task.reward(x, y);
    let rl = RlConfig { alpha: 0.0, baseline_decay: 0.9 };
    let mut state = TrainState::new(student_for(&task, 0), 0);
    let mut baseline = 0.0;
    let sources = BatchSources {
        contexts: task.contexts(),
        dataset: &[],
    };
    let before = state.student.theta().to_vec();
    for _ in 0..20 {
        let batch = draw_batch(&mut state, sources, &config).unwrap();
        let stats = rl_gkd_step(&mut state, &mut baseline, &teacher, &reward, &batch, &config, &rl).unwrap();
        assert!(stats.mean_discrepancy.is_none());
        assert_eq!(stats.loss, -stats.mean_reward);
    }
    assert_ne!(state.student.theta(), &before[..]);
}

/// On-policy distillation with a modest step size drives the sampled
/// discrepancy down: block averages of the logged values never rise by more
/// than the tolerance.
#[test]
fn on_policy_discrepancy_descends() {
    const BLOCK: usize = 4;
    const RISE_TOL: f64 = 0.005;
    let task = Task::named(TaskName::Pcfg).unwrap();
    let config = GkdConfig {
        lambda: 1.0,
        learning_rate: 0.1,
        batch_size: 16,
        steps: 1200,
        eval_every: 50,
        ..base(&task)
    };
    let s = TrainSetup {
        n_eval: 400,
        ..setup(&task, &[])
    };
    let out = train(&config, LossKind::Distill, &s, student_for(&task, 0)).unwrap();
    let series: Vec<f64> = out.metrics.iter().map(|r| r.on_policy_discrepancy).collect();
    let blocks: Vec<f64> = series
        .chunks(BLOCK)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    assert!(blocks.windows(2).all(|w| w[1] <= w[0] + RISE_TOL), "{blocks:?}");
    assert!(blocks.last().unwrap() < &(blocks[0] * 0.5), "{blocks:?}");
}

#[test]
fn nll_training_rejects_student_batches() {
    let task = Task::named(TaskName::Pcfg).unwrap();
    let config = GkdConfig {
        lambda: 0.5,
        ..base(&task)
    };
    let data = generate_dataset(&task, DataSource::GroundTruth, 10, 0).unwrap();
    let err = train(&config, LossKind::Nll, &setup(&task, &data.examples), student_for(&task, 0)).unwrap_err();
    assert!(matches!(err, gkd_core::Error::Config(_)));
}
