mod common;

use common::*;
use gkd_core::distributions::{softmax_with_temperature, Logits, TokenDist, Vocab};
use gkd_core::divergences::{
    divergence, forward_kl, generalized_jsd, reverse_kl, sequence_discrepancy, DivergenceSpec,
};
use gkd_core::gkd::{draw_batch, BatchSources, GkdConfig, TrainState};
use gkd_core::oracle::{enumerate_sequences, exact_expected_discrepancy, EnumeratedDistribution, Objective, Sampling};
use gkd_core::policies::{sequence_log_prob, Architecture, Context, NGramPolicy, ParametricPolicy, Policy};
use gkd_core::rl_gkd::{rl_gkd_step, RlConfig};
use gkd_core::gkd::{BatchItem, BatchSource, SampleBatch};
use gkd_core::rng::{stream, Stream};
use proptest::prelude::*;

fn dist_strategy(m: usize) -> impl Strategy<Value = TokenDist> {
    prop::collection::vec(0.01f64..1.0, m).prop_map(|w| {
        let s: f64 = w.iter().sum();
        TokenDist::from_probs(w.into_iter().map(|x| x / s).collect()).unwrap()
    })
}

fn pair_strategy() -> impl Strategy<Value = (TokenDist, TokenDist)> {
    (2usize..9).prop_flat_map(|m| (dist_strategy(m), dist_strategy(m)))
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..9)
}

fn spec_strategy() -> impl Strategy<Value = DivergenceSpec> {
    prop_oneof![
        Just(DivergenceSpec::ForwardKl),
        Just(DivergenceSpec::ReverseKl),
        (0.01f64..0.99).prop_map(|b| DivergenceSpec::jsd(b).unwrap()),
    ]
}

proptest! {
    #[test]
    fn temperature_equals_rescaled_logits(z in logits_strategy(), gamma in 1e-3f64..100.0) {
        let a = softmax_with_temperature(&Logits::new(z.clone()).unwrap(), gamma).unwrap();
        let scaled: Vec<f64> = z.iter().map(|v| v / gamma).collect();
        let b = softmax_with_temperature(&Logits::new(scaled).unwrap(), 1.0).unwrap();
        prop_assert!(max_abs_diff(a.probs(), b.probs()) <= 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(z in logits_strategy(), c in -50.0f64..50.0, gamma in 0.1f64..10.0) {
        let a = softmax_with_temperature(&Logits::new(z.clone()).unwrap(), gamma).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = softmax_with_temperature(&Logits::new(shifted).unwrap(), gamma).unwrap();
        prop_assert!(max_abs_diff(a.probs(), b.probs()) <= 1e-12);
    }

    #[test]
    fn distributions_are_floored_and_normalized(z in logits_strategy(), gamma in 1e-3f64..100.0) {
        let d = softmax_with_temperature(&Logits::new(z).unwrap(), gamma).unwrap();
        prop_assert!(d.probs().iter().all(|p| *p >= gkd_core::distributions::PROB_FLOOR));
        prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(d.log_probs().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn equal_distributions_have_zero_divergence(p in (2usize..9).prop_flat_map(dist_strategy), beta in 0.01f64..0.99) {
        prop_assert!(forward_kl(&p, &p).unwrap().abs() <= 1e-10);
        prop_assert!(reverse_kl(&p, &p).unwrap().abs() <= 1e-10);
        prop_assert!(generalized_jsd(beta, &p, &p).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn jsd_is_symmetric_under_beta_swap((p, q) in pair_strategy(), beta in 0.01f64..0.99) {
        let a = generalized_jsd(beta, &p, &q).unwrap();
        let b = generalized_jsd(1.0 - beta, &q, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn reverse_kl_is_swapped_forward_kl((p, q) in pair_strategy()) {
        prop_assert_eq!(reverse_kl(&p, &q).unwrap(), forward_kl(&q, &p).unwrap());
    }

    #[test]
    fn small_beta_jsd_approaches_forward_kl((p, q) in pair_strategy()) {
        let fkl = forward_kl(&p, &q).unwrap();
        let ratio = generalized_jsd(1e-4, &p, &q).unwrap() / 1e-4;
        prop_assert!((ratio - fkl).abs() <= 0.01 * fkl + 1e-12, "{} vs {}", ratio, fkl);
    }

    #[test]
    fn logit_gradients_sum_to_zero(spec in spec_strategy(), z in logits_strategy(), seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = random_dist(&mut rng, z.len());
        let g = divergence(&spec, &p, &Logits::new(z).unwrap()).unwrap().grad;
        prop_assert!(g.iter().sum::<f64>().abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn divergences_are_non_negative((p, q) in pair_strategy(), beta in 0.01f64..0.99) {
        prop_assert!(forward_kl(&p, &q).unwrap() >= 0.0);
        prop_assert!(reverse_kl(&p, &q).unwrap() >= 0.0);
        prop_assert!(generalized_jsd(beta, &p, &q).unwrap() >= 0.0);
    }
}

#[test]
fn lowering_temperature_sharpens_the_argmax() {
    let z = Logits::new(vec![0.3, 1.2, -0.4, 1.0, 0.0]).unwrap();
    let grid = [100.0, 10.0, 3.0, 1.0, 0.5, 0.2, 0.1, 0.03, 0.01, 1e-3];
    let mass: Vec<f64> = grid
        .iter()
        .map(|g| softmax_with_temperature(&z, *g).unwrap().probs()[1])
        .collect();
    assert!(mass.windows(2).all(|w| w[1] >= w[0]), "{mass:?}");
}

fn ngram_strategy(m: usize) -> impl Strategy<Value = NGramPolicy> {
    (dist_strategy(m), prop::collection::vec(dist_strategy(m), m)).prop_map(move |(d, rows)| {
        let v = Vocab::new(m, 0).unwrap();
        let mut p = NGramPolicy::new(v, 1, d).unwrap();
        for (s, r) in rows.into_iter().enumerate() {
            p.set_row(vec![Some(s)], r).unwrap();
        }
        p
    })
}

fn student_strategy(m: usize) -> impl Strategy<Value = ParametricPolicy> {
    let arch = Architecture { window: 2, embed_dim: 2, hidden_dim: 3 };
    prop::collection::vec(-1.0f64..1.0, arch.num_params(m))
        .prop_map(move |theta| ParametricPolicy::from_params(Vocab::new(m, 0).unwrap(), arch, 0, theta).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumeration_sums_to_one(p in (2usize..5).prop_flat_map(ngram_strategy), max_len in 1usize..5) {
        let x = Context::new(vec![1], &p.vocab()).unwrap();
        let d = enumerate_sequences(&p, &x, max_len).unwrap();
        prop_assert!((d.total_mass() - 1.0).abs() <= 1e-9);
    }

    /// Evaluating under `a*pi1 + (1-a)*pi2` equals the blend of the two
    /// evaluations.
    #[test]
    fn oracle_is_linear_in_the_sampling_mixture(
        (teacher, other, student) in (3usize..5).prop_flat_map(|m| (ngram_strategy(m), ngram_strategy(m), student_strategy(m))),
        a in 0.0f64..=1.0,
        spec in spec_strategy(),
    ) {
        let x = Context::new(vec![1, 2], &teacher.vocab()).unwrap();
        let obj = Objective { divergence: spec, teacher_gamma: 1.0, teacher: &teacher, student: &student };
        let max_len = 3;
        let e1 = exact_expected_discrepancy(&obj, &x, max_len, Sampling::TeacherData).unwrap();
        let e2 = exact_expected_discrepancy(&obj, &x, max_len, Sampling::Other(&other)).unwrap();
        let d1 = enumerate_sequences(&teacher, &x, max_len).unwrap();
        let d2 = enumerate_sequences(&other, &x, max_len).unwrap();
        let mix = EnumeratedDistribution::mixture(a, &d1, &d2).unwrap();
        let blended = obj.expected_under(&x, &mix).unwrap();
        prop_assert!((blended - (a * e1 + (1.0 - a) * e2)).abs() <= 1e-10);
    }

    /// The reverse-KL discrepancy is the token average of KL(p_S || p_T).
    #[test]
    fn reverse_kl_discrepancy_is_token_averaged_student_kl(
        (teacher, student) in (3usize..5).prop_flat_map(|m| (ngram_strategy(m), student_strategy(m))),
        len in 1usize..4,
    ) {
        let v = teacher.vocab();
        let x = Context::new(vec![1], &v).unwrap();
        let mut y: Vec<usize> = (0..len - 1).map(|i| 1 + i % (v.size() - 1)).collect();
        y.push(0);
        let got = sequence_discrepancy(&DivergenceSpec::ReverseKl, 1.0, &teacher, &student, &x, &y).unwrap().value;
        let mut expected = 0.0;
        for n in 0..y.len() {
            let p = teacher.next_token_dist(&x, &y[..n], 1.0).unwrap();
            let q = student.next_token_dist(&x, &y[..n], 1.0).unwrap();
            let kl: f64 = q.probs().iter().zip(p.probs()).map(|(a, b)| a * (a / b).ln()).sum();
            expected += kl / y.len() as f64;
        }
        prop_assert!((got - expected).abs() <= 1e-10);
    }

    #[test]
    fn gradient_accumulation_is_linear(
        (teacher, student) in (3usize..5).prop_flat_map(|m| (ngram_strategy(m), student_strategy(m))),
    ) {
        let v = teacher.vocab();
        let x = Context::new(vec![2], &v).unwrap();
        let y1 = [1, 0];
        let y2 = [2, 1, 0];
        let d1 = sequence_discrepancy(&DivergenceSpec::ForwardKl, 1.0, &teacher, &student, &x, &y1).unwrap();
        let d2 = sequence_discrepancy(&DivergenceSpec::ReverseKl, 1.0, &teacher, &student, &x, &y2).unwrap();
        let grad_of = |parts: &[(&[usize], &Vec<Vec<f64>>)]| {
            let mut s = student.clone();
            for (y, g) in parts {
                s.accumulate_param_grads(&x, y, g).unwrap();
            }
            s.grad().to_vec()
        };
        let g1 = grad_of(&[(&y1, &d1.per_token_grads)]);
        let g2 = grad_of(&[(&y2, &d2.per_token_grads)]);
        let both = grad_of(&[(&y1, &d1.per_token_grads), (&y2, &d2.per_token_grads)]);
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        prop_assert!(max_abs_diff(&both, &sum) <= 1e-10);
    }

    #[test]
    fn baseline_converges_geometrically(c in 0.0f64..=1.0, decay in 0.5f64..0.995, n in 1usize..60) {
        let tiny = Tiny::example();
        let v = vocab2();
        let batch = SampleBatch {
            items: vec![BatchItem {
                context: ctx(&[1], &v),
                output: gkd_core::policies::Sequence::new(vec![0], &v, 2).unwrap(),
                source: BatchSource::Student,
            }],
        };
        let reward = move |_: &Context, _: &[usize]| c;
        let config = GkdConfig {
            lambda: 1.0,
            divergence: DivergenceSpec::ForwardKl,
            teacher_gamma: 1.0,
            learning_rate: 0.0,
            batch_size: 1,
            steps: n,
            max_len: 2,
            seed: 0,
            eval_every: 1,
            per_example_mixing: false,
        };
        let rl = RlConfig { alpha: 0.3, baseline_decay: decay };
        let mut state = TrainState::new(tiny.policy(), 0);
        let mut b = 0.0;
        for _ in 0..n {
            rl_gkd_step(&mut state, &mut b, &tiny_teacher(), &reward, &batch, &config, &rl).unwrap();
        }
        prop_assert!((b - c).abs() <= decay.powi(n as i32) * c + 1e-12);
    }
}

/// Teacher data with every sequence of the same length: the token-averaged
/// forward-KL term times that length is the sequence-level cross-entropy gap
/// `E_T[ln T(y) - ln S(y)]`, computed here from sequence probabilities alone.
#[test]
fn forward_kl_teacher_term_is_the_sequence_cross_entropy_gap() {
    let v = Vocab::new(4, 0).unwrap();
    let len = 3;
    let mut teacher = NGramPolicy::new(v, 2, TokenDist::from_probs(vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    // Before the last position, never EOS; at the last one always EOS.
    let mut seed_rng = stream(41, Stream::Init);
    let x = Context::new(vec![3], &v).unwrap();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
    for n in 0..len - 1 {
        let mut next = Vec::new();
        for p in &prefixes {
            let key = gkd_core::policies::history_window(&x, p, 2);
            let mut row = random_dist(&mut seed_rng, 4).probs().to_vec();
            row[0] = 0.0;
            let s: f64 = row.iter().sum();
            teacher.set_row(key, TokenDist::from_probs(row.iter().map(|r| r / s).collect()).unwrap()).unwrap();
            for t in 1..4 {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        prefixes = next;
        let _ = n;
    }
    let student = {
        let arch = Architecture { window: 2, embed_dim: 2, hidden_dim: 4 };
        ParametricPolicy::init(v, arch, 3, &mut stream(3, Stream::Init)).unwrap()
    };
    let obj = Objective {
        divergence: DivergenceSpec::ForwardKl,
        teacher_gamma: 1.0,
        teacher: &teacher,
        student: &student,
    };
    let term = exact_expected_discrepancy(&obj, &x, len, Sampling::TeacherData).unwrap();
    let dist = enumerate_sequences(&teacher, &x, len).unwrap();
    let gap = dist
        .expectation(|y| {
            Ok(sequence_log_prob(&teacher, &x, y.tokens())? - sequence_log_prob(&student, &x, y.tokens())?)
        })
        .unwrap();
    assert!((term * len as f64 - gap).abs() <= 1e-9, "{} vs {gap}", term * len as f64);
}

/// The teacher temperature never reaches the student: on-policy batches are
/// identical for any gamma, and the discrepancy uses the student at
/// temperature 1.
#[test]
fn teacher_temperature_only_touches_the_teacher() {
    let v = Vocab::new(4, 0).unwrap();
    let arch = Architecture { window: 2, embed_dim: 2, hidden_dim: 3 };
    let student = ParametricPolicy::init(v, arch, 1, &mut stream(1, Stream::Init)).unwrap();
    let contexts = vec![Context::new(vec![1, 2], &v).unwrap()];
    let batch_for = |gamma: f64| {
        let cfg = GkdConfig {
            lambda: 1.0,
            divergence: DivergenceSpec::ReverseKl,
            teacher_gamma: gamma,
            learning_rate: 0.1,
            batch_size: 16,
            steps: 1,
            max_len: 4,
            seed: 5,
            eval_every: 1,
            per_example_mixing: false,
        };
        let mut st = TrainState::new(student.clone(), 5);
        draw_batch(&mut st, BatchSources { contexts: &contexts, dataset: &[] }, &cfg).unwrap()
    };
    assert_eq!(batch_for(0.1), batch_for(1.0));
    assert_eq!(batch_for(0.5), batch_for(2.0));

    let teacher = NGramPolicy::new(v, 1, TokenDist::from_probs(vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
    let x = &contexts[0];
    let y = [2, 0];
    let gamma = 0.5;
    let got = sequence_discrepancy(&DivergenceSpec::ForwardKl, gamma, &teacher, &student, x, &y).unwrap().value;
    let mut expected = 0.0;
    for n in 0..2 {
        let p = softmax_with_temperature(&teacher.next_token_logits(x, &y[..n]).unwrap(), gamma).unwrap();
        let q = softmax_with_temperature(&student.next_token_logits(x, &y[..n]).unwrap(), 1.0).unwrap();
        expected += forward_kl(&p, &q).unwrap() / 2.0;
    }
    assert!((got - expected).abs() <= 1e-12);
}
