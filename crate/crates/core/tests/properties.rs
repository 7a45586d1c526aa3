//! Property tests over random shapes and weights.

use difficulty_moe::adapt::{AdaptConfig, AdaptedModel, ReorderedModel};
use difficulty_moe::analysis::{activated_params_for_choices, full_params, ConfusionMatrix};
use difficulty_moe::autodiff::Activation;
use difficulty_moe::checkpoint::{Checkpoint, LoadedModel};
use difficulty_moe::corpus::{Corpus, Vocab};
use difficulty_moe::labels::{derive_labels, SimilarityMatrix};
use difficulty_moe::model::{DenseModel, ModelConfig};
use difficulty_moe::nested::{expert_widths, reorder_mlp, ImportanceScores, NestedMlp};
use difficulty_moe::tensor::{matmul_acc, matmul_acc_range};
use difficulty_moe::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], random(rng, rows * cols)).unwrap()
}

fn activation(i: u8) -> Activation {
    if i.is_multiple_of(2) {
        Activation::Silu
    } else {
        Activation::Relu
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blocked_matmul_matches_ascending_scan(m in 1usize..11, k in 0usize..40, n in 1usize..140, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&mut rng, m * k), random(&mut rng, k * n));
        let c0 = random(&mut rng, m * n);
        let mut want = c0.clone();
        for i in 0..m {
            for j in 0..n {
                let mut acc = want[i * n + j];
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                want[i * n + j] = acc;
            }
        }
        let mut got = c0.clone();
        matmul_acc(&a, &b, &mut got, m, k, n);
        prop_assert_eq!(&got, &want);

        let split = k / 2;
        let mut parts = c0;
        matmul_acc_range(&a, k, &b, n, &mut parts, 0, split);
        matmul_acc_range(&a, k, &b, n, &mut parts, split, k);
        prop_assert_eq!(parts, want);
    }

    #[test]
    fn experts_are_nested_prefixes(d in 1usize..9, h in 4usize..40, e in 1usize..5, act in 0u8..2, seed in 0u64..1000) {
        prop_assume!(e <= h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = NestedMlp::new(tensor(&mut rng, h, d), tensor(&mut rng, d, h), e, activation(act)).unwrap();
        let widths = expert_widths(h, e).unwrap();
        prop_assert_eq!(*widths.last().unwrap(), h);
        prop_assert!(widths.windows(2).all(|w| w[0] < w[1]));
        let x = tensor(&mut rng, 7, d);
        let all = mlp.all_expert_outputs(&x).unwrap();
        for (i, y) in all.iter().enumerate() {
            prop_assert_eq!(y, &mlp.expert_forward(&x, i).unwrap());
        }
        let s = SimilarityMatrix::from_outputs(&all).unwrap();
        for b in 0..s.rows {
            prop_assert!((s.row(b)[e - 1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reordering_preserves_the_full_mlp(d in 1usize..9, h in 4usize..40, act in 0u8..2, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = NestedMlp::new(tensor(&mut rng, h, d), tensor(&mut rng, d, h), 4.min(h), activation(act)).unwrap();
        let scores = ImportanceScores {
            scores: (0..h).map(|_| rng.gen_range(0.0..10.0)).collect(),
            token_count: 1,
        };
        let re = reorder_mlp(&mlp, &scores).unwrap();
        let x = tensor(&mut rng, 9, d);
        let full = mlp.num_experts() - 1;
        let (a, b) = (mlp.expert_forward(&x, full).unwrap(), re.expert_forward(&x, full).unwrap());
        let scale = a.data().iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        prop_assert!(a.max_abs_diff(&b) / scale < 1e-12);
    }

    #[test]
    fn higher_theta_never_spends_less(rows in 1usize..30, t1 in 0.05f64..0.9, dt in 0.0f64..0.09, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = ReorderedModel { model: tiny_model(seed), scores: Vec::new() };
        let model = AdaptedModel::from_base(&base, &AdaptConfig::default()).unwrap();
        let data: Vec<f64> = (0..rows).flat_map(|_| {
            let mut r = random(&mut rng, 3);
            r.push(1.0);
            r
        }).collect();
        let s = SimilarityMatrix::new(rows, 4, data).unwrap();
        let low = derive_labels(&s, t1).unwrap();
        let high = derive_labels(&s, t1 + dt).unwrap();
        let cost = |l: Vec<usize>| activated_params_for_choices(&model, &[l.clone(), l]);
        let (a, b) = (cost(low), cost(high));
        prop_assert!(a <= b && b <= full_params(&model) as f64);
    }

    #[test]
    fn confusion_counts_are_consistent(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let c = ConfusionMatrix::from_pairs(&labels, &preds, 4);
        prop_assert_eq!(c.total(), pairs.len() as u64);
        let hits = pairs.iter().filter(|(l, p)| l == p).count();
        prop_assert_eq!(c.errors, (pairs.len() - hits) as u64);
        prop_assert!((c.accuracy - hits as f64 / pairs.len() as f64).abs() < 1e-12);
        for (row, n) in c.row_normalized().iter().zip(&c.counts) {
            let sum: f64 = row.iter().sum();
            prop_assert!(n.iter().sum::<u64>() == 0 || (sum - 1.0).abs() < 1e-9);
        }
        prop_assert!(c.majority_baseline() <= 1.0);
    }

    #[test]
    fn corpus_split_is_deterministic(text in "[a-e ]{20,300}", frac in 0.01f64..0.5) {
        let a = Corpus::from_text(&text, frac).unwrap();
        let b = Corpus::from_text(&text, frac).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(a.train.len() + a.heldout.len(), text.chars().count());
        prop_assert_eq!(a.vocab.decode(&a.vocab.encode(&text)), text);
    }
}

fn tiny_model(seed: u64) -> DenseModel<f64> {
    DenseModel::init(ModelConfig {
        vocab_size: 5,
        embed_dim: 4,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        max_seq_len: 4,
        activation: Activation::Silu,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_byte_identically(
        d in 1usize..4, h in 4usize..16, layers in 1usize..3, e in 1usize..5, seed in 0u64..1000,
    ) {
        prop_assume!(e <= h);
        let model = DenseModel::<f32>::init(ModelConfig {
            vocab_size: 6,
            embed_dim: 2 * d,
            hidden_dim: h,
            num_layers: layers,
            num_heads: 2,
            max_seq_len: 5,
            activation: Activation::Relu,
            seed,
        }).unwrap();
        let vocab = Some(Vocab::from_text("abcde"));
        let dense = Checkpoint::new(LoadedModel::Dense(model.clone()), vocab.clone());
        let bytes = dense.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &dense);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);

        let cfg = AdaptConfig { num_experts: e, seed, ..Default::default() };
        let adapted = AdaptedModel::from_base(&ReorderedModel { model, scores: Vec::new() }, &cfg).unwrap();
        let ck = Checkpoint::new(LoadedModel::Adapted(adapted, Vec::new()), vocab);
        let bytes = ck.to_bytes().unwrap();
        prop_assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes.clone());
        prop_assert!(Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).is_err());
        prop_assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
