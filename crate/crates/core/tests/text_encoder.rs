use atelier_core::rng::{normal_tensor, seeded};
use atelier_core::text_encoder::*;
use atelier_core::{Graph, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Monte Carlo estimate of KL(N(mu, var) || N(0, 1)) per dimension, summed.
fn kl_monte_carlo(mu: &[f64], var: &[f64], samples: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut total = 0.0;
    for (&m, &v) in mu.iter().zip(var) {
        let s = v.sqrt();
        let mut acc = 0.0;
        for _ in 0..samples {
            let x = m + s * std.sample(&mut rng);
            // log q(x) - log p(x)
            acc += -0.5 * ((x - m) * (x - m) / v + v.ln()) + 0.5 * x * x;
        }
        total += acc / samples as f64;
    }
    total
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = seeded(11);
    for case in 0..20 {
        let d = rng.random_range(1..4);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
        let lv: Vec<f64> = var.iter().map(|v| v.ln()).collect();
        let exact = kl_gauss_std_value(&mu, &lv);
        let mc = kl_monte_carlo(&mu, &var, 100_000, case);
        assert!(exact >= 0.0);
        let rel = (exact - mc).abs() / exact.max(1e-3);
        assert!(rel < 0.02, "case {case}: exact {exact} mc {mc}");
    }
    assert!((kl_monte_carlo(&[1.0], &[1.0], 100_000, 3) - 0.5).abs() < 0.01);
    let e = std::f64::consts::E;
    assert!((kl_monte_carlo(&[0.0, 0.0], &[e, e], 100_000, 4) - (e - 2.0)).abs() / (e - 2.0) < 0.02);
}

#[test]
fn kl_is_zero_only_at_standard_normal() {
    assert_eq!(kl_gauss_std_value(&[0.0; 4], &[0.0; 4]), 0.0);
    let mut rng = seeded(5);
    for _ in 0..200 {
        let m: f64 = rng.random_range(-1.0..1.0);
        let lv: f64 = rng.random_range(-1.0..1.0);
        assert!(kl_gauss_std_value(&[m], &[lv]) > 0.0);
    }
}

#[test]
fn reparameterized_samples_match_moments() {
    let mu = 0.7;
    let var: f64 = 2.5;
    let n = 100_000;
    let mut xs = Vec::with_capacity(n);
    for seed in 0..n as u64 {
        let eps = condition_noise::<f64>(1, seed).data()[0];
        xs.push(mu + var.sqrt() * eps);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se_mean = (var / n as f64).sqrt();
    let se_var = var * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((v - var).abs() < 3.0 * se_var, "var {v}");
}

fn candidate_regions<'g>(g: &'g Graph<f64>, grid: Tensor<f64>) -> RegionFeatures<'g, f64> {
    let grid = g.constant(grid);
    RegionFeatures {
        grid,
        global: grid.channel_mean(),
    }
}

#[test]
fn projected_text_features_win_retrieval() {
    let d = 6;
    for trial in 0..20u64 {
        let mut rng = seeded(100 + trial);
        let g = Graph::<f64>::new();
        let words = g.constant(normal_tensor(&mut rng, &[3, d], 1.0));
        let sentence = normal_tensor::<f64>(&mut rng, &[d], 1.0);
        // matching grid: every cell a positive multiple of the sentence
        let mut grid = Vec::new();
        for c in 0..d {
            for k in 0..4 {
                grid.push(sentence.data()[c] * (1.0 + k as f64));
            }
        }
        let mut candidates = vec![Tensor::from_vec(vec![d, 2, 2], grid).unwrap()];
        for _ in 0..4 {
            candidates.push(normal_tensor(&mut rng, &[d, 2, 2], 1.0));
        }
        let s = g.constant(sentence);
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| {
                damsm_similarity(words, &[true; 3], s, &candidate_regions(&g, c.clone()), 0.0)
                    .unwrap()
                    .item()
            })
            .collect();
        let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(best, 0, "trial {trial}: {scores:?}");

        // rescaling any single candidate leaves the argmax unchanged
        let mut scaled = candidates.clone();
        let idx = (trial as usize) % 5;
        scaled[idx] = scaled[idx].scale(0.1 + trial as f64);
        let rescored: Vec<f64> = scaled
            .iter()
            .map(|c| {
                damsm_similarity(words, &[true; 3], s, &candidate_regions(&g, c.clone()), 0.0)
                    .unwrap()
                    .item()
            })
            .collect();
        let best2 = (0..5).max_by(|&a, &b| rescored[a].total_cmp(&rescored[b])).unwrap();
        assert_eq!(best2, 0);
    }
}

#[test]
fn similarity_is_rotation_invariant() {
    let g = Graph::<f64>::new();
    let mut rng = seeded(8);
    let s = normal_tensor::<f64>(&mut rng, &[2], 1.0);
    let grid = normal_tensor::<f64>(&mut rng, &[2, 2, 2], 1.0);
    let words = normal_tensor::<f64>(&mut rng, &[2, 2], 1.0);
    let (c, sn) = (0.3f64.cos(), 0.3f64.sin());
    let rot = Tensor::from_f64([2, 2], &[c, -sn, sn, c]).unwrap();
    let rotate_vec = |v: &Tensor<f64>| rot.matmul(&v.reshape([2, 1]).unwrap()).reshape([2]).unwrap();
    let rotate_grid = |t: &Tensor<f64>| rot.matmul(&t.reshape([2, 4]).unwrap()).reshape([2, 2, 2]).unwrap();
    let rotate_words = |w: &Tensor<f64>| w.matmul(&rot.transpose2());

    let score = |s: Tensor<f64>, grid: Tensor<f64>, w: Tensor<f64>| {
        let r = candidate_regions(&g, grid);
        damsm_similarity(g.constant(w), &[true, true], g.constant(s), &r, 0.5)
            .unwrap()
            .item()
    };
    let a = score(s.clone(), grid.clone(), words.clone());
    let b = score(rotate_vec(&s), rotate_grid(&grid), rotate_words(&words));
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn attention_rows_are_distributions() {
    let g = Graph::<f64>::new();
    let mut rng = seeded(21);
    for _ in 0..50 {
        let t = rng.random_range(1..5);
        let mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.8)).collect();
        let words = g.constant(normal_tensor(&mut rng, &[t, 3], 2.0));
        let grid = g.constant(normal_tensor(&mut rng, &[3, 2, 3], 2.0));
        let a = word_region_attention(words, &mask, grid, 1.0).unwrap();
        let w = a.weights.tensor();
        for i in 0..t {
            let row = w.row(i);
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn matching_loss_falls_when_matched_similarity_rises() {
    let g = Graph::<f64>::new();
    let mut rng = seeded(4);
    let s: Vec<_> = (0..3).map(|_| normal_tensor::<f64>(&mut rng, &[4], 1.0)).collect();
    let im: Vec<_> = (0..3).map(|_| normal_tensor::<f64>(&mut rng, &[4], 1.0)).collect();
    let loss = |im: &[Tensor<f64>]| {
        let sv: Vec<_> = s.iter().map(|t| g.constant(t.clone())).collect();
        let iv: Vec<_> = im.iter().map(|t| g.constant(t.clone())).collect();
        damsm_loss(&sv, &iv, 1.0).unwrap().item()
    };
    let base = loss(&im);
    let mut closer = im.clone();
    closer[1] = s[1].clone();
    assert!(base >= 0.0);
    assert!(loss(&closer) < base);
}

fn shape_pairs(model: &DamsmModel<f32>, n: usize) -> Vec<DamsmPair<f32>> {
    atelier_core::corpus::synth_shapes_dataset::<f32>(3, n)
        .iter()
        .map(|s| DamsmPair {
            image: model.prepare_image(&s.image),
            ids: model.vocab.encode(&s.caption),
        })
        .collect()
}

#[test]
fn training_lowers_matching_loss_and_checkpoints_round_trip() {
    let vocab = atelier_core::corpus::build_vocabulary_from_texts(["a red green blue square circle triangle"], 1);
    let cfg = DamsmConfig::desk(vocab.len());
    let mut model = DamsmModel::<f32>::new(cfg, vocab, 1).unwrap();
    let pairs = shape_pairs(&model, 36);
    let train = DamsmTrainConfig {
        steps: 80,
        ..Default::default()
    };
    let trace = train_damsm(&mut model, &pairs, &train).unwrap();
    let head: f64 = trace[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "head {head} tail {tail}");

    let ck = model.to_checkpoint();
    let back = DamsmModel::<f32>::from_checkpoint(atelier_core::Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(back.vocab, model.vocab);

    let mut wrong = ck.clone();
    wrong.kind = "genre-classifier".into();
    assert!(DamsmModel::<f32>::from_checkpoint(wrong).is_err());
}
