use atelier_core::corpus::{synth_paintings, GenreStyleStats, PaintingRecord, Split, SYNTH_GENRES};
use atelier_core::genre::*;
use atelier_core::Checkpoint;

#[test]
fn pick_frequencies_are_uniform() {
    let corpus: Vec<PaintingRecord> = (0..6)
        .map(|i| PaintingRecord {
            image_path: format!("p{i}.png").into(),
            style: if i % 3 == 2 { "cubism" } else { "impressionism" }.into(),
            genre: "landscape".into(),
        })
        .collect();
    let candidates: Vec<_> = corpus.iter().filter(|r| r.style == "impressionism").collect();
    assert_eq!(candidates.len(), 4);
    let n = 10_000u64;
    let mut counts = [0usize; 4];
    for seed in 0..n {
        let pick = pick_painting("impressionism", &corpus, seed).unwrap();
        let i = candidates.iter().position(|c| *c == pick).unwrap();
        counts[i] += 1;
    }
    let p = 0.25;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

fn labelled(seed: u64, n_genres: usize, per_genre: usize) -> Vec<LabelledImage<f32>> {
    let samples = synth_paintings::<f32>(seed, n_genres, per_genre, 32);
    let mut seen = vec![0usize; n_genres];
    samples
        .into_iter()
        .map(|s| {
            seen[s.genre] += 1;
            LabelledImage {
                split: if seen[s.genre].is_multiple_of(5) {
                    Split::Test
                } else {
                    Split::Train
                },
                image: s.image,
                genre: s.genre,
            }
        })
        .collect()
}

#[test]
fn color_determined_genres_are_learned() {
    let genres: Vec<String> = SYNTH_GENRES.iter().map(|s| s.to_string()).collect();
    let base = GenreModel::<f32>::base(ClassifierConfig::desk(genres), 3).unwrap();
    let data = labelled(5, 10, 10);
    let (model, trace) = finetune(&base, &data, &FinetuneConfig::default()).unwrap();
    assert_eq!(trace.len(), 11);
    let best = trace.iter().map(|r| r.test_acc).fold(0.0, f64::max);
    assert!(best >= 0.95, "{trace:?}");

    // the retained model is the best one
    let test: Vec<_> = data.iter().filter(|d| d.split == Split::Test).collect();
    let correct = test.iter().filter(|d| model.classify(&d.image).unwrap().index == d.genre).count();
    assert_eq!(correct as f64 / test.len() as f64, best);

    let jsonl = trace_jsonl(&trace);
    assert_eq!(jsonl.lines().count(), 11);
    assert!(jsonl.lines().next().unwrap().contains("\"test_acc\""));

    let back = GenreModel::<f32>::from_checkpoint(Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap()).unwrap();
    assert_eq!(back.params, model.params);
}

#[test]
fn recommendations_follow_the_corpus_table() {
    let stats = GenreStyleStats::from_counts([
        (("landscape".to_string(), "impressionism".to_string()), 10),
        (("landscape".to_string(), "cubism".to_string()), 2),
    ]);
    let r = recommend_styles("landscape", &stats, 1).unwrap();
    assert_eq!(r.style_ids(), vec!["impressionism"]);
    assert_eq!(recommend_styles("landscape", &stats, 1).unwrap(), r);
}
