use radgen::cam::*;
use radgen::corpus::*;

fn per_class_auc(scores: &[Vec<f64>], labels: &[Vec<bool>], c: usize) -> f64 {
    let s: Vec<Vec<f64>> = scores.iter().map(|v| vec![v[c]]).collect();
    let l: Vec<Vec<bool>> = labels.iter().map(|v| vec![v[c]]).collect();
    macro_auc(&s, &l)
}

fn main() {
    let cfg = CorpusConfig::default();
    let train = generate_corpus(7, 400, &cfg);
    let held = generate_corpus(8, 100, &cfg);
    for seed in [3u64, 5] {
        let ccfg = ClassifierConfig { lr: 2e-3, epochs: 30, channels: [16, 32, 64], batch_size: 8, seed, ..ClassifierConfig::default() };
        let (model, _) = train_classifier(&train, ccfg).unwrap();
        let scores: Vec<Vec<f64>> = held.iter().map(|s| model.predict(&s.pixels).unwrap()).collect();
        let labels: Vec<Vec<bool>> = held.iter().map(|s| s.labels.clone()).collect();
        let per: Vec<String> = (0..6).map(|c| format!("{:.3}", per_class_auc(&scores, &labels, c))).collect();
        println!("seed={seed} macro={:.4} per-class={per:?}", macro_auc(&scores, &labels));
    }
}
