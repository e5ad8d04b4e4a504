use std::time::Instant;

use deepbow::config::ModelConfig;
use deepbow::eval::roc_auc;
use deepbow::model::DeepBowModel;
use deepbow::synth::{exact_overlap_score, generate, to_examples, SynthConfig};
use deepbow::training::{dense_pair_score, prepare_examples, train, LossMode, TrainConfig};
use deepbow::vocab::{build_vocabulary, WhitespaceSegmenter};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let n_train: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);
    let n_test: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1000);

    let synth_cfg = SynthConfig { train: n_train, test: n_test, ..SynthConfig::default() };
    let data = generate(&synth_cfg).unwrap();
    let corpus = data.vocabulary_corpus();
    let vocab = build_vocabulary(corpus.iter().map(String::as_str), 2000, 200, 1, &WhitespaceSegmenter).unwrap();
    let model_cfg = ModelConfig { d: 64, layers: 2, heads: 4, ffn: 256, max_len: 128 };
    let mut model = DeepBowModel::new(&model_cfg, &vocab, 7).unwrap();

    let train_cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        patience: epochs,
        loss_mode: LossMode::S,
        ..TrainConfig::default()
    };
    let train_set = to_examples(&data.train);
    let valid_set = to_examples(&data.test);
    let start = Instant::now();
    let report = train(&mut model, &vocab, &train_set, &valid_set, &train_cfg, |m| {
        println!(
            "epoch {} loss {:.4} auc {:.4} neg_pr {:.4}  [{:.0}s]",
            m.epoch, m.loss, m.roc_auc, m.neg_pr_auc,
            start.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    println!("best epoch {} auc {:.4} steps {}", report.best_epoch, report.best_roc_auc, report.steps);

    // Synonym-dependent subset comparison.
    let (prepared, _) = prepare_examples(&vocab, &valid_set, model_cfg.max_len).unwrap();
    let mut model_scores = Vec::new();
    let mut base_scores = Vec::new();
    let mut labels = Vec::new();
    for (ex, prep) in data.test.iter().zip(&prepared) {
        if ex.label == 0 || ex.synonym_dependent {
            model_scores.push(dense_pair_score(&model, &prep.query, &prep.product, LossMode::S).unwrap());
            base_scores.push(exact_overlap_score(&ex.query, &ex.product));
            labels.push(ex.label);
        }
    }
    let flagged = labels.iter().filter(|&&l| l == 1).count();
    println!(
        "syn-subset ({} pos / {} total): model auc {:.4}  baseline auc {:.4}",
        flagged,
        labels.len(),
        roc_auc(&model_scores, &labels).unwrap(),
        roc_auc(&base_scores, &labels).unwrap()
    );
}
