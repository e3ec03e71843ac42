use nsnmt::corpus::{BOS, EOS};
use nsnmt::seq2seq::{Hyper, PairExample, Seq2Seq};
use nsnmt::trainer::{log_perplexity, train_batch, AdamState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn copy_pairs(n: usize, vocab: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..=4);
            let mut s = vec![BOS];
            s.extend((0..len).map(|_| rng.gen_range(5..vocab)));
            s.push(EOS);
            PairExample {
                source: s.clone(),
                target: s,
            }
        })
        .collect()
}

#[test]
fn copy_task_is_learned_within_500_steps() {
    let data = copy_pairs(16, 10, 3);
    let mut model = Seq2Seq::new(Hyper::small(8, 8), 10, 10, 5).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(&model.params, config.learning_rate);
    let batch: Vec<&PairExample> = data.iter().collect();
    let mut steps = 0;
    let mut loss = f64::INFINITY;
    while steps < 500 && loss >= 0.05 {
        train_batch(&mut model, &mut adam, &batch, &config).unwrap();
        steps += 1;
        if steps % 25 == 0 {
            loss = log_perplexity(&model, &data).unwrap();
        }
    }
    assert!(loss < 0.05, "loss per token {loss} after {steps} steps");
}
