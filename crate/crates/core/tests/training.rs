use symn_core::data::{build_batch, synthetic, tokenize_and_mask, tokenize_record, Template, TokenizedExample, VOCAB_SIZE};
use symn_core::model::{self, ModelConfig, ModelParams};
use symn_core::noise::{self, NoiseKind, NoiseSpec};
use symn_core::tensor::Tape;
use symn_core::trainer::{
    self, load_checkpoint, loss_and_gradients, save_checkpoint, train_loop, AdamW, NoLog, StepRecord, TrainConfig,
    TrainState, Trainer,
};

fn model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        context_len: 32,
        seed,
    }
}

fn corpus(n: usize) -> Vec<TokenizedExample> {
    synthetic::corpus(n, 0)
        .iter()
        .map(|r| tokenize_record(r, Template::Plain, 32).unwrap())
        .collect()
}

fn config(kind: NoiseKind, alpha: f64, steps: u64) -> TrainConfig {
    TrainConfig {
        noise: NoiseSpec { kind, alpha, seed: 1 },
        batch_size: 4,
        max_steps: steps,
        learning_rate: 3e-3,
        eval_every: 0,
        max_seq_len: 32,
        ..TrainConfig::default()
    }
}

#[test]
fn plain_step_matches_a_hand_written_reference() {
    let ex = corpus(4);
    let refs: Vec<&TokenizedExample> = ex.iter().collect();
    let batch = build_batch(&refs).unwrap();
    let params = ModelParams::init(&model_config(2)).unwrap();

    // reference: clean forward, masked mean loss, no trainer involved
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logits = model::forward(&mut tape, &params, &bound, &batch.tokens, &batch.lengths).unwrap();
    let loss = tape.cross_entropy_masked(logits, &batch.labels, &batch.loss_mask()).unwrap();
    let expected = tape.value(loss).item();

    let mut state = TrainState::new(params);
    let out = trainer::train_step_neft(&mut state, &batch, &NoiseSpec::none(), &AdamW::default()).unwrap();
    assert_eq!(out.loss, expected);
    assert_eq!(out.forward_batch, 4);
}

#[test]
fn zero_alpha_uniform_is_bit_identical_to_plain() {
    let ex = corpus(24);
    let init = ModelParams::init(&model_config(3)).unwrap();
    let plain = train_loop(&config(NoiseKind::None, 0.0, 15), &ex, &[], init.clone(), &mut NoLog, None).unwrap();
    let neft = train_loop(&config(NoiseKind::Uniform, 0.0, 15), &ex, &[], init, &mut NoLog, None).unwrap();
    assert_eq!(plain.loss_history, neft.loss_history);
    assert_eq!(plain.params, neft.params);
}

#[test]
fn zero_alpha_symmetric_loss_and_gradient_match_plain() {
    let ex = corpus(4);
    let refs: Vec<&TokenizedExample> = ex.iter().collect();
    let batch = build_batch(&refs).unwrap();
    let params = ModelParams::init(&model_config(4)).unwrap();
    let sym = NoiseSpec::new(NoiseKind::SymmetricBernoulli, 0.0, 0).unwrap();
    let (l_plain, g_plain) = loss_and_gradients(&params, &batch, &NoiseSpec::none(), 0).unwrap();
    let (l_sym, g_sym) = loss_and_gradients(&params, &batch, &sym, 0).unwrap();
    assert_eq!(l_plain, l_sym);
    for (name, g) in &g_plain {
        for (a, b) in g.iter().zip(&g_sym[name]) {
            assert!((a - b).abs() <= 1e-10, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn single_example_overfits() {
    let ex = vec![tokenize_and_mask("say hello", "hello world", 32).unwrap()];
    let mut cfg = config(NoiseKind::None, 0.0, 200);
    cfg.batch_size = 1;
    cfg.learning_rate = 1e-2;
    let state = train_loop(&cfg, &ex, &[], ModelParams::init(&model_config(5)).unwrap(), &mut NoLog, None).unwrap();
    let last = *state.loss_history.last().unwrap();
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn same_config_gives_identical_histories() {
    let ex = corpus(30);
    let cfg = config(NoiseKind::SymmetricBernoulli, 5.0, 10);
    let init = ModelParams::init(&model_config(6)).unwrap();
    let a = train_loop(&cfg, &ex, &[], init.clone(), &mut NoLog, None).unwrap();
    let b = train_loop(&cfg, &ex, &[], init, &mut NoLog, None).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert!(a.loss_history.iter().all(|l| l.is_finite()));
}

#[test]
fn mid_training_eval_is_a_clean_forward() {
    let ex = corpus(30);
    let (train, eval) = ex.split_at(24);
    let mut cfg = config(NoiseKind::Gaussian, 5.0, 6);
    cfg.eval_every = 3;
    let trainer = Trainer::new(&cfg, train, eval).unwrap();
    let mut state = TrainState::new(ModelParams::init(&model_config(7)).unwrap());
    let mut log: Vec<StepRecord> = Vec::new();
    for _ in 0..3 {
        let r = trainer.step(&mut state).unwrap();
        log.push(r);
    }
    let reported = log[2].clean_eval_loss.unwrap();

    let before = noise::draws_on_this_thread();
    let mut total = 0.0;
    let mut count = 0;
    for e in eval {
        let b = build_batch(&[e]).unwrap();
        let logits = model::logits(&state.params, &b.tokens, &b.lengths).unwrap();
        let (s, c) = model::sequence_nll(&logits, &b.labels, &b.loss_mask())[0];
        total += s;
        count += c;
    }
    assert_eq!(noise::draws_on_this_thread(), before);
    assert!((reported - total / count as f64).abs() < 1e-12);
}

#[test]
fn resumed_run_splices_onto_the_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let ex = corpus(30);
    let init = ModelParams::init(&model_config(8)).unwrap();
    for kind in [NoiseKind::Uniform, NoiseKind::SymmetricBernoulli] {
        let full = train_loop(&config(kind, 5.0, 12), &ex, &[], init.clone(), &mut NoLog, None).unwrap();
        let path = dir.path().join(format!("{kind}.symn"));
        train_loop(&config(kind, 5.0, 5), &ex, &[], init.clone(), &mut NoLog, Some(&path)).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        let cfg = config(kind, 5.0, 12);
        Trainer::new(&cfg, &ex, &[]).unwrap().run(&mut resumed, &mut NoLog).unwrap();
        assert_eq!(resumed.step, 12);
        for (a, b) in full.loss_history.iter().zip(&resumed.loss_history) {
            assert!((a - b).abs() <= 1e-12);
        }
        for ((_, a), (_, b)) in full.params.iter().zip(resumed.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        let again = dir.path().join("again.symn");
        save_checkpoint(&load_checkpoint(&path).unwrap(), &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}
