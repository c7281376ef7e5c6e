use featflow::corpus::{synthetic, BlockMode, CorpusSource, DatasetMix, MixPolicy, Split, Tokenizer};
use featflow::lm::{LmConfig, LmParams};
use featflow::persist;
use featflow::train::{evaluate, train_lm, AdamConfig, TrainConfig};

#[test]
fn reloaded_checkpoint_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("en.txt");
    synthetic::write_documents(&path, &synthetic::documents(synthetic::Domain::English, 300, 0)).unwrap();
    let tok = Tokenizer::byte_level();
    let mix = DatasetMix { sources: vec![CorpusSource::new("en", &path)], policy: MixPolicy::TokenBalanced, seed: 0, validation_fraction: 0.2 };
    let loaded = mix.load(&tok).unwrap();
    let cfg = LmConfig { vocab_size: tok.vocab_size(), d_model: 16, n_heads: 2, d_mlp: 32, ctx_len: 16, seed: 2, pad_id: Some(tok.specials().pad), ..Default::default() };
    let tc = TrainConfig {
        total_tokens: 8_000,
        batch_blocks: 8,
        block_len: 17,
        adam: AdamConfig { lr: 3e-3, ..Default::default() },
        grad_clip: Some(1.0),
        eval_every: 8_000,
        eval_tokens: 500,
        seed: 0,
        init_from: None,
    };
    let train = loaded.stream(Split::Train, 17, BlockMode::Padded, 0).unwrap();
    let val = vec![("en".to_string(), loaded.stream(Split::Validation, 17, BlockMode::Padded, 1).unwrap())];
    let out = train_lm(&tc, LmParams::<f32>::init(&cfg).unwrap(), train, &val, |_| Ok(())).unwrap();
    let ckpt = dir.path().join("lm.ckpt");
    persist::save_lm(&ckpt, &out.params, None).unwrap();
    let back: LmParams<f32> = persist::load_lm(&ckpt).unwrap();
    let before = evaluate(&out.params, &val, 2000).unwrap();
    let after = evaluate(&back, &val, 2000).unwrap();
    assert_eq!(before, after);
    let final_eval = &out.trace.last().unwrap().streams;
    assert_eq!(&evaluate(&back, &val, 500).unwrap(), final_eval);
}
