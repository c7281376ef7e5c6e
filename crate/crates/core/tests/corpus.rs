use featflow::corpus::{synthetic, BlockMode, CorpusSource, DatasetMix, MixPolicy, Split, Tokenizer};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn mix(dir: &std::path::Path, policy: MixPolicy) -> featflow::corpus::LoadedMix {
    let mut sources = Vec::new();
    for (i, (name, d)) in [("en", synthetic::Domain::English), ("code", synthetic::Domain::Code)].iter().enumerate() {
        let path = dir.join(format!("{name}.txt"));
        synthetic::write_documents(&path, &synthetic::documents(*d, 200, i as u64)).unwrap();
        sources.push(CorpusSource::new(*name, path));
    }
    let m = DatasetMix { sources, policy, seed: 3, validation_fraction: 0.2 };
    m.load(&Tokenizer::byte_level()).unwrap()
}

#[test]
fn token_balanced_mix_emits_equal_shares() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = mix(dir.path(), MixPolicy::TokenBalanced);
    let mut s = loaded.stream(Split::Train, 16, BlockMode::Padded, 1).unwrap();
    s.sample_blocks(16 * 1001);
    let e = s.emitted();
    let (a, b) = (e["en"] as i64, e["code"] as i64);
    assert!((a - b).abs() <= 16, "{a} vs {b}");
}

/// Block starts are uniform over valid positions, so documents are chosen
/// in proportion to their number of valid starts.
#[test]
fn document_choice_passes_chi_square() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = mix(dir.path(), MixPolicy::TokenBalanced).select(&["en"]).unwrap();
    let block = 8;
    let docs = &loaded.sources[0].train;
    let starts: Vec<f64> = docs.iter().map(|d| (d.len() + 1).saturating_sub(block) as f64).collect();
    let total: f64 = starts.iter().sum();
    let n = 40_000;
    let mut counts = vec![0f64; docs.len()];
    let mut s = loaded.stream(Split::Train, block, BlockMode::Contiguous, 9).unwrap();
    for _ in 0..n {
        let b = s.next_block();
        assert_eq!(&docs[b.doc][b.offset..b.offset + block], &b.tokens[..]);
        counts[b.doc] += 1.0;
    }
    let (mut chi2, mut dof) = (0.0, 0usize);
    for (c, w) in counts.iter().zip(&starts) {
        if *w > 0.0 {
            let e = n as f64 * w / total;
            chi2 += (c - e) * (c - e) / e;
            dof += 1;
        } else {
            assert_eq!(*c, 0.0);
        }
    }
    let p = 1.0 - ChiSquared::new((dof - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2} on {} dof, p = {p}", dof - 1);
}

#[test]
fn weighted_mix_chi_square_on_source_shares() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = mix(dir.path(), MixPolicy::Weights(vec![3.0, 1.0]));
    let mut s = loaded.stream(Split::Validation, 12, BlockMode::Padded, 2).unwrap();
    let n = 4000;
    let en = (0..n).filter(|_| &*s.next_block().source == "en").count() as f64;
    let (e_en, e_code) = (0.75 * n as f64, 0.25 * n as f64);
    let chi2 = (en - e_en).powi(2) / e_en + (n as f64 - en - e_code).powi(2) / e_code;
    assert!(chi2 < ChiSquared::new(1.0).unwrap().inverse_cdf(0.999), "chi2 {chi2}");
}

#[test]
fn forked_streams_replay() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = mix(dir.path(), MixPolicy::TokenBalanced);
    let mut s = loaded.stream(Split::Train, 10, BlockMode::Padded, 4).unwrap();
    s.sample_blocks(100);
    let mut fork = s.clone();
    assert_eq!(s.sample_blocks(500), fork.sample_blocks(500));
}
