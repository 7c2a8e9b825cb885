mod common;

use common::{toy_lm, toy_lm_corpus, toy_train_cfg, train_toy_lm};
use glyphembed::corpus::{build_vocab, Sentence};
use glyphembed::embed::EmbedderKind;
use glyphembed::lm::{perplexity_from_nll, LmModel};
use glyphembed::tensor::{log_sum_exp, Checkpoint, Tensor};
use rand::seq::SliceRandom;

fn varied_corpus() -> Vec<Sentence> {
    let mut r = common::rng(17);
    (0..50)
        .map(|_| {
            let len = rand::Rng::gen_range(&mut r, 3..10);
            common::random_text(&mut r, len).into_iter().collect::<String>().parse().unwrap()
        })
        .collect()
}

#[test]
fn training_lowers_perplexity_for_every_embedder() {
    let corpus = varied_corpus();
    for kind in EmbedderKind::ALL {
        let (before, atlas) = toy_lm(kind, &corpus);
        let start = before.perplexity(Some(&atlas), &corpus).unwrap();
        let (after, atlas, log) = train_toy_lm(kind, &corpus, &toy_train_cfg(200));
        let end = after.perplexity(Some(&atlas), &corpus).unwrap();
        assert_eq!(log.step_losses.len(), 200);
        assert!(end < 0.8 * start, "{kind}: perplexity {start:.3} -> {end:.3}");
        let head: f64 = log.step_losses[..20].iter().sum();
        let tail: f64 = log.step_losses[180..].iter().sum();
        assert!(tail < head, "{kind}: loss did not fall");
    }
}

#[test]
fn deterministic_language_is_learned_almost_perfectly() {
    let corpus = toy_lm_corpus(50);
    let (model, atlas, _) = train_toy_lm(EmbedderKind::Id, &corpus, &toy_train_cfg(300));
    let ppl = model.perplexity(Some(&atlas), &corpus).unwrap();
    assert!(ppl <= 1.01, "toy perplexity {ppl}");
}

#[test]
fn zero_projection_gives_uniform_perplexity() {
    let corpus = varied_corpus();
    for kind in [EmbedderKind::Id, EmbedderKind::Mixed] {
        let (mut model, atlas) = toy_lm(kind, &corpus);
        let w = model.proj.weight_name();
        let b = model.proj.bias_name();
        let ws = model.params.get(&w).unwrap().shape().to_vec();
        model.params.insert(w, Tensor::zeros(&ws));
        model.params.insert(b, Tensor::zeros(&[model.num_classes()]));
        let ppl = model.perplexity(Some(&atlas), &corpus).unwrap();
        let v = model.num_classes() as f64;
        assert_eq!(model.num_classes(), model.vocab.len());
        assert!(((ppl - v) / v).abs() < 5e-7, "{kind}: {ppl} vs {v}");
    }
}

#[test]
fn every_position_predicts_a_normalized_distribution() {
    let corpus = varied_corpus();
    let (model, atlas) = toy_lm(EmbedderKind::Mixed, &corpus);
    for s in corpus.iter().take(5) {
        let rows = model.log_probs(Some(&atlas), s).unwrap();
        assert_eq!(rows.len(), s.len() + 1);
        for row in &rows {
            assert_eq!(row.len(), model.num_classes());
            assert!(log_sum_exp(row).abs() < 1e-9);
        }
    }
}

#[test]
fn corpus_nll_is_the_sum_of_sentence_terms_in_any_order() {
    let corpus = varied_corpus();
    let (model, atlas) = toy_lm(EmbedderKind::Cnn, &corpus);
    let (nll, count) = model.nll(Some(&atlas), &corpus).unwrap();
    assert_eq!(count, corpus.iter().map(|s| s.len() + 1).sum::<usize>());
    let by_sentence: f64 = corpus.iter().map(|s| -model.sentence_log_prob(Some(&atlas), s).unwrap()).sum();
    assert!((nll - by_sentence).abs() < 1e-9 * nll);

    let mut shuffled = corpus.clone();
    shuffled.shuffle(&mut common::rng(2));
    let (nll2, count2) = model.nll(Some(&atlas), &shuffled).unwrap();
    assert_eq!(count, count2);
    assert!((nll - nll2).abs() < 1e-9 * nll);
    assert!((perplexity_from_nll(nll, count) - model.perplexity(Some(&atlas), &corpus).unwrap()).abs() < 1e-12);
}

#[test]
fn id_training_ignores_the_jitter_switch() {
    let corpus = varied_corpus();
    let off = toy_train_cfg(60);
    let on = glyphembed::train::TrainConfig { jitter: true, ..off.clone() };
    let (_, _, a) = train_toy_lm(EmbedderKind::Id, &corpus, &off);
    let (_, _, b) = train_toy_lm(EmbedderKind::Id, &corpus, &on);
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn jitter_changes_glyph_training_but_is_reproducible() {
    let corpus = varied_corpus();
    let on = glyphembed::train::TrainConfig { jitter: true, ..toy_train_cfg(40) };
    let (_, _, a) = train_toy_lm(EmbedderKind::Cnn, &corpus, &toy_train_cfg(40));
    let (_, _, b) = train_toy_lm(EmbedderKind::Cnn, &corpus, &on);
    let (_, _, c) = train_toy_lm(EmbedderKind::Cnn, &corpus, &on);
    assert_ne!(a.step_losses, b.step_losses);
    assert_eq!(b.step_losses, c.step_losses);
}

#[test]
fn evaluation_never_jitters() {
    let corpus = varied_corpus();
    let on = glyphembed::train::TrainConfig { jitter: true, ..toy_train_cfg(20) };
    let (model, atlas, _) = train_toy_lm(EmbedderKind::Cnn, &corpus, &on);
    let a = model.perplexity(Some(&atlas), &corpus).unwrap();
    let b = model.perplexity(Some(&atlas), &corpus).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unseen_characters_fall_back_to_unk() {
    let corpus = varied_corpus();
    let (model, atlas) = toy_lm(EmbedderKind::Mixed, &corpus);
    let odd: Sentence = "我们ⅩⅪ的".parse().unwrap();
    let lp = model.sentence_log_prob(Some(&atlas), &odd).unwrap();
    assert!(lp.is_finite() && lp < 0.0);
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let corpus = varied_corpus();
    let (model, atlas, _) = train_toy_lm(EmbedderKind::Mixed, &corpus, &toy_train_cfg(10));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.ckpt");
    model.to_checkpoint().save(&path).unwrap();
    let back = LmModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.vocab, model.vocab);
    assert_eq!(back.perplexity(Some(&atlas), &corpus).unwrap(), model.perplexity(Some(&atlas), &corpus).unwrap());
}

#[test]
fn glyph_model_without_atlas_is_rejected() {
    let corpus = varied_corpus();
    let (mut model, _) = toy_lm(EmbedderKind::Cnn, &corpus);
    assert!(glyphembed::lm::train_lm(&mut model, &toy_train_cfg(1), &corpus, &[], None, &mut |_| {}).is_err());
    let vocab = build_vocab(&corpus, 100).unwrap();
    assert!(vocab.len() > 4);
}
