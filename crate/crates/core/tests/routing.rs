//! Gradient routing, clipping, accumulation and freeze contracts of the
//! joint training step.

mod common;

use common::*;
use speech_chain::autograd::Graph;
use speech_chain::chain::{
    chain_loss, run_adaptation, AdaptConfig, AdaptData, ChainTrainer, GradBalanceConfig, LossSources, TrainStrategy,
    UnpairedItem,
};
use speech_chain::params::{Grads, ParamStore};
use speech_chain::speaker::SpeakerEmbedding;
use speech_chain::tensor::Tensor;

#[test]
fn routing_matrix_matches_the_chain_diagram() {
    let fx = ChainFixture::new();
    assert_eq!(routing_matrix(&fx), EXPECTED_ROUTING);
}

#[test]
fn detached_chain_never_moves_the_tts() {
    let fx = ChainFixture::new();
    let chain = LossSources {
        asr: false,
        tts: false,
        chain: true,
    };
    assert_eq!(routing_probe(&fx, chain, TrainStrategy::domain(false)), (true, false));
    assert_eq!(routing_probe(&fx, chain, TrainStrategy::speaker()), (true, false));
    assert_eq!(
        routing_probe(&fx, LossSources::default(), TrainStrategy::speaker()),
        (true, false)
    );
}

#[test]
fn chain_gradients_reach_tts_only_when_attached() {
    let fx = ChainFixture::new();
    let item = &fx.batch(0, 1).unpaired[0];
    let off = chain_loss(&fx.asr, &fx.tts, item, false).unwrap();
    assert!(off.tts_grads.is_none());
    let on = chain_loss(&fx.asr, &fx.tts, item, true).unwrap();
    let g = on.tts_grads.unwrap();
    assert!(!g.is_zero());
    let encoder_touched = fx
        .tts
        .params()
        .ids()
        .filter(|&id| fx.tts.params().name(id).starts_with("enc."))
        .any(|id| g.get(id).data().iter().any(|&v| v != 0.0));
    assert!(encoder_touched, "no TTS encoder parameter received gradient");
    assert_eq!(off.loss, on.loss);
    assert_eq!(off.asr_grads, on.asr_grads);
}

#[test]
fn chain_loss_equals_standalone_asr_loss_on_exported_speech() {
    let fx = ChainFixture::new();
    for item in fx.batch(1, 3).unpaired {
        let c = chain_loss(&fx.asr, &fx.tts, &item, true).unwrap();
        let (spec, _, truncated) = fx.tts.synthesize(&item.phonemes, &item.speaker.vector).unwrap();
        assert_eq!(truncated, c.truncated);
        assert_eq!(spec.num_frames(), c.frames);
        let mut g = Graph::new();
        let b = g.bind(fx.asr.params(), false);
        let f = fx.asr.loss(&mut g, b, &spec, &item.chars).unwrap();
        assert!(
            (g.scalar(f.loss) - c.loss).abs() <= 1e-12 * c.loss.abs(),
            "{} vs {}",
            g.scalar(f.loss),
            c.loss
        );
    }
}

#[test]
fn clipping_hits_the_threshold_exactly() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::zeros(2, 3));
    let b = store.add("b", Tensor::zeros(1, 4));
    let mut g = Grads::zeros_like(&store);
    g.get_mut(a).data_mut().copy_from_slice(&[6.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    g.get_mut(b).data_mut().copy_from_slice(&[8.0, 0.0, 0.0, 0.0]);
    assert_eq!(g.norm(), 10.0);
    g.clip_norm(1.0);
    assert!((g.norm() - 1.0).abs() < 1e-15);
}

#[test]
fn update_norms_respect_clips_on_every_step() {
    let fx = ChainFixture::new();
    let (mut asr, mut tts) = (fx.asr.clone(), fx.tts.clone());
    let balance = GradBalanceConfig {
        asr_clip: 0.05,
        tts_clip: 0.02,
        accumulation_steps: 2,
    };
    let mut t = ChainTrainer::new(&asr, &tts, TrainStrategy::domain(true), balance, 0.0, 3).unwrap();
    let (mut asr_updates, mut tts_updates) = (0, 0);
    for i in 0..6 {
        let m = t.step(&mut asr, &mut tts, &fx.batch(i, 2)).unwrap();
        let sum = m.asr_loss + m.tts_loss + m.guided_loss + m.chain_loss;
        assert_eq!(m.total, sum);
        if let Some(n) = m.asr_update_norm {
            assert!(n <= balance.asr_clip * (1.0 + 1e-12));
            asr_updates += 1;
        }
        if let Some(n) = m.tts_update_norm {
            assert!(n <= balance.tts_clip * (1.0 + 1e-12));
            tts_updates += 1;
        }
    }
    assert_eq!((asr_updates, tts_updates), (6, 3));
}

#[test]
fn tts_updates_wait_for_accumulation() {
    let fx = ChainFixture::new();
    let (mut asr, mut tts) = (fx.asr.clone(), fx.tts.clone());
    let balance = GradBalanceConfig {
        accumulation_steps: 2,
        ..Default::default()
    };
    let mut t = ChainTrainer::new(&asr, &tts, TrainStrategy::domain(true), balance, 0.0, 5).unwrap();
    let h0 = tts.params().content_hash();
    t.step(&mut asr, &mut tts, &fx.batch(0, 2)).unwrap();
    assert_eq!(tts.params().content_hash(), h0, "TTS moved after step 1");
    t.step(&mut asr, &mut tts, &fx.batch(1, 2)).unwrap();
    assert_ne!(tts.params().content_hash(), h0, "TTS did not move after step 2");
}

#[test]
fn step_kind_must_match_mode() {
    let fx = ChainFixture::new();
    let (mut asr, mut tts) = (fx.asr.clone(), fx.tts.clone());
    let b = fx.batch(0, 1);
    let mut d = ChainTrainer::new(&asr, &tts, TrainStrategy::domain(true), Default::default(), 0.0, 1).unwrap();
    assert!(matches!(
        d.speaker_adapt_step(&mut asr, &mut tts, &b),
        Err(speech_chain::Error::State(_))
    ));
    let mut s = ChainTrainer::new(&asr, &tts, TrainStrategy::speaker(), Default::default(), 0.0, 1).unwrap();
    assert!(matches!(
        s.domain_adapt_step(&mut asr, &mut tts, &b),
        Err(speech_chain::Error::State(_))
    ));
}

fn adapt_epoch(fx: &ChainFixture, strategy: TrainStrategy, pool: &[SpeakerEmbedding]) -> (String, String, usize) {
    let (mut asr, mut tts) = (fx.asr.clone(), fx.tts.clone());
    let paired = fx.batch(0, 8).paired;
    let data = AdaptData {
        paired: &paired,
        texts: &fx.corpus.unpaired_target_text[..8],
        pool,
        dev: &[],
    };
    let cfg = AdaptConfig {
        epochs: 1,
        batch_size: 4,
        lr_decay: 0.5,
    };
    let balance = GradBalanceConfig {
        accumulation_steps: 2,
        ..Default::default()
    };
    let h = run_adaptation(&mut asr, &mut tts, &data, strategy, balance, &cfg, 0.0, 9, |_| {}).unwrap();
    assert!((h[0].total - (h[0].asr_loss + h[0].tts_loss + h[0].guided_loss + h[0].chain_loss)).abs() < 1e-12);
    (
        asr.params().content_hash(),
        tts.params().content_hash(),
        h[0].tts_updates,
    )
}

#[test]
fn frozen_tts_is_bit_identical_after_adaptation() {
    let fx = ChainFixture::new();
    let dim = fx.tts.config().speaker_dim;
    let pool = |k: usize| -> Vec<SpeakerEmbedding> {
        (0..k)
            .map(|i| SpeakerEmbedding {
                vector: unit_vector(dim, 10 + i),
                source_utt_id: format!("ref{i}"),
            })
            .collect()
    };
    let before = (fx.asr.params().content_hash(), fx.tts.params().content_hash());
    for (strategy, refs) in [
        (TrainStrategy::domain(false), 8),
        (TrainStrategy::speaker(), 1),
        (TrainStrategy::speaker(), 5),
    ] {
        let (asr_hash, tts_hash, tts_updates) = adapt_epoch(&fx, strategy, &pool(refs));
        assert_eq!(tts_hash, before.1, "{strategy:?}");
        assert_ne!(asr_hash, before.0, "{strategy:?}");
        assert_eq!(tts_updates, 0);
    }
    let (_, tts_hash, _) = adapt_epoch(&fx, TrainStrategy::domain(true), &pool(8));
    assert_ne!(tts_hash, before.1);
}

#[test]
fn speaker_step_leaves_tts_untouched() {
    let fx = ChainFixture::new();
    let (mut asr, mut tts) = (fx.asr.clone(), fx.tts.clone());
    let mut t = ChainTrainer::new(&asr, &tts, TrainStrategy::speaker(), Default::default(), 0.0, 2).unwrap();
    let h = tts.params().content_hash();
    let m = t.speaker_adapt_step(&mut asr, &mut tts, &fx.batch(2, 2)).unwrap();
    assert_eq!(m.tts_loss, 0.0);
    assert!(m.tts_update_norm.is_none());
    assert_eq!(tts.params().content_hash(), h);
}

#[test]
fn unpaired_items_carry_no_speech() {
    // Compile-time shape of the contract: an unpaired item has text and an
    // embedding only.
    let UnpairedItem {
        chars,
        phonemes,
        speaker,
    } = ChainFixture::new().batch(0, 1).unpaired.remove(0);
    assert!(!chars.is_empty() && !phonemes.is_empty());
    assert!((speaker.norm() - 1.0).abs() < 1e-12);
}
