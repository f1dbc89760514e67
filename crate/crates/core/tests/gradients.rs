//! Analytic gradients against central finite differences.

mod common;

use common::numerics::*;

#[test]
fn asr_loss_two_frames_two_tokens() {
    let (err, name) = asr_loss_error();
    assert!(err < TOL, "asr_loss: relative error {err:.3e} on {name}");
}

#[test]
fn tts_loss_two_phonemes_four_frames() {
    let (err, name) = tts_loss_error();
    assert!(err < TOL, "tts_loss: relative error {err:.3e} on {name}");
}

#[test]
fn guided_attention_loss_through_tts_alignment() {
    let (err, name) = guided_attention_error();
    assert!(err < TOL, "guided attention: relative error {err:.3e} on {name}");
}

#[test]
fn chain_loss_through_fixed_length_generation() {
    let (err, name) = chain_loss_error();
    assert!(err < TOL, "chain_loss: relative error {err:.3e} on {name}");
}

#[test]
fn attention_context_wrt_decoder_state() {
    let err = attention_context_error();
    assert!(err < TOL, "context gradient: relative error {err:.3e}");
}
