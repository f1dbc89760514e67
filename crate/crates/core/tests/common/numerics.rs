//! Finite-difference oracles (h = 1e-3) on micro instances, 64-bit
//! throughout.

use super::*;
use speech_chain::asr::Asr;
use speech_chain::autograd::Graph;
use speech_chain::chain::{chain_loss, UnpairedItem};
use speech_chain::nn::LocationAttention;
use speech_chain::params::ParamStore;
use speech_chain::speaker::SpeakerEmbedding;
use speech_chain::tensor::Tensor;
use speech_chain::tts::{guided_attention_var, Tts, TtsConfig};

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

fn asr_store(a: &mut Asr) -> &mut ParamStore {
    a.params_mut()
}

fn tts_store(t: &mut Tts) -> &mut ParamStore {
    t.params_mut()
}

/// Worst relative error of `asr_loss` on a 2-frame, 2-token instance.
pub fn asr_loss_error() -> (f64, String) {
    let mut asr = Asr::new(tiny_asr()).unwrap();
    jitter(asr.params_mut(), 1);
    let spec = random_spec(2, 20, 3);
    let target = chars("ab");
    let loss = |a: &Asr| {
        let mut g = Graph::new();
        let b = g.bind(a.params(), false);
        let f = a.loss(&mut g, b, &spec, &target).unwrap();
        g.scalar(f.loss)
    };
    let mut g = Graph::new();
    let b = g.bind(asr.params(), true);
    let f = asr.loss(&mut g, b, &spec, &target).unwrap();
    assert_eq!(f.tokens, 3);
    g.backward(f.loss);
    let analytic = g.param_grads(b);
    drop(g);
    worst_param_error(&mut asr, asr_store, loss, &analytic, H)
}

fn tts_case() -> (
    Tts,
    speech_chain::corpus::TokenSequence,
    speech_chain::corpus::Spectrogram,
    Vec<f64>,
) {
    let cfg = TtsConfig {
        prenet_dropout: 0.0,
        ..tiny_tts()
    };
    let mut tts = Tts::new(cfg).unwrap();
    jitter(tts.params_mut(), 2);
    (tts, phonemes("B AH"), random_spec(4, 20, 5), vec![0.6, 0.8])
}

/// Worst relative error of `L_TTS` on a 2-phoneme, 4-frame instance.
pub fn tts_loss_error() -> (f64, String) {
    let (mut tts, ph, target, spk) = tts_case();
    let value = |t: &Tts, trainable: bool| {
        let mut g = Graph::new();
        let b = g.bind(t.params(), trainable);
        let s = g.input(Tensor::row_vector(&spk));
        let out = t.teacher_forced(&mut g, b, &ph, s, &target, None).unwrap();
        let l = t.loss(&mut g, &out, &target).unwrap();
        let v = g.scalar(l.total);
        if trainable {
            g.backward(l.total);
            (v, Some(g.param_grads(b)))
        } else {
            (v, None)
        }
    };
    let analytic = value(&tts, true).1.unwrap();
    worst_param_error(&mut tts, tts_store, |t| value(t, false).0, &analytic, H)
}

/// Worst relative error of the guided-attention loss through the TTS.
pub fn guided_attention_error() -> (f64, String) {
    let (mut tts, ph, target, spk) = tts_case();
    let sigma = tts.config().guided_attention.sigma;
    let value = |t: &Tts, trainable: bool| {
        let mut g = Graph::new();
        let b = g.bind(t.params(), trainable);
        let s = g.input(Tensor::row_vector(&spk));
        let out = t.teacher_forced(&mut g, b, &ph, s, &target, None).unwrap();
        let ga = guided_attention_var(&mut g, out.alignment, sigma);
        let v = g.scalar(ga);
        if trainable {
            g.backward(ga);
            (v, Some(g.param_grads(b)))
        } else {
            (v, None)
        }
    };
    let (v, analytic) = value(&tts, true);
    assert!(v > 0.0);
    worst_param_error(&mut tts, tts_store, |t| value(t, false).0, &analytic.unwrap(), H)
}

/// Worst relative error of the chain loss over both models.
pub fn chain_loss_error() -> (f64, String) {
    // A threshold of 1 never fires, so generation always runs to max_frames
    // and the unrolled graph has the same shape under every perturbation.
    // With these jitter seeds no ReLU input of the instance crosses zero
    // under an h perturbation; other seeds can straddle a kink.
    let tts_cfg = TtsConfig {
        stop_threshold: 1.0,
        max_frames: Some(4),
        ..tiny_tts()
    };
    let mut tts = Tts::new(tts_cfg).unwrap();
    let mut asr = Asr::new(tiny_asr()).unwrap();
    jitter(tts.params_mut(), 3);
    jitter(asr.params_mut(), 6);
    let item = UnpairedItem {
        chars: chars("ab"),
        phonemes: phonemes("B AH"),
        speaker: SpeakerEmbedding {
            vector: vec![0.6, 0.8],
            source_utt_id: "u".into(),
        },
    };
    let c = chain_loss(&asr, &tts, &item, true).unwrap();
    assert_eq!(c.frames, 4);
    assert!(c.truncated);
    let tts_grads = c.tts_grads.clone().unwrap();
    let a = worst_param_error(
        &mut asr,
        asr_store,
        |a| chain_loss(a, &tts, &item, false).unwrap().loss,
        &c.asr_grads,
        H,
    );
    let t = worst_param_error(
        &mut tts,
        tts_store,
        |t| chain_loss(&asr, t, &item, false).unwrap().loss,
        &tts_grads,
        H,
    );
    if a.0 >= t.0 {
        a
    } else {
        t
    }
}

/// Relative error of the attention context gradient w.r.t. the query.
pub fn attention_context_error() -> f64 {
    let mut store = ParamStore::new();
    let mut rng = seed::rng(17);
    let att = LocationAttention::new(&mut store, "att", 5, 4, 6, 2, 3, &mut rng);
    let values = random_spec(7, 4, 1).into_frames();
    let proj = random_spec(1, 4, 2).into_frames();
    let mut prev = Tensor::zeros(1, 7);
    prev.data_mut().copy_from_slice(&[0.1, 0.3, 0.2, 0.1, 0.1, 0.1, 0.1]);
    let value = |q: &[f64]| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let b = g.bind(&store, false);
        let query = g.leaf(Tensor::row_vector(q));
        let v = g.input(values.clone());
        let p = g.input(prev.clone());
        let mem = att.prepare(&mut g, b, v);
        let (ctx, alpha) = att.step(&mut g, b, query, mem, p);
        let row_sum: f64 = g.value(alpha).data().iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-5);
        let w = g.input(proj.clone());
        let weighted = g.mul(ctx, w);
        let out = g.sum(weighted);
        let s = g.scalar(out);
        g.backward(out);
        (s, g.grad(query).unwrap().data().to_vec())
    };
    let q0: Vec<f64> = random_spec(1, 5, 9).into_frames().into_data();
    let (_, analytic) = value(&q0);
    let fd: Vec<f64> = (0..q0.len())
        .map(|k| {
            let mut up = q0.clone();
            up[k] += H;
            let mut down = q0.clone();
            down[k] -= H;
            (value(&up).0 - value(&down).0) / (2.0 * H)
        })
        .collect();
    rel_err(&fd, &analytic)
}
