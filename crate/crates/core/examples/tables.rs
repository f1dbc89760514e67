use speech_chain::corpus::Corpus;
use speech_chain::experiment::{run_seed, systems::*, ExperimentConfig, TEST_SOURCE, TEST_TARGET};

fn main() {
    let cfg = ExperimentConfig::default();
    let corpus = Corpus::generate(&cfg.corpus).unwrap();
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    for s in seeds {
        let t0 = std::time::Instant::now();
        let r = run_seed(&cfg, &corpus, s, &mut |l| eprintln!("[{s}] {l} ({:.0?})", t0.elapsed())).unwrap();
        for sys in [BASELINE, DOMAIN_ASR_ONLY, DOMAIN_BOTH, SPEAKER_REFS1, SPEAKER_REFS5] {
            println!(
                "seed {s} {sys} src {:?} tgt {:?}",
                r.asr_wer(sys, TEST_SOURCE),
                r.asr_wer(sys, TEST_TARGET)
            );
        }
        for sys in [TTS_BASELINE, TTS_ADAPTED] {
            println!(
                "seed {s} {sys} src {:?} tgt {:?}",
                r.tts_wer(sys, TEST_SOURCE),
                r.tts_wer(sys, TEST_TARGET)
            );
        }
        println!("seed {s} elapsed {:?}", t0.elapsed());
    }
}
