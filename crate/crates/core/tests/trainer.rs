use ozip_core::model::{init_params, ModelConfig, ModelParams, TrainBatch};
use ozip_core::numerics::{grad_check, Tensor2};
use ozip_core::tokenizer::{
    default_reserved, encode, train_bpe, Modality, RawData, TokenId, Vocabulary, BPE_BASE,
};
use ozip_core::trainer::{
    loss_and_grads, run_stages, BalancedSampler, ModalityPool, Stage, TrainConfig, TrainData, TrainObserver,
    Validation,
};
use ozip_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturb(p: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in p.names().into_iter().zip(p.leaves_mut()) {
        let s = if name.ends_with("router") { 0.5 } else { 0.1 };
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-s..s));
    }
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let vocab = BPE_BASE + 40;
    let mut params = init_params(&ModelConfig::with_dims(32, 2, 4, vocab), 3).unwrap();
    perturb(&mut params, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut speech = vec![Modality::Speech.prefix()];
    speech.extend((0..16).map(|_| rng.gen_range(0..256u32)));
    let mut text = vec![Modality::Text.prefix()];
    text.extend((0..16).map(|_| rng.gen_range(BPE_BASE as u32..vocab as u32)));
    let batch = TrainBatch::new(&[(Modality::Speech, &speech), (Modality::Text, &text)], vocab).unwrap();
    assert_eq!(batch.rows(), 32);
    let cfg = TrainConfig::default();
    let names = params.names();
    let flat: Vec<Tensor2> = params.leaves().into_iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        &names,
        &flat,
        |p| {
            let mut q = params.clone();
            for (dst, src) in q.leaves_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let (bd, grads) = loss_and_grads(&q, &batch, &cfg)?;
            let grads = grads.into_iter().zip(p).map(|(g, t)| g.unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())));
            Ok((bd.total, grads.collect()))
        },
        6,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn uniform_head_costs_eight_bits() {
    let vocab = BPE_BASE + 8;
    let mut p = init_params(&ModelConfig::with_dims(16, 1, 2, vocab), 1).unwrap();
    p.head = Tensor2::zeros(16, vocab);
    let toks: Vec<TokenId> = std::iter::once(Modality::Image.prefix()).chain(0..40).collect();
    let batch = TrainBatch::new(&[(Modality::Image, &toks)], vocab).unwrap();
    let (bd, _) = loss_and_grads(&p, &batch, &TrainConfig::default()).unwrap();
    assert!((bd.cross_entropy - 8.0).abs() < 1e-12);
    let recomposed = bd.cross_entropy + 0.001 * bd.z_loss + 0.01 * bd.balance;
    assert!((bd.total - recomposed).abs() < 1e-10);
    assert!(bd.z_loss >= 0.0 && bd.balance >= 0.0);
}

#[test]
fn confident_correct_head_costs_nothing() {
    let vocab = BPE_BASE + 8;
    let mut p = init_params(&ModelConfig::with_dims(16, 1, 2, vocab), 1).unwrap();
    p.head_ln_gain = Tensor2::zeros(1, 16);
    p.head_ln_bias = Tensor2::filled(1, 16, 1.0);
    p.head = Tensor2::zeros(16, vocab);
    for r in 0..16 {
        p.head.set(r, 7, 100.0);
    }
    let toks = [Modality::Speech.prefix(), 7, 7, 7, 7];
    let batch = TrainBatch::new(&[(Modality::Speech, &toks)], vocab).unwrap();
    let cfg = TrainConfig::default();
    let (bd, _) = loss_and_grads(&p, &batch, &cfg).unwrap();
    assert!(bd.cross_entropy < 1e-12);
    assert!((bd.total - (cfg.lambda * bd.z_loss + cfg.mu * bd.balance)).abs() < 1e-10);
}

#[test]
fn target_outside_mask_is_input_error() {
    let toks = [Modality::Speech.prefix(), 3, 300];
    let err = TrainBatch::new(&[(Modality::Speech, &toks)], BPE_BASE + 100);
    assert!(matches!(err, Err(Error::Input(_))));
}

fn markov_text(seed: u64, len: usize) -> Vec<u8> {
    let words = ["the", "cat", "sat", "on", "a", "mat", "and", "dog", "ran", "far", "away", "home"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut w = 0;
    while out.len() < len {
        w = if rng.gen_bool(0.7) { (w * 5 + 1) % words.len() } else { rng.gen_range(0..words.len()) };
        out.extend_from_slice(words[w].as_bytes());
        out.push(if rng.gen_bool(0.1) { b'\n' } else { b' ' });
    }
    out.truncate(len);
    out
}

fn small_setup(text_len: usize) -> (ModelParams, TrainData, Vocabulary) {
    let text = markov_text(1, text_len);
    let bpe = train_bpe(&[&text], 320, &default_reserved()).unwrap();
    let vocab = Vocabulary::new(bpe);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let speech: Vec<u8> =
        (0..text_len).map(|i| (128.0 + 60.0 * (i as f64 * 0.2).sin()) as u8 ^ (rng.gen::<u8>() & 3)).collect();
    let seqs = vec![
        encode(RawData::Bytes(&text), Modality::Text, &vocab).unwrap(),
        encode(RawData::Bytes(&speech), Modality::Speech, &vocab).unwrap(),
    ];
    let data = TrainData::from_sequences(&seqs, &vocab, 0.1, 4);
    let params = init_params(&ModelConfig::with_dims(16, 1, 2, vocab.size()), 7).unwrap();
    (params, data, vocab)
}

fn small_cfg(stages: [usize; 3]) -> TrainConfig {
    TrainConfig {
        stage_epochs: stages,
        epoch_batches: 10,
        batch_size: 4,
        seq_len: 48,
        lr_max: 3e-3,
        lr_min: 3e-4,
        valid_chunks: 2,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Recorder {
    routers: Vec<(Stage, Vec<(String, Tensor2)>)>,
    lines: usize,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, r: &ozip_core::trainer::StepRecord) -> ozip_core::Result<()> {
        assert!(r.log_line().starts_with(&format!("step={}", r.step)));
        self.lines += 1;
        Ok(())
    }

    fn on_stage_end(&mut self, stage: Stage, params: &ModelParams, _: &Validation) -> ozip_core::Result<()> {
        let routers =
            params.leaves().into_iter().filter(|(n, _)| n.ends_with("router")).map(|(n, t)| (n, t.clone())).collect();
        self.routers.push((stage, routers));
        Ok(())
    }
}

#[test]
fn frozen_routers_are_bit_identical_across_their_stage() {
    let (mut params, data, _) = small_setup(20_000);
    perturb(&mut params, 9);
    let start: Vec<(String, Tensor2)> =
        params.leaves().into_iter().filter(|(n, _)| n.ends_with("router")).map(|(n, t)| (n, t.clone())).collect();
    let mut rec = Recorder::default();
    run_stages(&mut params, &data, &small_cfg([1, 1, 1]), &mut rec).unwrap();
    assert_eq!(rec.lines, 30);
    let get = |v: &[(String, Tensor2)], n: &str| v.iter().find(|(x, _)| x == n).unwrap().1.clone();
    let after1 = &rec.routers[0].1;
    let after2 = &rec.routers[1].1;
    // stage 1: ffn router fixed, time router trained
    assert_eq!(get(&start, "blocks.0.ffn.router"), get(after1, "blocks.0.ffn.router"));
    assert_ne!(get(&start, "blocks.0.time.router"), get(after1, "blocks.0.time.router"));
    // stage 2: time router fixed, ffn router trained
    assert_eq!(get(after1, "blocks.0.time.router"), get(after2, "blocks.0.time.router"));
    assert_ne!(get(after1, "blocks.0.ffn.router"), get(after2, "blocks.0.ffn.router"));
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let (mut params, data, _) = small_setup(8_000);
    let before = params.clone();
    let report = run_stages(&mut params, &data, &small_cfg([0, 0, 0]), &mut ()).unwrap();
    assert!(report.steps.is_empty());
    assert_eq!(params, before);
}

#[test]
fn training_is_reproducible() {
    let (p0, data, _) = small_setup(10_000);
    let cfg = small_cfg([1, 0, 1]);
    let (mut a, mut b) = (p0.clone(), p0);
    run_stages(&mut a, &data, &cfg, &mut ()).unwrap();
    run_stages(&mut b, &data, &cfg, &mut ()).unwrap();
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
}

#[test]
fn validation_improves_stage_over_stage() {
    let (mut params, data, _) = small_setup(64 * 1024);
    let report = run_stages(&mut params, &data, &small_cfg([1, 1, 3]), &mut ()).unwrap();
    let ce: Vec<f64> = report.validation.iter().map(|v| v.mean_bits_per_token()).collect();
    for w in ce.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{ce:?}");
    }
    assert!(ce[3] < ce[0], "{ce:?}");
    let text = report.validation[3].bits_per_byte(Modality::Text).unwrap();
    assert!(text > 0.0 && text < 8.0);
}

#[test]
fn sampler_is_deterministic_and_fair() {
    // token = doc * 10000 + position, documents a whole number of windows
    // long, so a window's first token names the unit it was drawn from
    let seq = 10;
    let pools: Vec<ModalityPool> = Modality::ALL
        .iter()
        .enumerate()
        .map(|(i, &modality)| ModalityPool {
            modality,
            docs: (0..=i).map(|d| (0..(d + 1) * 4 * seq).map(|t| (d * 10000 + t) as TokenId).collect()).collect(),
        })
        .collect();
    let mut a = BalancedSampler::new(pools.clone(), 14, seq, 3).unwrap();
    let mut b = BalancedSampler::new(pools, 14, seq, 3).unwrap();
    let cycles = a.cycle_lengths();
    let batches = 50;
    let mut counts: Vec<std::collections::HashMap<(u32, u32), usize>> = vec![Default::default(); 7];
    for _ in 0..batches {
        let x = a.next_batch();
        assert_eq!(x, b.next_batch());
        for (m, w) in x {
            assert_eq!(w.len(), seq + 1);
            *counts[m as usize].entry((w[1] / 10000, (w[1] % 10000) / seq as u32)).or_default() += 1;
        }
    }
    for (m, &(_, cycle)) in cycles.iter().enumerate() {
        let drawn = batches * 2;
        assert_eq!(counts[m].values().sum::<usize>(), drawn);
        let lo = drawn / cycle;
        let hi = drawn.div_ceil(cycle);
        assert_eq!(counts[m].len(), cycle.min(drawn));
        assert!(counts[m].values().all(|&c| c >= lo && c <= hi), "{m}: {:?}", counts[m]);
    }
}
