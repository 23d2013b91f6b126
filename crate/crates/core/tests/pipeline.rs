use ozip_core::coder::{order0_bits_per_byte, quantize_cdf, PRECISION};
use ozip_core::corpus::{make_fixtures, FixtureProfile, Manifest, Sample};
use ozip_core::model::{init_params, ModelConfig};
use ozip_core::pipeline::bench::GZIP_REFERENCE;
use ozip_core::pipeline::{bench, build_vocab, export_checkpoint, selfcheck, Codec, Container};
use ozip_core::tokenizer::{Modality, Vocabulary};
use ozip_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smoke() -> (tempfile::TempDir, Vec<Sample>) {
    let dir = tempfile::tempdir().unwrap();
    make_fixtures(dir.path(), FixtureProfile::Smoke, 11, None).unwrap();
    let samples = Manifest::load(dir.path()).unwrap().samples(dir.path(), None).unwrap();
    (dir, samples)
}

fn codec_for(samples: &[Sample], seed: u64) -> (Codec, Vec<u8>) {
    let train: Vec<Sample> = samples.iter().filter(|s| s.path.to_string_lossy().contains("train")).cloned().collect();
    let vocab: Vocabulary = build_vocab(&train, 300, 1 << 20).unwrap();
    let params = init_params(&ModelConfig::with_dims(16, 1, 2, vocab.size()), seed).unwrap();
    let ckpt = export_checkpoint(&params, &vocab).unwrap();
    (Codec::from_checkpoint_bytes(&ckpt).unwrap(), ckpt)
}

#[test]
fn every_fixture_roundtrips_and_sizes_add_up() {
    let (_dir, samples) = smoke();
    let (codec, _) = codec_for(&samples, 1);
    for s in &samples {
        let out = codec.compress(&s.bytes, s.modality, false).unwrap();
        let packed = out.container.to_bytes().unwrap();
        assert_eq!(packed.len(), out.container.encoded_len());
        assert_eq!(packed.len(), out.container.header_len() + out.container.payload_len() + 4);
        assert!(out.audit.within_bound(), "{}", s.path.display());
        assert_eq!(codec.decompress(&packed).unwrap(), s.bytes, "{}", s.path.display());
    }
}

#[test]
fn empty_input_has_no_chunks() {
    let (_dir, samples) = smoke();
    let (codec, _) = codec_for(&samples, 1);
    for m in Modality::ALL {
        let c = codec.compress(&[], m, false).unwrap().container;
        assert_eq!(c.header.original_len, 0);
        assert!(c.chunks.is_empty(), "{m}");
        assert!(codec.decompress(&c.to_bytes().unwrap()).unwrap().is_empty());
        assert!(c.to_string().contains("original_len=0"));
    }
}

#[test]
fn corruption_and_foreign_models_are_refused() {
    let (_dir, samples) = smoke();
    let (codec, _) = codec_for(&samples, 1);
    let (other, _) = codec_for(&samples, 2);
    let text = samples.iter().find(|s| s.modality == Modality::Text && s.len() > 1000).unwrap();
    let packed = codec.compress(&text.bytes, Modality::Text, false).unwrap().container.to_bytes().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mut bad = packed.clone();
        let i = rng.gen_range(0..bad.len());
        bad[i] ^= 1 << rng.gen_range(0..8);
        assert!(codec.decompress(&bad).is_err());
    }
    let mut bad = packed.clone();
    let n = bad.len();
    bad[n - 10] ^= 0x10;
    assert!(matches!(codec.decompress(&bad), Err(Error::Checksum { .. })));
    assert!(matches!(other.decompress(&packed), Err(Error::HashMismatch { what: "model" })));
}

#[test]
fn compression_is_deterministic_across_codec_instances() {
    let (_dir, samples) = smoke();
    let (a, ckpt) = codec_for(&samples, 1);
    let b = Codec::from_checkpoint_bytes(&ckpt).unwrap();
    for s in samples.iter().filter(|s| s.path.to_string_lossy().contains("test")) {
        let x = a.compress(&s.bytes, s.modality, false).unwrap().container.to_bytes().unwrap();
        let y = b.compress(&s.bytes, s.modality, true).unwrap().container.to_bytes().unwrap();
        assert_eq!(x, y, "{}", s.path.display());
        assert_eq!(b.decompress(&x).unwrap(), s.bytes);
    }
}

#[test]
fn emitted_cdfs_respect_the_mask() {
    let (_dir, samples) = smoke();
    let (codec, _) = codec_for(&samples, 4);
    let vocab = codec.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in Modality::ALL {
        let mask = vocab.mask_for(m);
        let range = vocab.range_for(m);
        let mut ctx = codec.model().context(m);
        let mut prev = m.prefix();
        for _ in 0..20 {
            let probs = ctx.predict_next_full(prev).unwrap();
            assert!(probs.iter().zip(mask).all(|(&p, &on)| on || p == 0.0), "{m}");
            let cdf = quantize_cdf(&probs, mask, PRECISION).unwrap();
            for id in 0..vocab.size() {
                let f = cdf.freq_of(id);
                assert_eq!(f >= 1, mask[id], "{m} id {id}");
            }
            prev = rng.gen_range(range.clone()) as u32;
        }
    }
}

#[test]
fn bench_reports_consistent_rows() {
    let (_dir, samples) = smoke();
    let (codec, ckpt) = codec_for(&samples, 1);
    let test: Vec<Sample> = samples.iter().filter(|s| !s.path.to_string_lossy().contains("train")).cloned().collect();
    let report = bench(&codec, &test, true).unwrap();
    assert_eq!(report.rows.len(), test.iter().filter(|s| !s.is_empty()).count());
    for r in &report.rows {
        assert!(r.bits_per_byte > 0.0);
        assert!(r.adj_bits_per_byte > r.bits_per_byte);
        let expect = 8.0 * (r.comp_bytes + ckpt.len() as u64) as f64 / r.orig_bytes as f64;
        assert!((r.adj_bits_per_byte - expect).abs() < 1e-12);
    }
    let csv = report.to_csv();
    assert!(csv.starts_with("file,modality,orig_bytes,comp_bytes,bits_per_byte,adj_bits_per_byte,enc_kbs,dec_kbs,baseline_bpb\n"));
    assert_eq!(csv.lines().count(), report.rows.len() + 1);
    assert!(report.usage.as_ref().unwrap().to_csv().lines().count() > 1);
    assert!(report.summary_table().contains("2.590 (enwik9)"));
}

#[test]
fn gzip_reference_covers_each_modality_once() {
    let mut seen: Vec<Modality> = GZIP_REFERENCE.iter().map(|r| r.0).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 7);
    assert!(GZIP_REFERENCE.contains(&(Modality::Text, "enwik9", 2.590)));
}

#[test]
fn order0_baseline_on_random_bytes_is_eight_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bytes: Vec<u8> = (0..200_000).map(|_| rng.gen()).collect();
    let bpb = order0_bits_per_byte(&bytes).unwrap();
    assert!((bpb - 8.0).abs() <= 0.1, "{bpb}");
}

#[test]
fn container_header_survives_parsing() {
    let (_dir, samples) = smoke();
    let (codec, _) = codec_for(&samples, 1);
    let img = samples.iter().find(|s| s.modality == Modality::Image && s.len() > 100).unwrap();
    let c = codec.compress(&img.bytes, Modality::Image, false).unwrap().container;
    let parsed = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(parsed, c);
    let g = parsed.header.geometry.unwrap();
    assert_eq!(parsed.chunks.len(), g.total_tokens() / 768);
}

#[test]
fn selfcheck_passes() {
    for s in selfcheck() {
        assert!(s.ok(), "{s}");
        assert!(s.total > 0);
    }
}
