use ealm::prune::{prune_bundle, sparsity, PruneSpec};
use ealm::quant::{quantize_bundle, QuantSpec};
use ealm::tensors::{decode_bundle, encode_bundle, load_bundle, save_bundle, Precision, TargetFilter, Tensor};
use ealm::tinylm::tokenizer::encode_prompt;
use ealm::tinylm::{
    count_flops_and_skipped, forward, init_model, load_adapters, merge_adapters, save_adapters, LmConfig,
    LoraAdapters, LoraConfig,
};

fn lm() -> LmConfig {
    LmConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq: 48,
        init_seed: 11,
        ..LmConfig::default()
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn container_header_layout() {
    let b = init_model(&lm()).unwrap();
    let bytes = encode_bundle(&b).unwrap();
    assert_eq!(&bytes[..4], b"EALM");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize, b.len());
    assert_eq!(decode_bundle(&bytes).unwrap(), b);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_bundle(&bad).is_err());
    assert!(decode_bundle(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn every_precision_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_model(&lm()).unwrap();
    let prompt = encode_prompt("E07 fan noisy");
    for bits in Precision::ALL {
        let q = quantize_bundle(&base, &QuantSpec::new(bits)).unwrap();
        let p = dir.path().join(format!("m{}.ealm", bits.bits()));
        save_bundle(&q, &p).unwrap();
        let back = load_bundle(&p).unwrap();
        assert_eq!(back, q, "{bits:?}");
        assert_eq!(back.lineage.precision_bits, bits);
        let (a, b) = (forward(&q, None, &prompt).unwrap(), forward(&back, None, &prompt).unwrap());
        assert_eq!(a, b);
    }
}

#[test]
fn pruned_quantized_bundle_keeps_its_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let q4 = quantize_bundle(&init_model(&lm()).unwrap(), &QuantSpec::new(Precision::Int4)).unwrap();
    let pruned = prune_bundle(&q4, &PruneSpec::nm(2, 4)).unwrap();
    assert_eq!(pruned.lineage.sparsity, Some(0.5));
    assert!(sparsity(&pruned, &TargetFilter::Projections) >= 0.5);
    let p = dir.path().join("p.ealm");
    save_bundle(&pruned, &p).unwrap();
    let back = load_bundle(&p).unwrap();
    assert_eq!(back, pruned);
    assert_eq!(back.lineage.prune_spec, Some(PruneSpec::nm(2, 4)));

    // zeroed weights show up as skipped multiply-accumulates
    let tokens = encode_prompt("E01 pump hot");
    let dense = count_flops_and_skipped(&q4, None, &tokens).unwrap();
    let sparse = count_flops_and_skipped(&back, None, &tokens).unwrap();
    assert_eq!(dense.macs(), sparse.macs());
    assert!(sparse.skipped_macs() * 2 >= sparse.linear);
}

#[test]
fn adapters_round_trip_and_merge() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_model(&lm()).unwrap();
    let mut adapters = LoraAdapters::init(&base, &LoraConfig::default()).unwrap();
    for p in &mut adapters.pairs {
        let data: Vec<f32> = (0..p.b.numel()).map(|i| ((i % 5) as f32 - 2.0) * 0.05).collect();
        p.b = Tensor::new(p.b.shape().to_vec(), data).unwrap();
    }
    let p = dir.path().join("a.lora");
    save_adapters(&adapters, &p).unwrap();
    assert_eq!(load_adapters(&p).unwrap(), adapters);

    let prompt = encode_prompt("E42 valve stuck");
    let with = forward(&base, Some(&adapters), &prompt).unwrap();
    let merged = merge_adapters(&base, &adapters).unwrap();
    let folded = forward(&merged, None, &prompt).unwrap();
    assert!(max_diff(&with, &folded) < 1e-4);
    assert!(max_diff(&with, &forward(&base, None, &prompt).unwrap()) > 1e-3);
}
