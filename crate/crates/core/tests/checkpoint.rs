use seqtrans::cli::evaluate_checkpoint;
use seqtrans::data::Split;
use seqtrans::eval::{EvalProtocol, Negatives};
use seqtrans::synth::{generate_split, SynthSpec};
use seqtrans::train::{fit, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig};
use seqtrans::Variant;

#[test]
fn saved_checkpoint_scores_identically() {
    let spec = SynthSpec::noisy_cycle(4, 8, 10, 40, 0.8, 1).unwrap();
    let ds = generate_split(&spec).unwrap();
    let protocol = EvalProtocol {
        negatives: Negatives::Sampled(8),
        ..EvalProtocol::default()
    };
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::STstm, Variant::Ivaec, Variant::Lstm] {
        let cfg = TrainConfig {
            variant,
            d: 8,
            max_epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let ck = fit(&ds, &cfg, &protocol, None).unwrap().checkpoint;
        let path = dir.path().join(format!("{}.bin", variant.tag()));
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.config, ck.config);

        let (a, ca) = evaluate_checkpoint(&ck, &ds, &protocol, Split::Test).unwrap();
        let (b, cb) = evaluate_checkpoint(&back, &ds, &protocol, Split::Test).unwrap();
        assert_eq!(a.ranks, b.ranks);
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(ca.map(|r| r.to_json()), cb.map(|r| r.to_json()));
    }
}

#[test]
fn flipped_byte_is_detected() {
    let spec = SynthSpec::noisy_cycle(3, 5, 10, 20, 0.8, 1).unwrap();
    let ds = generate_split(&spec).unwrap();
    let cfg = TrainConfig {
        d: 4,
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let protocol = EvalProtocol {
        negatives: Negatives::FullCatalog,
        ..EvalProtocol::default()
    };
    let ck = fit(&ds, &cfg, &protocol, None).unwrap().checkpoint;
    let mut bytes = ck.to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..mid]).is_err());
}
