use sts_core::model::{Mllm, ModelConfig};
use sts_lab::checkpoint::{self, MAGIC, VERSION};
use sts_lab::LabError;

fn toy() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 32,
        n_visual_tokens: 8,
        max_seq_len: 16,
        patch_dim: 6,
    }
}

fn values(m: &Mllm) -> Vec<u64> {
    m.parameters().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
}

fn rejects(bytes: &[u8]) -> String {
    match checkpoint::from_bytes(bytes) {
        Err(LabError::Checkpoint(msg)) => msg,
        Err(e) => panic!("wrong error kind: {e}"),
        Ok(_) => panic!("corrupt checkpoint accepted"),
    }
}

#[test]
fn round_trip_is_bitwise() {
    let model = Mllm::new(toy(), 5).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    assert_eq!(bytes.len(), 84 + 8 * model.param_count());
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(values(&back), values(&model));
    assert_eq!(checkpoint::to_bytes(&back), bytes);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let model = Mllm::new(toy(), 6).unwrap();
    checkpoint::save(&path, &model).unwrap();
    assert_eq!(values(&checkpoint::load(&path).unwrap()), values(&model));
    let err = checkpoint::load(&dir.path().join("absent.bin")).unwrap_err();
    assert!(err.to_string().contains("absent.bin"));
}

#[test]
fn corruption_is_detected() {
    let bytes = checkpoint::to_bytes(&Mllm::new(toy(), 7).unwrap());
    assert!(rejects(&bytes[..40]).contains("magic"));
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(rejects(&b).contains("magic"));
    let mut b = bytes.clone();
    b[8] = 9;
    assert!(rejects(&b).contains("version"));
    let mut b = bytes.clone();
    b[12 + 16..12 + 24].copy_from_slice(&3u64.to_le_bytes());
    assert!(rejects(&b).contains("config"));
    let mut b = bytes.clone();
    b[76..84].copy_from_slice(&1u64.to_le_bytes());
    assert!(rejects(&b).contains("parameter count"));
    assert!(rejects(&bytes[..bytes.len() - 8]).contains("bytes"));
    let mut b = bytes.clone();
    b.push(0);
    assert!(rejects(&b).contains("bytes"));
}
