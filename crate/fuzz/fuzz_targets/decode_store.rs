#![no_main]

use distcap::embedstore::EmbeddingStore;
use libfuzzer_sys::fuzz_target;

// input: manifest text, a NUL byte, then the matrix bytes
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else {
        return;
    };
    let Ok(manifest) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    if let Ok(store) = EmbeddingStore::decode(&data[split + 1..], manifest) {
        for r in 0..store.rows() {
            let n: f64 = store.row_at(r).iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
});
