#![no_main]

use distcap::ciderscore::{cider, References};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let Ok(refs) = References::parse(text) else {
        return;
    };
    let Ok(idf) = refs.idf() else {
        return;
    };
    for captions in refs.by_image.values() {
        if let Some(first) = captions.first() {
            let score = cider(first, captions, &idf).expect("non-empty references");
            assert!(score >= 0.0 && score.is_finite());
        }
    }
});
