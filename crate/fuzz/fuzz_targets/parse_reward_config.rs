#![no_main]

use distcap::scstreward::RewardConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(c) = RewardConfig::from_kv(text) {
        assert_eq!(RewardConfig::from_kv(&c.to_kv()).expect("re-parse"), c);
    }
});
