#![no_main]

use gcot_core::config::{interpolate, Config};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let lookup = |name: &str| (name.len() % 2 == 0).then(|| format!("v-{name}"));
    let _ = interpolate(text, lookup);
    if let Ok(cfg) = Config::parse(text, lookup) {
        cfg.validate().expect("parsed config must validate");
    }
});
