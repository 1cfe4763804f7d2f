#![no_main]

use gcot_core::distiller::parse_answer_marker;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(p) = parse_answer_marker(text) {
        assert!(!p.raw.trim().is_empty());
        assert!(text.contains(&p.raw));
    }
});
