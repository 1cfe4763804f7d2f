#![no_main]

use gcot_core::eval::{answers_equivalent, AnswerMode};
use gcot_core::normalize::parse_decimal;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|input: (&str, &str)| {
    let (a, b) = input;
    if let Some(v) = parse_decimal(a) {
        assert!(v.is_finite());
    }
    for mode in [AnswerMode::Exact, AnswerMode::Relaxed] {
        let _ = answers_equivalent(a, b, mode);
    }
});
