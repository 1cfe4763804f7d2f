#![no_main]

use gcot_core::extract::{build_sub_questions, extract_targets, MAX_TARGETS};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let targets = extract_targets(text);
    assert!(targets.len() <= MAX_TARGETS);
    for t in &targets {
        t.check_in(text).expect("span must address its surface");
    }
    for w in targets.windows(2) {
        assert!(w[0].span.end <= w[1].span.start);
    }
    assert_eq!(build_sub_questions(&targets).len(), targets.len());
});
