#![no_main]

use gcot_core::bootstrap::parse_state_file;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(s) = parse_state_file(text) {
        assert_eq!(s.counts_per_iteration.len(), s.iteration as usize);
        assert!(s.counts_per_iteration.windows(2).all(|w| w[0] <= w[1]));
    }
});
