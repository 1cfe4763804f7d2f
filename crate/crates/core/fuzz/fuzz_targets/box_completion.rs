#![no_main]

use gcot_core::grounder::{find_quadruples, parse_box_completion};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    for (range, _) in find_quadruples(text) {
        assert!(text.is_char_boundary(range.start) && text.is_char_boundary(range.end));
    }
    if let Ok(b) = parse_box_completion(text) {
        assert!(b.x1 < b.x2 && b.y1 < b.y2);
        assert!([b.x1, b.y1, b.x2, b.y2].iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
