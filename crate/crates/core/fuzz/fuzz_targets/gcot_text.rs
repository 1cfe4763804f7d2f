#![no_main]

use gcot_core::assembler::strip_boxes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let (plain, boxes) = strip_boxes(text);
    assert!(plain.len() <= text.len());
    let chars = plain.chars().count();
    for (offset, _) in &boxes {
        assert!(*offset <= chars);
    }
    let (again, none) = strip_boxes(&plain);
    if none.is_empty() {
        assert_eq!(again, plain);
    }
});
