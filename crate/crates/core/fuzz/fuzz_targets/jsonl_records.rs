#![no_main]

use gcot_core::bootstrap::GroundingItem;
use gcot_core::dataset_io::{parse_records, render_record_line};
use gcot_core::model::{CoTRecord, GCoTRecord, VerifiedBox};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(records) = parse_records::<GCoTRecord>(text) {
        for r in &records {
            let line = render_record_line(r).unwrap();
            let back = parse_records::<GCoTRecord>(&line).unwrap();
            assert_eq!(back.len(), 1);
        }
    }
    let _ = parse_records::<CoTRecord>(text);
    let _ = parse_records::<VerifiedBox>(text);
    let _ = parse_records::<GroundingItem>(text);
});
