#![no_main]

use gcot_core::grounder::parse_crop_provenance;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_crop_provenance(data);
});
