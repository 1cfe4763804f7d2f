#![no_main]

use gcot_core::gateway::ChatRequest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = ChatRequest::from_wire(data) {
        let wire = req.to_wire();
        let back = ChatRequest::from_wire(wire.as_bytes()).expect("own output must decode");
        assert_eq!(back.to_wire(), wire);
    }
});
