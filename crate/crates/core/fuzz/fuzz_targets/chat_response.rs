#![no_main]

use gcot_core::gateway::{parse_chat_response, render_chat_response};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = parse_chat_response(data) {
        let again = parse_chat_response(render_chat_response("m", &text).as_bytes()).unwrap();
        assert_eq!(again, text);
    }
});
