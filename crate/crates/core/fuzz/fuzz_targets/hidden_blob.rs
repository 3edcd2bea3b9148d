#![no_main]

use libfuzzer_sys::fuzz_target;
use unmask::planner::{decode_hidden_blob, encode_hidden_blob};

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = decode_hidden_blob(data) {
        assert_eq!(encode_hidden_blob(&h), data);
    }
});
