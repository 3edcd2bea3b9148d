#![no_main]

use libfuzzer_sys::fuzz_target;
use unmask::tasks::{from_jsonl, to_jsonl};

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = from_jsonl(data) {
        let again = from_jsonl(to_jsonl(&v).unwrap().as_bytes()).unwrap();
        assert_eq!(again, v);
    }
});
