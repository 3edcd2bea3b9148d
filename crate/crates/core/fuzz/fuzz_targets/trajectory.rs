#![no_main]

use libfuzzer_sys::fuzz_target;
use unmask::decode::Trajectory;
use unmask::lab::trace_metrics;
use unmask::Vocabulary;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Trajectory::read_jsonl(data) {
        let again = Trajectory::read_jsonl(t.to_jsonl().as_bytes()).unwrap();
        assert_eq!(again, t);
        let _ = trace_metrics(&t, &Vocabulary::standard());
    }
});
