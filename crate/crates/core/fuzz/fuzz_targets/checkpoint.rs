#![no_main]

use libfuzzer_sys::fuzz_target;
use unmask::io::{backbone_from_checkpoint, planner_from_checkpoint, Checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(again.blocks.len(), ck.blocks.len());
        assert_eq!(again.kind, ck.kind);
        let _ = backbone_from_checkpoint(&ck);
        let _ = planner_from_checkpoint(&ck);
    }
});
