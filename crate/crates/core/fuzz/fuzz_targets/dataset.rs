#![no_main]

use libfuzzer_sys::fuzz_target;
use ndarray::Array2;
use unmask::planner::{decode_hidden_blob, parse_dataset_jsonl};

// Input: u32 LE blob length, the hidden-state blob, then the record file.
fuzz_target!(|data: &[u8]| {
    let Some((len, rest)) = data.split_first_chunk::<4>() else {
        return;
    };
    let len = (u32::from_le_bytes(*len) as usize).min(rest.len());
    let (blob, records) = rest.split_at(len);
    let hidden = decode_hidden_blob(blob).unwrap_or_else(|_| Array2::zeros((64, 16)));
    if let Ok(ds) = parse_dataset_jsonl(records, hidden) {
        let _ = ds.relabel_mismatches();
        let mut out = Vec::new();
        ds.write_jsonl(&mut out).unwrap();
    }
});
