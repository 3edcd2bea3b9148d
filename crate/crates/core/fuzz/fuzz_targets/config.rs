#![no_main]

use libfuzzer_sys::fuzz_target;
use unmask::io::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let text = cfg.to_toml().unwrap();
        let again = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(again.to_toml().unwrap(), text);
    }
});
