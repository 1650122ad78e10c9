#![no_main]
use deepsd::config::KeyValues;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(kv) = KeyValues::parse(text) {
            assert_eq!(KeyValues::parse(&kv.to_text()).ok(), Some(kv));
        }
    }
});
