#![no_main]
use deepsd::asd::{decode_model, encode_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_model(data) {
        assert_eq!(encode_model(&m), data);
    }
});
