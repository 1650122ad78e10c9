#![no_main]
use deepsd::nn::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_checkpoint(data) {
        assert_eq!(encode_checkpoint(&p), data);
    }
});
