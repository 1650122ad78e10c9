#![no_main]
use deepsd::grid::{decode_grd, encode_grd};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_grd(data) {
        // Whatever decodes must re-encode to the same bytes.
        assert_eq!(encode_grd(&g), data);
    }
});
