#![no_main]
use deepsd::asd::parse_locations;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_locations(text);
    }
});
