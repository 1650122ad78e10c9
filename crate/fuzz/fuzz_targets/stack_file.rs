#![no_main]
use deepsd::stack::{parse_stack_file, render_stack_file};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = parse_stack_file(text) {
            let _ = parse_stack_file(&render_stack_file(&file));
        }
    }
});
