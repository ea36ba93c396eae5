#![no_main]

use effo_core::pipeline::{parse_result_line, read_results};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_result_line(text, 1);
    }
    let _ = read_results(data);
});
