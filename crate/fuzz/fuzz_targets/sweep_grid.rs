#![no_main]

use effo_core::pipeline::Grid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let specs: Vec<&str> = text.split('\n').collect();
    let _ = Grid::parse(&specs);
});
