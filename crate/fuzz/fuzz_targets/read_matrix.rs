#![no_main]

use effo_core::matrix_file::{read_matrix, write_matrix};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(m) = read_matrix(data) else { return };
    let mut buf = Vec::new();
    write_matrix(&m, &mut buf).expect("decoded matrix must encode");
    let back = read_matrix(buf.as_slice()).expect("own output must decode");
    assert_eq!(back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
});
