#![no_main]
use dense_fpn::io::{decode_ppm, encode_ppm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = decode_ppm(data) {
        let bytes = encode_ppm(&image).expect("decoded images encode");
        assert_eq!(decode_ppm(&bytes).expect("re-decode"), image);
    }
});
