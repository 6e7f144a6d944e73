#![no_main]
use dense_fpn::io::{parse_detections, write_detections};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dets) = parse_detections(text, "fuzz") {
        let _ = parse_detections(&write_detections(&dets), "fuzz").expect("re-parse");
    }
});
