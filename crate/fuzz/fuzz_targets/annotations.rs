#![no_main]
use dense_fpn::io::{annotation_to_gt, parse_annotations, write_annotations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(anns) = parse_annotations(text, "fuzz") {
        for a in &anns {
            let _ = annotation_to_gt(a);
        }
        // whatever parses must survive a write/parse round trip
        let again = parse_annotations(&write_annotations(&anns), "fuzz").expect("re-parse");
        assert_eq!(again, anns);
    }
});
