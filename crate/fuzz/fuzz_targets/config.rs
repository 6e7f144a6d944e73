#![no_main]
use dense_fpn::io::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text, "fuzz") {
        let _ = cfg.validate();
        let back = RunConfig::parse(&cfg.to_text(), "fuzz").expect("re-parse");
        assert_eq!(back.to_text(), cfg.to_text());
    }
});
