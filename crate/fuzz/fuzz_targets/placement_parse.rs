#![no_main]

use libfuzzer_sys::fuzz_target;
use lorafed::lora::BlockSelect;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(sel) = text.parse::<BlockSelect>() else {
        return;
    };
    let shown = sel.to_string();
    assert_eq!(shown.parse::<BlockSelect>().ok(), Some(sel.clone()), "{shown}");
    for depth in 0..=16 {
        if let Ok(blocks) = sel.resolve(depth) {
            assert!(!blocks.is_empty());
            assert!(blocks.windows(2).all(|w| w[0] < w[1]));
            assert!(blocks.iter().all(|&b| b < depth));
        }
    }
});
