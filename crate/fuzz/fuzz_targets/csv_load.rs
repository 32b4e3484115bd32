#![no_main]

use libfuzzer_sys::fuzz_target;
use lorafed::datagen::{parse_csv, write_csv, CsvSchema};

fuzz_target!(|data: &[u8]| {
    let Some((&flags, body)) = data.split_first() else {
        return;
    };
    let schema = CsvSchema {
        num_classes: usize::from(flags & 0x0f) + 1,
        has_header: flags & 0x80 != 0,
    };
    let Ok(ds) = parse_csv(body, schema) else {
        return;
    };
    assert_eq!(ds.features.shape()[0], ds.labels.len());
    assert!(ds.labels.iter().all(|&y| y < schema.num_classes));

    let mut out = Vec::new();
    write_csv(&ds, &mut out).expect("write parsed dataset");
    let back = parse_csv(out.as_slice(), CsvSchema { has_header: false, ..schema }).expect("reparse");
    assert_eq!(ds, back);
});
