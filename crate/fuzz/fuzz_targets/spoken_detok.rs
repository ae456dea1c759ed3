#![no_main]

use adacs::data::{parse_spoken, spoken_form};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(letters) = parse_spoken(s) {
            // anything the detokenizer accepts must re-spell to a spoken
            // form that parses back to the same letters
            let respelled = spoken_form(&letters).unwrap();
            assert_eq!(parse_spoken(&respelled).unwrap(), letters);
        }
    }
});
