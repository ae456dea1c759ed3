#![no_main]

use adacs::text::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(vocab) = Vocabulary::from_json(s) {
            // accepted vocabularies must round-trip through their canonical form
            let canon = vocab.to_json();
            let again = Vocabulary::from_json(&canon).unwrap();
            assert_eq!(vocab, again);
            assert_eq!(canon, again.to_json());
        }
    }
});
