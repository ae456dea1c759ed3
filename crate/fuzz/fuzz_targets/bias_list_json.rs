#![no_main]

use adacs::text::Vocabulary;
use adacs::BiasEntry;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(list) = serde_json::from_str::<Vec<String>>(s) else {
        return;
    };
    let vocab = Vocabulary::build(&["abcdefghijklmnopqrstuvwxyz "]).unwrap();
    for phrase in &list {
        // entry token ids always stay in range, UNK absorbing the rest
        let entry = BiasEntry::new(phrase, &vocab);
        entry.ids.validate(vocab.size()).unwrap();
        let decoded = vocab.decode(&entry.ids).unwrap();
        // in-vocabulary text round-trips exactly
        if phrase.chars().all(|c| c == ' ' || vocab.id_of(c).is_some()) {
            assert_eq!(&decoded, phrase);
        }
    }
});
