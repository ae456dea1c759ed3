#![no_main]

use adacs::data::SpokenReferencePair;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(pair) = SpokenReferencePair::from_json_line(line) {
            // accepted pairs satisfy the replacement round trip and
            // re-serialize losslessly
            pair.validate().unwrap();
            let again = SpokenReferencePair::from_json_line(&pair.to_json_line()).unwrap();
            assert_eq!(pair, again);
        }
    }
});
