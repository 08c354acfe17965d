#![no_main]

use libfuzzer_sys::fuzz_target;
use tsg_core::synthetic::{SyntheticProblem, SyntheticSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = SyntheticSpec::from_json(text) {
        let again = SyntheticSpec::from_json(&spec.to_json()).expect("serialized spec reparses");
        assert_eq!(again.to_json(), spec.to_json());
        let _ = SyntheticProblem::new(spec);
    }
});
