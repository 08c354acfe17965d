#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = tsg_core::adv_hpt::parse_csv(data, None) {
        // A parsed dataset must be usable for splitting without panics.
        let _ = tsg_core::adv_hpt::split_dataset(ds.len(), &Default::default());
    }
});
