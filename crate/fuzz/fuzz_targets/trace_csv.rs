#![no_main]

use libfuzzer_sys::fuzz_target;
use tsg_core::trace::{read_trace_csv, write_trace_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_trace_csv(data) {
        let mut out = Vec::new();
        write_trace_csv(&mut out, &records).expect("write to memory");
        let back = read_trace_csv(out.as_slice()).expect("written trace reparses");
        // NaN fields break PartialEq, so compare the printed form.
        assert_eq!(format!("{back:?}"), format!("{records:?}"));
    }
});
