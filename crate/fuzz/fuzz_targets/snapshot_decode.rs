#![no_main]

use libfuzzer_sys::fuzz_target;
use orient_attn::model::Model;
use orient_attn::snapshot::Snapshot;

fuzz_target!(|data: &[u8]| {
    if let Ok(snap) = Snapshot::decode(data) {
        assert_eq!(snap.encode(), data);
        let _ = Model::from_snapshot(&snap);
    }
});
