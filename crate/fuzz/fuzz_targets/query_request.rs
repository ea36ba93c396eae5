#![no_main]

use std::sync::OnceLock;

use effo_core::feature_store::{FeatureSet, GeoKind, GeoTag, ImageRecord, LocalFeature};
use effo_server::{parse_request, run_query, validate_request};
use libfuzzer_sys::fuzz_target;

fn gallery() -> &'static FeatureSet {
    static G: OnceLock<FeatureSet> = OnceLock::new();
    G.get_or_init(|| {
        let mut set = FeatureSet::new(2, 2, GeoKind::None);
        for (i, g) in [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]].into_iter().enumerate() {
            set.records.push(ImageRecord {
                id: format!("g{i}"),
                geo: GeoTag::None,
                global: g.to_vec(),
                locals: vec![LocalFeature { score: 0.5, descriptor: g.to_vec() }],
            });
        }
        set
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(req) = parse_request(data) else { return };
    let Ok(q) = validate_request(req, gallery()) else { return };
    let resp = run_query(gallery(), &q).expect("validated query must run");
    assert!(resp.results.len() <= gallery().len());
});
