#![allow(dead_code)]

use readmit_core::cohort::{build_cohort, CohortConfig};
use readmit_core::features::{encode_dataset, fit_schema, CciTable, EventSpec, FeatureSchema, LabeledDataset};
use readmit_core::synth::{generate_site, reference_profile, SiteProfile};

/// Encodes a generated site under its own schema, or under `schema` when given.
pub fn dataset(profile: &SiteProfile, seed: u64, schema: Option<&FeatureSchema>) -> LabeledDataset {
    let site = generate_site(profile, seed).unwrap();
    let cohort = build_cohort(&site.histories, &CohortConfig::default());
    let events: Vec<EventSpec> = cohort.events.iter().map(EventSpec::from).collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => {
            let by_id: std::collections::HashMap<&str, _> =
                site.histories.iter().map(|h| (h.patient_id(), h)).collect();
            let pairs = events.iter().map(|e| (e, by_id[e.patient_id.as_str()]));
            fit_schema(pairs, 64, 12, 30, CciTable::default()).unwrap()
        }
    };
    encode_dataset(&events, &site.histories, &schema, &profile.site_name).unwrap()
}

pub fn small_site(n: usize, seed: u64) -> LabeledDataset {
    dataset(&reference_profile("site_t", n), seed, None)
}
