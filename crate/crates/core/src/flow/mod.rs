//! Per-flow feature statistics, synthetic traces and trace classification.
//!
//! Packets are grouped by exact 5-tuple. The first `n` packets of a flow
//! are logged; the `n`-th triggers inference and the result is cached for
//! the rest of the flow. FIN or an IAT over the limit resets the record.

mod classify;
mod features;
mod packet;
mod synth;
mod table;

pub use classify::{
    classify_trace, extract_dataset, normalize_dataset, save_results, write_results, Classification, FlowResult,
    Metrics,
};
pub use features::Normalizer;
pub use packet::{
    load_labels, load_trace, read_labels, read_trace, save_labels, save_trace, tcp, write_labels, write_trace, FlowKey,
    PacketRecord,
};
pub use synth::{default_profiles, generate_synthetic_trace, separated_profiles, ClassProfile, SyntheticTrace};
pub use table::{batch_features, featurize, Action, FeatureProfile, FlowConfig, FlowRecord, FlowState, FlowTable};
