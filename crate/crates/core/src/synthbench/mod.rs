//! Synthetic event-conditioned demonstrations and the metrics run on them.
//!
//! Each trajectory is a sum of slow sinusoids fixed by the context vector,
//! short alternating-sign kicks that start at event steps, and white noise.

mod ablation;
mod analysis;
mod generator;
mod io;

pub use ablation::{
    ablation_sweep, evaluate_model, write_ablation_csv, AblationAxis, AblationBase, AblationRow, Benchmark, RunMetrics,
    ABLATION_CSV_HEADER, HELDOUT_SEED_OFFSET,
};
pub use analysis::{
    dilate_events, event_correlation, event_report, frame_energy, low_band_share, mean_fields,
    mean_variant_field, naive_rfft_baseline, pearson, split_batch, EventReport, MeanFields,
};
pub use generator::{generate_dataset, Batch, GenSpec, Trajectory, TRANSIENT_SUPPORT};
pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATA_MAGIC};
