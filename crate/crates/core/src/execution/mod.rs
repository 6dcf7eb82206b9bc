//! Gather, grouped GEMM and scatter: executing a layer once its kernel map
//! is known.

pub mod gather;
pub mod gemm;
pub mod grouping;
pub mod layer;
pub mod metadata;
pub mod oracle;

pub use gather::{gather, gather_into, scatter, scatter_into};
pub use gemm::{gemm_execute, gemm_unbatched, WeightSet};
pub use grouping::{arrangement_padding, group_gemms, padding_overhead, GemmGroupPlan, GroupingParams, GroupingPolicy};
pub use layer::{
    execute_prepared, fit_tile, prepare_layer, sc_layer_forward, LayerConfig, LayerMetrics, MapBackend, PhaseTimings,
    PreparedLayer,
};
pub use metadata::{build_metadata_tables, MetadataTables, SlotRef, SlotTable};
pub use oracle::{check_against_oracle, dense_conv_oracle, OracleCheck, OracleOutput};
