//! Configuration, fixtures, baselines and end-to-end orchestration.

mod config;
mod fixture;
mod pipeline;

pub use config::{Baseline, FixtureKind, FixtureSpec, PipelineConfig};
pub use fixture::{
    generate_fixture, parse_pgm, read_pgm, tile_image, write_pgm, Fixture, NEEDLE_NOISE,
    TEXT_ID_BASE,
};
pub use pipeline::{
    high_res_flops_reduction, high_res_schedule, report_json, run_pipeline, table3, table6,
    write_report, write_trace, Encoded, EncoderDrops, FixtureRun, Harness, Policy, RunDetails,
    RunOutput, RunReport, SuiteSummary, SweepRow, TableRow,
};
