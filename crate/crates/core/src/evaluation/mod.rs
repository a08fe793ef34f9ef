//! Objective and subjective evaluation: error rates, rating aggregation, correlations.

pub mod asr;
pub mod edit;
pub mod ratings;
pub mod report;
pub mod stats;

pub use asr::{
    score_system, AsrClient, CommandAsr, Exclusion, HttpAsr, SystemScore, UtteranceScore,
};
pub use edit::{cer_wer, char_tokens, edit_distance, word_tokens, EditOps, ErrorCounts};
pub use ratings::{
    aggregate_ratings, read_ratings_csv, similarity_percentage, write_ratings_csv, Axis,
    RatingRecord, SimilarityAnswer, RATINGS_CSV_HEADER,
};
pub use report::{
    build_report, correlation_report, format_mean, format_percent, parse_table, reference_table,
    render_table, Correlations, EvalReport, SystemReport, TableRow, REFERENCE_CORRELATIONS,
    REFERENCE_TABLE_CSV,
};
pub use stats::{mean_interval, pearson, wilson, MeanInterval, Proportion};
