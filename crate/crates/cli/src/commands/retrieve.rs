//! `luminav retrieve`: inspect the place-recognition stage.
//!
//! Runs the query descriptors against the virtual database and reports the
//! per-position hit scores plus the selected window, either as a histogram
//! or as JSON.

use crate::cli::RetrieveArgs;
use crate::commands::{descriptors_path, virtual_blob_path, virtual_index_path};
use crate::error::{classify_retrieval, CliError};
use luminav_core::io::{read_descriptors, read_virtual_database};
use luminav_core::retrieval::build_virtual_buffer;
use serde::Serialize;

#[derive(Serialize)]
struct RetrieveOutput<'a> {
    query_start: usize,
    query_count: usize,
    range_len: usize,
    range_start: usize,
    range_end: usize,
    range_score: usize,
    hit_scores: &'a [usize],
    nearest_ids: &'a [usize],
    buffer_ids: Vec<usize>,
}

pub fn run(args: &RetrieveArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let descriptors = read_descriptors(&descriptors_path(&args.dataset))?;
    let database =
        read_virtual_database(&virtual_index_path(&args.dataset), &virtual_blob_path(&args.dataset))?;

    let start = args.query_start;
    let count = args.query_count.unwrap_or_else(|| descriptors.len().saturating_sub(start));
    let end = start.checked_add(count).filter(|&end| end <= descriptors.len() && count > 0);
    let Some(end) = end else {
        return Err(CliError::usage(format!(
            "query window [{start}, {}) does not fit the {} dataset descriptors",
            start.saturating_add(count),
            descriptors.len()
        )));
    };
    let queries = &descriptors[start..end];

    let range = args.range.unwrap_or(config.retrieval.range);
    let (result, buffer) = build_virtual_buffer(&database, queries, range).map_err(classify_retrieval)?;

    if args.json {
        let output = RetrieveOutput {
            query_start: start,
            query_count: count,
            range_len: result.range_len,
            range_start: result.range_start,
            range_end: result.range_start + result.range_len,
            range_score: result.range_score,
            hit_scores: &result.hit_scores,
            nearest_ids: &result.indices,
            buffer_ids: buffer.iter().map(|entry| entry.id).collect(),
        };
        let json = serde_json::to_string_pretty(&output)
            .map_err(|e| CliError::runtime(format!("cannot serialize output: {e}")))?;
        println!("{json}");
    } else {
        println!(
            "hit scores over {} database entries ({} queries from frame {}):",
            database.len(),
            count,
            start
        );
        for (position, &score) in result.hit_scores.iter().enumerate() {
            if score > 0 {
                println!("  {position:>6} {score:>5}  {}", "#".repeat(score.min(60)));
            }
        }
        println!(
            "window [{}, {}] (range {}), score {}",
            result.range_start,
            result.range_start + result.range_len,
            result.range_len,
            result.range_score
        );
    }
    Ok(())
}
