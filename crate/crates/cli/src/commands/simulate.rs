//! `luminav simulate`: synthesize a dataset directory.
//!
//! Builds the branching lumen, walks the configured route, renders every
//! frame (image, depth, clean and corrupted scene-coordinate map, noisy
//! descriptor), and writes the dataset plus the virtual database rendered
//! from the same poses with noise-free descriptors.
//!
//! Frames render in parallel; determinism holds because every frame draws
//! from its own seed stream derived from (root seed, frame id).

use crate::cli::SimulateArgs;
use crate::commands::{virtual_blob_path, virtual_index_path};
use crate::error::{classify_sim, usage_of, CliError};
use luminav_core::io::{export_dataset, write_virtual_database};
use luminav_core::retrieval::{VirtualDatabase, VirtualEntry};
use luminav_core::rng::{derived_rng, root_rng};
use luminav_core::sim::{generate_lumen, generate_trajectory, synthesize_frame, SyntheticFrame};
use rayon::prelude::*;

pub fn run(args: &SimulateArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let intrinsics = config.camera.build()?;
    config.noise.validate().map_err(usage_of)?;
    let embedder = config.retrieval.build_embedder()?;

    let mut rng = root_rng(config.seed);
    let model = generate_lumen(&mut rng, &config.simulator.lumen).map_err(classify_sim)?;
    let route = config.simulator.effective_route();
    let poses = generate_trajectory(&model, &route, config.simulator.frames_per_mm)
        .map_err(classify_sim)?;

    let render = &config.simulator.render;
    let frames: Vec<SyntheticFrame> = poses
        .par_iter()
        .enumerate()
        .map(|(id, pose)| {
            let mut frame_rng = derived_rng(config.seed, id as u64);
            synthesize_frame(
                &model,
                pose,
                &intrinsics,
                render,
                &config.noise,
                &embedder,
                id,
                &mut frame_rng,
            )
        })
        .collect::<Result<_, _>>()
        .map_err(classify_sim)?;

    export_dataset(&args.out, &frames, &intrinsics, config.simulator.fps)?;

    let entries: Vec<VirtualEntry> = frames
        .iter()
        .map(|frame| VirtualEntry {
            id: frame.id,
            descriptor: embedder.embed_clean(&frame.pose),
            pose: frame.pose,
        })
        .collect();
    let database = VirtualDatabase::new(entries).map_err(usage_of)?;
    write_virtual_database(&virtual_index_path(&args.out), &virtual_blob_path(&args.out), &database)?;

    let grid_cols = intrinsics.width / render.stride;
    let grid_rows = intrinsics.height / render.stride;
    println!("wrote {} frames to {}", frames.len(), args.out.display());
    println!(
        "  image {}x{}, scene grid {}x{} (stride {}), virtual database {} entries",
        intrinsics.width,
        intrinsics.height,
        grid_cols,
        grid_rows,
        render.stride,
        database.len()
    );
    Ok(())
}
