use std::path::Path;

use anyhow::{Context, Result};
use augloop_core::pairs::{augment_resize256, build_pairs, curate, render_dataset, PairPolicy};
use augloop_core::{CurationMode, Repository};
use serde::Serialize;
use serde_json::json;

use crate::args::{ModeArg, PairsArgs, PolicyArg};
use crate::output::{resolve, write_json, write_text, Manifest};

pub fn curation(mode: ModeArg) -> CurationMode {
    match mode {
        ModeArg::Curated => CurationMode::Curated,
        ModeArg::Unfiltered => CurationMode::Unfiltered,
    }
}

pub fn policy(p: PolicyArg) -> PairPolicy {
    match p {
        PolicyArg::UniformBetter => PairPolicy::UniformBetter,
        PolicyArg::NearestBetter => PairPolicy::NearestBetter,
    }
}

#[derive(Debug, Serialize)]
struct PairsSettings {
    store: String,
    mode: CurationMode,
    policy: PairPolicy,
    augment_fraction: f64,
    seed: u64,
    out: String,
}

pub fn run(workdir: &Path, argv: &[String], args: &PairsArgs) -> Result<()> {
    let store_path = resolve(workdir, &args.store);
    let out = resolve(workdir, &args.out);
    let repo = Repository::open(&store_path).with_context(|| format!("opening store {}", store_path.display()))?;
    let settings = PairsSettings {
        store: store_path.display().to_string(),
        mode: curation(args.mode),
        policy: policy(args.policy),
        augment_fraction: args.augment_fraction,
        seed: args.seed,
        out: out.display().to_string(),
    };
    let mut manifest = Manifest::new("pairs", argv, settings);

    let evaluated: Vec<_> = curate(repo.records(), curation(args.mode)).into_iter().filter(|r| r.accuracy.is_some()).collect();
    let mut pairs = build_pairs(&evaluated, policy(args.policy), args.seed)?;
    let aug = augment_resize256(&pairs, args.augment_fraction, args.seed)?;
    let (n_original, n_augmented, n_skipped) = (pairs.len(), aug.pairs.len(), aug.skipped.len());
    pairs.extend(aug.pairs);
    write_text(&out, &render_dataset(&pairs))?;

    println!(
        "{} records -> {n_original} pairs + {n_augmented} resize-256 pairs ({n_skipped} skipped) -> {}",
        evaluated.len(),
        out.display()
    );
    manifest.finish(
        "completed",
        json!({ "records": evaluated.len(), "pairs": n_original, "augmented": n_augmented, "skipped": n_skipped, "dataset": out.display().to_string() }),
    );
    write_json(&workdir.join("manifests/pairs.json"), &manifest)
}
