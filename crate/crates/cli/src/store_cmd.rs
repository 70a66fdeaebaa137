use std::path::Path;

use anyhow::{bail, Context, Result};
use augloop_core::codec::digest_of;
use augloop_core::Repository;
use serde_json::json;

use crate::args::{ExportArgs, ImportArgs};
use crate::output::{resolve, write_json, Manifest};

pub fn export(workdir: &Path, argv: &[String], args: &ExportArgs) -> Result<()> {
    let store = resolve(workdir, &args.store);
    let out = resolve(workdir, &args.out);
    if !store.exists() {
        bail!("store {} not found", store.display());
    }
    let repo = Repository::open(&store)?;
    let text = repo.export_string();
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    println!("exported {} records to {}", repo.len(), out.display());
    let mut manifest = Manifest::new("export", argv, json!({ "store": store.display().to_string(), "out": out.display().to_string() }));
    manifest.finish("completed", json!({ "records": repo.len(), "digest": digest_of(&text) }));
    write_json(&workdir.join("manifests/export.json"), &manifest)
}

pub fn import(workdir: &Path, argv: &[String], args: &ImportArgs) -> Result<()> {
    let store = resolve(workdir, &args.store);
    let input = resolve(workdir, &args.input);
    let mut repo = Repository::open(&store).with_context(|| format!("opening store {}", store.display()))?;
    let n = repo.import(&input).with_context(|| format!("importing {}", input.display()))?;
    println!("imported {n} records into {} ({} total)", store.display(), repo.len());
    let mut manifest = Manifest::new("import", argv, json!({ "store": store.display().to_string(), "in": input.display().to_string() }));
    manifest.finish("completed", json!({ "imported": n, "records": repo.len() }));
    write_json(&workdir.join("manifests/import.json"), &manifest)
}
