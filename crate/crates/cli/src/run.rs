use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cardio_core::data::store::sha256_hex;
use cardio_core::training::{RunManifest, TrainedModel, MANIFEST_FILE};
use cardio_core::CoreError;

/// An output directory plus the manifest describing how it was produced.
pub struct OutputRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl OutputRun {
    pub fn create(dir: &Path, command: &str, argv: Vec<String>) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest::new(command, argv),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Write `bytes` to `rel` and record its checksum.
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        std::fs::write(&path, bytes.as_ref()).map_err(|e| CoreError::io(&path, e))?;
        self.manifest.outputs.insert(rel.to_string(), sha256_hex(bytes.as_ref()));
        Ok(path)
    }

    /// Record a file that some other routine already wrote.
    pub fn track(&mut self, rel: &str) -> anyhow::Result<()> {
        let path = self.path(rel);
        let bytes = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
        self.manifest.outputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn save_model(&mut self, rel: &str, tm: &TrainedModel) -> anyhow::Result<()> {
        let mut tm = tm.clone();
        tm.meta.manifest = Some(MANIFEST_FILE.to_string());
        tm.save(&self.path(rel))?;
        self.track(rel)
    }

    pub fn input(&mut self, name: &str, checksum: String) {
        self.manifest.checksums.insert(name.to_string(), checksum);
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        Ok(self.manifest.write(&self.dir)?)
    }
}

pub fn file_checksum(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Rebuild the argument vector of a manifest with its output directory
/// replaced by `out` and its embedded config written next to it.
pub fn replay_args(manifest: &RunManifest, out: &Path) -> anyhow::Result<Vec<String>> {
    let mut args = Vec::with_capacity(manifest.args.len() + 2);
    let mut it = manifest.args.iter();
    let mut saw_out = false;
    while let Some(a) = it.next() {
        match a.as_str() {
            "--out" => {
                it.next();
                args.push("--out".into());
                args.push(out.display().to_string());
                saw_out = true;
            }
            "--config" | "--seed" | "--spec" => {
                it.next();
            }
            _ if ["--out=", "--config=", "--seed=", "--spec="].iter().any(|p| a.starts_with(p)) => {
                if a.starts_with("--out=") {
                    args.push(format!("--out={}", out.display()));
                    saw_out = true;
                }
            }
            _ => args.push(a.clone()),
        }
    }
    if !saw_out {
        bail!("manifest arguments have no --out");
    }
    if let Some(cfg) = &manifest.config {
        std::fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
        let p = out.join("replay-config.toml");
        std::fs::write(&p, cfg).map_err(|e| CoreError::io(&p, e))?;
        args.push("--config".into());
        args.push(p.display().to_string());
    }
    if let Some(seed) = manifest.seed {
        args.push("--seed".into());
        args.push(seed.to_string());
    }
    Ok(args)
}

/// Output files whose checksums differ between two manifests.
pub fn replay_outputs(original: &RunManifest, rerun: &RunManifest) -> BTreeMap<String, (Option<String>, Option<String>)> {
    let mut diff = BTreeMap::new();
    for (k, v) in &original.outputs {
        if rerun.outputs.get(k) != Some(v) {
            diff.insert(k.clone(), (Some(v.clone()), rerun.outputs.get(k).cloned()));
        }
    }
    for (k, v) in &rerun.outputs {
        if !original.outputs.contains_key(k) {
            diff.insert(k.clone(), (None, Some(v.clone())));
        }
    }
    diff
}

pub fn load_manifest(path: &Path) -> anyhow::Result<RunManifest> {
    RunManifest::load(path).with_context(|| format!("reading manifest {}", path.display()))
}
