//! On-disk evaluator cache: HJVF file pairs plus a TOML manifest.
//!
//! Files are keyed by the fingerprint of the evaluator spec, so an entry is
//! reused exactly when every parameter it depends on is unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hjp_core::reach::{EvaluatorSpec, ReachEvaluator};
use hjp_core::sim::{Evaluators, ScenarioConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub fingerprint: String,
    pub files: Vec<String>,
    /// SHA-256 of each file, same order as `files`.
    pub sha256: Vec<String>,
    pub spec: EvaluatorSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub evaluators: BTreeMap<String, Entry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = toml::to_string(self).context("serializing manifest")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn stem(name: &str, fingerprint: &str) -> String {
    format!("{name}-{}", &fingerprint[..16])
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Whether `entry` describes `spec` and its files are intact.
fn up_to_date(dir: &Path, entry: Option<&Entry>, spec: &EvaluatorSpec) -> bool {
    let Some(e) = entry else { return false };
    e.fingerprint == spec.fingerprint()
        && e.files.len() == e.sha256.len()
        && e.files
            .iter()
            .zip(&e.sha256)
            .all(|(f, h)| sha256_file(&dir.join(f)).is_ok_and(|got| &got == h))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    UpToDate,
    Built,
}

/// Builds whichever of the config's evaluators are missing or stale.
pub fn compute(config: &ScenarioConfig, dir: &Path) -> Result<Vec<(&'static str, Status, PathBuf, PathBuf)>> {
    fs::create_dir_all(dir).with_context(|| format!("creating cache directory {}", dir.display()))?;
    let specs = config.evaluator_specs()?;
    let mut manifest = Manifest::read(dir)?;
    let mut out = Vec::new();
    for (spec, name) in specs.iter().zip(Evaluators::NAMES) {
        let fp = spec.fingerprint();
        let s = stem(name, &fp);
        let [px, py] = ReachEvaluator::paths(dir, &s);
        if up_to_date(dir, manifest.evaluators.get(name), spec) {
            out.push((name, Status::UpToDate, px, py));
            continue;
        }
        let ev = spec.build().with_context(|| format!("building the {name} evaluator"))?;
        ev.save(dir, &s).with_context(|| format!("saving the {name} evaluator"))?;
        let files = [&px, &py];
        manifest.evaluators.insert(
            name.to_string(),
            Entry {
                fingerprint: fp,
                files: files
                    .iter()
                    .map(|p| p.file_name().expect("cache path has a file name").to_string_lossy().into_owned())
                    .collect(),
                sha256: files.iter().map(|p| sha256_file(p)).collect::<Result<_>>()?,
                spec: spec.clone(),
            },
        );
        manifest.write(dir)?;
        out.push((name, Status::Built, px, py));
    }
    Ok(out)
}

/// Loads the config's evaluators, refusing stale or missing entries.
pub fn load(config: &ScenarioConfig, dir: &Path) -> Result<Evaluators> {
    let specs = config.evaluator_specs()?;
    let manifest = Manifest::read(dir)?;
    let mut loaded = Vec::new();
    for (spec, name) in specs.iter().zip(Evaluators::NAMES) {
        match manifest.evaluators.get(name) {
            None => bail!("no {name} evaluator in {}; run `hjp compute` first", dir.display()),
            Some(e) if e.fingerprint != spec.fingerprint() => bail!(
                "the cached {name} evaluator was built for different parameters; run `hjp compute` with this config"
            ),
            Some(_) if !up_to_date(dir, manifest.evaluators.get(name), spec) => {
                bail!("the cached {name} evaluator files are missing or modified; run `hjp compute` again")
            }
            Some(_) => {}
        }
        let ev = ReachEvaluator::load(dir, &stem(name, &spec.fingerprint()))
            .with_context(|| format!("loading the {name} evaluator"))?;
        loaded.push(ev);
    }
    let safety = loaded.pop().expect("three evaluators");
    let join = loaded.pop().expect("three evaluators");
    let highway = loaded.pop().expect("three evaluators");
    Ok(Evaluators::from_parts(&specs, highway, join, safety)?)
}
