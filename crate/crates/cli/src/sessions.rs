//! Sample manifests and balanced, seeded listening-session assignment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fac_core::evaluation::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::short_hash;

/// One stimulus. `system_id` stays server-side and never appears in task payloads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub system_id: String,
    pub path: PathBuf,
    /// Axes this sample is rated on.
    pub axes: Vec<Axis>,
    /// Source-speaker sample played alongside it in the similarity test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_sample_id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub samples: Vec<SampleEntry>,
}

impl SampleManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut m: SampleManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.samples {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeMap<&str, &SampleEntry> = self
            .samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s))
            .collect();
        ensure!(
            ids.len() == self.samples.len(),
            "duplicate sample ids in manifest"
        );
        for s in &self.samples {
            let rates_similarity = s.axes.contains(&Axis::Similarity);
            match (&s.pair_sample_id, rates_similarity) {
                (Some(p), true) => ensure!(
                    ids.contains_key(p.as_str()),
                    "sample {} pairs with unknown {p}",
                    s.sample_id
                ),
                (None, true) => bail!("similarity sample {} has no pair sample", s.sample_id),
                (Some(_), false) => bail!(
                    "sample {} has a pair but is not rated for similarity",
                    s.sample_id
                ),
                (None, false) => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Builds a manifest from `root/<system>/<prompt>.wav`. Every sample is rated for
    /// naturalness and accentedness, source and target included as anchors. Samples of
    /// the other systems are also rated for similarity against the source sample of the
    /// next prompt in sorted order, so the pair never shares content.
    pub fn from_system_dirs(root: &Path, source_system: &str, target_system: &str) -> Result<Self> {
        let mut systems: BTreeMap<String, BTreeMap<String, PathBuf>> = BTreeMap::new();
        for dir in std::fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
            let dir = dir?.path();
            if !dir.is_dir() {
                continue;
            }
            let system = dir.file_name().unwrap().to_string_lossy().into_owned();
            for f in std::fs::read_dir(&dir)? {
                let f = f?.path();
                if f.extension().is_some_and(|e| e == "wav") {
                    let prompt = f.file_stem().unwrap().to_string_lossy().into_owned();
                    systems.entry(system.clone()).or_default().insert(prompt, f);
                }
            }
        }
        let Some(sources) = systems.get(source_system) else {
            bail!(
                "no {source_system:?} system directory under {}",
                root.display()
            );
        };
        let source_prompts: Vec<&String> = sources.keys().collect();
        let id = |system: &str, prompt: &str| short_hash(&format!("{system}/{prompt}"), 12);
        let mut samples = Vec::new();
        for (system, files) in &systems {
            let converted = system != source_system && system != target_system;
            for (prompt, path) in files {
                let mut axes = vec![Axis::Naturalness, Axis::Accentedness];
                let mut pair_sample_id = None;
                if converted {
                    let next = source_prompts.iter().position(|p| *p > prompt).unwrap_or(0);
                    let pair = source_prompts[next];
                    pair_sample_id = Some(id(source_system, pair));
                    axes.push(Axis::Similarity);
                }
                samples.push(SampleEntry {
                    sample_id: id(system, prompt),
                    system_id: system.clone(),
                    path: path.clone(),
                    axes,
                    pair_sample_id,
                });
            }
        }
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let m = SampleManifest { samples };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub index: usize,
    pub sample_id: String,
    pub axis: Axis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_sample_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListeningSession {
    pub listener_id: String,
    pub tasks: Vec<Task>,
}

impl ListeningSession {
    pub fn task(&self, sample_id: &str, axis: Axis) -> Option<&Task> {
        self.tasks
            .iter()
            .find(|t| t.sample_id == sample_id && t.axis == axis)
    }
}

/// Opaque, seed-dependent listener id.
pub fn listener_id(seed: u64, index: usize) -> String {
    short_hash(&format!("listener/{seed}/{index}"), 16)
}

/// Assigns `per_listener` samples per axis to each of `listeners` listeners.
///
/// Per axis, the pool is shuffled once and dealt out cyclically, so rating counts
/// per sample differ by at most one and no listener sees a sample twice on an axis.
/// Each listener's tasks are then shuffled into presentation order.
pub fn build_sessions(
    manifest: &SampleManifest,
    axes: &[Axis],
    listeners: usize,
    per_listener: usize,
    seed: u64,
) -> Result<Vec<ListeningSession>> {
    manifest.validate()?;
    ensure!(!axes.is_empty(), "no axes requested");
    let mut tasks: Vec<Vec<Task>> = vec![Vec::new(); listeners];
    for (a, &axis) in axes.iter().enumerate() {
        let mut pool: Vec<&SampleEntry> = manifest
            .samples
            .iter()
            .filter(|s| s.axes.contains(&axis))
            .collect();
        ensure!(
            per_listener <= pool.len(),
            "{per_listener} {axis} samples per listener requested but only {} available",
            pool.len()
        );
        pool.sort_by(|x, y| x.sample_id.cmp(&y.sample_id));
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(
            seed ^ (0x5e55_0000 + a as u64),
        ));
        for (l, list) in tasks.iter_mut().enumerate() {
            for j in 0..per_listener {
                let s = pool[(l * per_listener + j) % pool.len()];
                list.push(Task {
                    index: 0,
                    sample_id: s.sample_id.clone(),
                    axis,
                    pair_sample_id: if axis == Axis::Similarity {
                        s.pair_sample_id.clone()
                    } else {
                        None
                    },
                });
            }
        }
    }
    Ok(tasks
        .into_iter()
        .enumerate()
        .map(|(l, mut list)| {
            list.shuffle(&mut ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9e37_79b9).wrapping_add(l as u64),
            ));
            for (i, t) in list.iter_mut().enumerate() {
                t.index = i;
            }
            ListeningSession {
                listener_id: listener_id(seed, l),
                tasks: list,
            }
        })
        .collect())
}

pub fn save_sessions(path: &Path, sessions: &[ListeningSession]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(sessions)?)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load_sessions(path: &Path) -> Result<Vec<ListeningSession>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
