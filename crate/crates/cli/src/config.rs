use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use tlm::ingest::DirectionFilter;
use tlm::{FrameworkConfig, ViewSpec};

/// Where a run's sessions come from. Exactly one source per config.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Every `*.pcap` under `dir`, labeled by the map or by parent directory.
    PcapDir {
        dir: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    Jsonl {
        path: PathBuf,
    },
    /// A leakage profile file, generated in memory.
    Synth {
        profile: PathBuf,
    },
}

/// Shape overrides applied to every view the run visits.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewOverrides {
    pub packets: Option<usize>,
    pub bytes_per_packet: Option<usize>,
    pub concat_length: Option<usize>,
    pub skip_tcp_handshake: Option<usize>,
}

impl ViewOverrides {
    fn apply(&self, v: &mut ViewSpec) {
        if let Some(p) = self.packets {
            v.packets = p;
        }
        if let Some(b) = self.bytes_per_packet {
            v.bytes_per_packet = b;
        }
        if let Some(c) = self.concat_length {
            v.concat_length = c;
        }
        if let Some(s) = self.skip_tcp_handshake {
            v.skip_tcp_handshake = s;
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("tlm-out")
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides `framework.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub direction: DirectionFilter,
    #[serde(default)]
    pub view: ViewOverrides,
    #[serde(default)]
    pub framework: FrameworkConfig,
}

impl RunConfig {
    /// Reads a config and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.dataset {
            DatasetSource::PcapDir { dir, labels } => {
                resolve(dir);
                if let Some(l) = labels {
                    resolve(l);
                }
            }
            DatasetSource::Jsonl { path } => resolve(path),
            DatasetSource::Synth { profile } => resolve(profile),
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// Folds the seed and view overrides into the framework config and validates it.
    pub fn framework_config(&self, seed_flag: Option<u64>) -> anyhow::Result<FrameworkConfig> {
        let mut fw = self.framework.clone();
        if let Some(s) = seed_flag.or(self.seed) {
            fw.seed = s;
        }
        for v in fw.scripted_views.iter_mut().chain([&mut fw.auto_start_view]) {
            self.view.apply(v);
        }
        fw.validate()?;
        Ok(fw)
    }

    /// Creates the output directory and checks that it takes writes.
    pub fn prepare_output(dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let probe = dir.join(".tlm-write-check");
        std::fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display()))?;
        std::fs::remove_file(&probe).ok();
        if !dir.is_dir() {
            bail!("{} is not a directory", dir.display());
        }
        Ok(())
    }
}
