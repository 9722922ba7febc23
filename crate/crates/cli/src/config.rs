//! Run configuration: one TOML document with a section per concern.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use interpcnn::nn::{
    build_classifier, build_segmenter, ClassifierConfig, NetworkSpec, Sampling, SegmenterConfig,
    Task,
};
use interpcnn::train::TrainConfig;

/// Floating-point width this binary was built with.
pub const BUILD_PRECISION: &str = if std::mem::size_of::<interpcnn::tensor::Float>() == 4 {
    "f32"
} else {
    "f64"
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Output directory; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: Sampling,
    /// Used when `task = "classification"`.
    #[serde(default)]
    pub classifier: ClassifierConfig,
    /// Used when `task = "segmentation"`.
    #[serde(default)]
    pub segmenter: SegmenterConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", try_from = "RawData")]
pub enum DataConfig {
    /// Generated shapes: sphere/cube/cylinder classes, or cylinder wall
    /// versus caps for segmentation.
    Synthetic {
        train: usize,
        test: usize,
        points: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// A `name,path,split,label` CSV. Rows with split `train` train, rows
    /// with split `test` or `val` validate.
    Manifest {
        manifest: PathBuf,
        /// Larger clouds are randomly subsampled to this many points; mesh
        /// files are sampled at this count.
        points: usize,
        /// Column roles for `.xyz`/`.txt` files, e.g. `"x y z r g b label"`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schema: Option<String>,
    },
}

fn default_noise() -> f64 {
    0.02
}

/// Flat form of `[data]`. A tagged enum buffers the table before
/// deserializing, which loses the position of an unknown key.
#[derive(Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
struct RawData {
    source: Source,
    points: usize,
    train: Option<usize>,
    test: Option<usize>,
    noise: Option<f64>,
    seed: Option<u64>,
    manifest: Option<PathBuf>,
    schema: Option<String>,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum Source {
    Synthetic,
    Manifest,
}

impl TryFrom<RawData> for DataConfig {
    type Error = String;

    fn try_from(r: RawData) -> std::result::Result<Self, String> {
        let stray = |names: &[(&str, bool)], source: &str| -> std::result::Result<(), String> {
            match names.iter().find(|(_, set)| *set) {
                Some((n, _)) => Err(format!("`{n}` does not apply to source = \"{source}\"")),
                None => Ok(()),
            }
        };
        match r.source {
            Source::Synthetic => {
                stray(
                    &[
                        ("manifest", r.manifest.is_some()),
                        ("schema", r.schema.is_some()),
                    ],
                    "synthetic",
                )?;
                Ok(DataConfig::Synthetic {
                    train: r.train.ok_or("missing field `train`")?,
                    test: r.test.ok_or("missing field `test`")?,
                    points: r.points,
                    noise: r.noise.unwrap_or_else(default_noise),
                    seed: r.seed.unwrap_or(0),
                })
            }
            Source::Manifest => {
                stray(
                    &[
                        ("train", r.train.is_some()),
                        ("test", r.test.is_some()),
                        ("noise", r.noise.is_some()),
                        ("seed", r.seed.is_some()),
                    ],
                    "manifest",
                )?;
                Ok(DataConfig::Manifest {
                    manifest: r.manifest.ok_or("missing field `manifest`")?,
                    points: r.points,
                    schema: r.schema,
                })
            }
        }
    }
}

impl DataConfig {
    pub fn points(&self) -> usize {
        match self {
            DataConfig::Synthetic { points, .. } | DataConfig::Manifest { points, .. } => *points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Leaves the timing column of the metrics CSV empty so reruns are
    /// byte-identical.
    pub deterministic: bool,
    pub seed: u64,
    /// Must name the precision the binary was built with.
    pub precision: String,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            threads: 0,
            deterministic: true,
            seed: 1,
            precision: BUILD_PRECISION.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub points: Vec<usize>,
    pub batch: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub backward: bool,
    pub classes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            points: vec![256, 512, 1024],
            batch: 16,
            warmup: 1,
            repetitions: 5,
            backward: true,
            classes: 40,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and validates a document. Relative manifest paths resolve
    /// against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).with_context(|| format!("{origin}: invalid config"))?;
        if let DataConfig::Manifest { manifest, .. } = &mut cfg.data {
            if manifest.is_relative() {
                *manifest = base.join(&*manifest);
            }
        }
        cfg.validate()
            .with_context(|| format!("{origin}: invalid config"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(
            &text,
            &path.display().to_string(),
            path.parent().unwrap_or(Path::new(".")),
        )
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.runtime.seed = s;
        }
        if let Some(t) = o.threads {
            self.runtime.threads = t;
        }
        if o.deterministic {
            self.runtime.deterministic = true;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runtime.precision != BUILD_PRECISION {
            bail!(
                "runtime.precision is `{}` but this binary computes in {BUILD_PRECISION}",
                self.runtime.precision
            );
        }
        if self.data.points() == 0 {
            bail!("data.points must be positive");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Every default written out; the network section of the other task is
    /// dropped.
    pub fn effective_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        table.remove(match self.task {
            Task::Classification => "segmenter",
            Task::Segmentation => "classifier",
        });
        toml::to_string(&table).expect("table serializes")
    }

    pub fn network(
        &self,
        in_channels: usize,
        points: usize,
        classes: usize,
    ) -> Result<NetworkSpec> {
        Ok(match self.task {
            Task::Classification => {
                build_classifier(&self.classifier, in_channels, points, classes)?
            }
            Task::Segmentation => build_segmenter(&self.segmenter, in_channels, points, classes)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task = "classification"

[data]
source = "synthetic"
train = 6
test = 3
points = 64
"#;

    #[test]
    fn defaults_are_materialized_and_round_trip() {
        let cfg = RunConfig::parse(MINIMAL, "t", Path::new(".")).unwrap();
        assert_eq!(cfg.runtime.seed, 1);
        let text = cfg.effective_toml();
        assert!(
            text.contains("[classifier]") && !text.contains("[segmenter]"),
            "{text}"
        );
        assert!(text.contains("decay_every"), "{text}");
        let again = RunConfig::parse(&text, "effective", Path::new(".")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let bad = MINIMAL.replace("points = 64", "points = 64\npionts = 3");
        let err = format!(
            "{:#}",
            RunConfig::parse(&bad, "cfg.toml", Path::new(".")).unwrap_err()
        );
        assert!(err.contains("pionts") && err.contains("line 9"), "{err}");
        let bad = format!("{MINIMAL}\n[train]\nepochs = 2\nbogus = 1\n");
        let err = format!(
            "{:#}",
            RunConfig::parse(&bad, "cfg.toml", Path::new(".")).unwrap_err()
        );
        assert!(err.contains("bogus"), "{err}");
        let bad = MINIMAL.replace("points = 64", "points = 64\nschema = \"x y z\"");
        let err = format!(
            "{:#}",
            RunConfig::parse(&bad, "cfg.toml", Path::new(".")).unwrap_err()
        );
        assert!(err.contains("`schema` does not apply"), "{err}");
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let text = format!("{MINIMAL}\n[train.optimizer]\nlr = 0.01\n");
        let cfg = RunConfig::parse(&text, "t", Path::new(".")).unwrap();
        assert_eq!(cfg.train.optimizer.lr, 0.01);
        assert_eq!(cfg.train.optimizer.beta2, 0.999);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn precision_must_match_the_build() {
        let other = if BUILD_PRECISION == "f64" {
            "f32"
        } else {
            "f64"
        };
        let text = format!("{MINIMAL}\n[runtime]\nprecision = \"{other}\"\n");
        let err = format!(
            "{:#}",
            RunConfig::parse(&text, "t", Path::new(".")).unwrap_err()
        );
        assert!(err.contains("precision"), "{err}");
    }

    #[test]
    fn manifest_paths_resolve_against_the_config() {
        let text = "task = \"classification\"\n[data]\nsource = \"manifest\"\nmanifest = \"m.csv\"\npoints = 8\n";
        let cfg = RunConfig::parse(text, "t", Path::new("/tmp/runs")).unwrap();
        assert!(
            matches!(&cfg.data, DataConfig::Manifest { manifest, .. } if manifest == Path::new("/tmp/runs/m.csv"))
        );
    }

    #[test]
    fn shipped_profiles_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["desk.toml", "modelnet40.toml", "desk-seg.toml"] {
            RunConfig::load(&dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e:#}"));
        }
    }
}
