use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use searchrel_core::hash::{fmix64, Fnv1a};
use searchrel_core::pipeline::synthetic::SyntheticConfig;
use searchrel_core::pipeline::HoldoutSplit;
use searchrel_core::service::ServiceConfig;
use searchrel_core::student::StudentTrainConfig;
use searchrel_core::teacher::TeacherTrainConfig;

/// Everything the pipeline commands read. Relative paths inside the file
/// resolve against `work_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    /// Master seed. Every stage seed is derived from it, overriding the seed
    /// fields of the nested configs.
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub test_fraction: f64,
    pub valid_fraction: f64,
    pub teacher: TeacherTrainConfig,
    pub student: StudentTrainConfig,
    pub sample_size: usize,
    pub sizes: Vec<usize>,
    pub baseline_size: usize,
    /// Optional oracle labels used in place of rater labels at evaluation.
    pub truth_path: Option<PathBuf>,
    pub service: ServiceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            work_dir: PathBuf::from("work"),
            seed: 0,
            synthetic: SyntheticConfig::default(),
            test_fraction: 0.2,
            valid_fraction: 0.1,
            teacher: TeacherTrainConfig::default(),
            student: StudentTrainConfig::default(),
            sample_size: 50_000,
            sizes: vec![10_000, 50_000, 150_000],
            baseline_size: 5_000,
            truth_path: None,
            service: ServiceConfig::default(),
        }
    }
}

pub fn derive_seed(master: u64, stage: &str) -> u64 {
    fmix64(
        Fnv1a::new()
            .write(&master.to_le_bytes())
            .write(stage.as_bytes())
            .finish(),
    )
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Writes the derived stage seeds into the nested configs.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synthetic.seed = derive_seed(seed, "synthetic");
        self.teacher.train.seed = derive_seed(seed, "teacher");
        self.student.train.seed = derive_seed(seed, "student");
    }

    pub fn split(&self) -> HoldoutSplit {
        HoldoutSplit {
            test_fraction: self.test_fraction,
            seed: derive_seed(self.seed, "split"),
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        let rel = rel.as_ref();
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.work_dir.join(rel)
        }
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.path("raw")
    }
    pub fn corpus_dir(&self) -> PathBuf {
        self.path("corpus")
    }
    pub fn index_path(&self) -> PathBuf {
        self.path("index.json")
    }
    pub fn teacher_dir(&self) -> PathBuf {
        self.path("teacher")
    }
    pub fn labels_path(&self) -> PathBuf {
        self.path("distill/labels.jsonl")
    }
    pub fn sample_path(&self) -> PathBuf {
        self.path("distill/sample.jsonl")
    }
    pub fn student_path(&self) -> PathBuf {
        self.path("student/student.json")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.path("reports")
    }

    /// The service config with relative artifact paths resolved.
    pub fn resolved_service(&self) -> ServiceConfig {
        let mut s = self.service.clone();
        s.student_path = self.path(&s.student_path);
        s.index_path = self.path(&s.index_path);
        s.pins_path = self.path(&s.pins_path);
        s.query_embeddings_path = match &s.query_embeddings_path {
            Some(p) => Some(self.path(p)),
            None => {
                let p = self.corpus_dir().join("query_embeddings.jsonl");
                p.exists().then_some(p)
            }
        };
        s
    }
}
