//! Class- and domain-incremental task streams.

use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::rng::{Seed, StreamId};

use super::data::{apply_domain, pattern_bank, sample_classes, Dataset, PatternStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Cil,
    Dil,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Cil => "cil",
            Scenario::Dil => "dil",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cil" => Some(Scenario::Cil),
            "dil" => Some(Scenario::Dil),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub classes: Vec<usize>,
    pub domain: usize,
}

/// Where task images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Synthetic(SyntheticSpec),
    /// `<dir>/task<t>/{train,test}` in the dataset file format.
    Files(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub style: PatternStyle,
    /// Name of the class family; different names give unrelated classes.
    pub family: String,
}

impl SyntheticSpec {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub scenario: Scenario,
    pub num_classes: usize,
    pub tasks: Vec<TaskSpec>,
    pub source: Source,
}

impl StreamSpec {
    /// `num_classes` split into `tasks` consecutive, equally sized class groups.
    pub fn cil(num_classes: usize, tasks: usize, source: Source) -> Result<Self> {
        if tasks == 0 || !num_classes.is_multiple_of(tasks) {
            return Err(Error::Stream(format!("{num_classes} classes do not split into {tasks} tasks")));
        }
        let per = num_classes / tasks;
        let tasks = (0..tasks)
            .map(|t| TaskSpec {
                classes: (t * per..(t + 1) * per).collect(),
                domain: 0,
            })
            .collect();
        Ok(StreamSpec {
            scenario: Scenario::Cil,
            num_classes,
            tasks,
            source,
        })
    }

    /// The full label set under `domains` input transforms.
    pub fn dil(num_classes: usize, domains: usize, source: Source) -> Result<Self> {
        if domains == 0 {
            return Err(Error::Stream("a stream needs at least one domain".into()));
        }
        let tasks = (0..domains)
            .map(|d| TaskSpec {
                classes: (0..num_classes).collect(),
                domain: d,
            })
            .collect();
        Ok(StreamSpec {
            scenario: Scenario::Dil,
            num_classes,
            tasks,
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Stream("stream has no tasks".into()));
        }
        for (t, task) in self.tasks.iter().enumerate() {
            if task.classes.is_empty() {
                return Err(Error::Stream(format!("task {t} has no classes")));
            }
            if let Some(c) = task.classes.iter().find(|&&c| c >= self.num_classes) {
                return Err(Error::Stream(format!("task {t} uses class {c} of {}", self.num_classes)));
            }
        }
        match self.scenario {
            Scenario::Cil => {
                let mut seen = BTreeSet::new();
                for (t, task) in self.tasks.iter().enumerate() {
                    for &c in &task.classes {
                        if !seen.insert(c) {
                            return Err(Error::Stream(format!("class {c} reappears in task {t}")));
                        }
                    }
                }
            }
            Scenario::Dil => {
                let first: BTreeSet<_> = self.tasks[0].classes.iter().collect();
                for (t, task) in self.tasks.iter().enumerate() {
                    if task.classes.iter().collect::<BTreeSet<_>>() != first {
                        return Err(Error::Stream(format!("task {t} changes the label set")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<usize>,
    pub domain: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Materializes every task of a stream deterministically from the seed.
pub fn make_stream(spec: &StreamSpec, seed: Seed) -> Result<Vec<Task>> {
    spec.validate()?;
    match &spec.source {
        Source::Synthetic(syn) => synthetic_stream(spec, syn, seed),
        Source::Files(dir) => spec
            .tasks
            .iter()
            .enumerate()
            .map(|(t, ts)| {
                let base = dir.join(format!("task{t}"));
                let train = Dataset::read(&base.join("train"))?;
                let test = Dataset::read(&base.join("test"))?;
                for ds in [&train, &test] {
                    if let Some(l) = ds.labels.iter().find(|l| !ts.classes.contains(l)) {
                        return Err(Error::Stream(format!("task {t} file data has label {l} outside its class set")));
                    }
                }
                Ok(Task {
                    index: t,
                    classes: ts.classes.clone(),
                    domain: ts.domain,
                    train,
                    test,
                })
            })
            .collect(),
    }
}

fn synthetic_stream(spec: &StreamSpec, syn: &SyntheticSpec, seed: Seed) -> Result<Vec<Task>> {
    let bank = pattern_bank(spec.num_classes, syn.channels, &syn.style, seed, &syn.family);
    let shape = syn.shape();
    let draw = |classes: &[usize], per: usize, split: &str, t: u64| {
        sample_classes(
            &bank,
            classes,
            per,
            shape,
            syn.noise,
            seed,
            StreamId::named(&syn.family).with(StreamId::named(split).raw()).with(t),
        )
    };
    let transform = |ds: &Dataset, domain: usize| {
        let mut out = Dataset::empty(ds.height, ds.width, ds.channels, domain);
        for i in 0..ds.len() {
            out.push(&apply_domain(ds.image(i), ds.height, ds.width, ds.channels, domain), ds.labels[i]);
        }
        out
    };
    match spec.scenario {
        Scenario::Cil => spec
            .tasks
            .iter()
            .enumerate()
            .map(|(t, ts)| {
                Ok(Task {
                    index: t,
                    classes: ts.classes.clone(),
                    domain: ts.domain,
                    train: draw(&ts.classes, syn.train_per_class, "train", t as u64)?,
                    test: draw(&ts.classes, syn.test_per_class, "test", t as u64)?,
                })
            })
            .collect(),
        Scenario::Dil => {
            // one labeled set, transformed per domain
            let classes = &spec.tasks[0].classes;
            let train = draw(classes, syn.train_per_class, "train", 0)?;
            let test = draw(classes, syn.test_per_class, "test", 0)?;
            Ok(spec
                .tasks
                .iter()
                .enumerate()
                .map(|(t, ts)| Task {
                    index: t,
                    classes: ts.classes.clone(),
                    domain: ts.domain,
                    train: transform(&train, ts.domain),
                    test: transform(&test, ts.domain),
                })
                .collect())
        }
    }
}

/// Pretext data for backbone pretraining: a separate class family.
pub fn make_pretext(syn: &SyntheticSpec, num_classes: usize, per_class: usize, seed: Seed) -> Result<Dataset> {
    let bank = pattern_bank(num_classes, syn.channels, &syn.style, seed, &syn.family);
    let classes: Vec<usize> = (0..num_classes).collect();
    sample_classes(
        &bank,
        &classes,
        per_class,
        syn.shape(),
        syn.noise,
        seed,
        StreamId::named(&syn.family).with(StreamId::named("pretext").raw()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syn() -> SyntheticSpec {
        SyntheticSpec {
            height: 8,
            width: 8,
            channels: 3,
            noise: 0.1,
            train_per_class: 3,
            test_per_class: 2,
            style: PatternStyle::default(),
            family: "t".into(),
        }
    }

    #[test]
    fn cil_split_arithmetic() {
        let spec = StreamSpec::cil(10, 5, Source::Synthetic(syn())).unwrap();
        let tasks = make_stream(&spec, Seed(1)).unwrap();
        assert_eq!(tasks.len(), 5);
        for t in &tasks {
            assert_eq!(t.classes.len(), 2);
            assert_eq!(t.train.label_set(), t.classes);
            assert_eq!(t.train.len(), 6);
        }
        assert!(StreamSpec::cil(10, 3, Source::Synthetic(syn())).is_err());
    }

    #[test]
    fn dil_shares_labels_and_is_deterministic() {
        let spec = StreamSpec::dil(4, 4, Source::Synthetic(syn())).unwrap();
        let a = make_stream(&spec, Seed(2)).unwrap();
        let b = make_stream(&spec, Seed(2)).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert_eq!(t.train.label_set(), vec![0, 1, 2, 3]);
            assert_eq!(t.train.domain, t.domain);
        }
        assert_ne!(a[0].train.images, a[1].train.images);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = StreamSpec::cil(4, 2, Source::Synthetic(syn())).unwrap();
        spec.tasks[1].classes = vec![1, 2];
        assert!(matches!(make_stream(&spec, Seed(0)), Err(Error::Stream(_))));
        let mut spec = StreamSpec::dil(4, 2, Source::Synthetic(syn())).unwrap();
        spec.tasks[1].classes = vec![0, 1, 2];
        assert!(matches!(make_stream(&spec, Seed(0)), Err(Error::Stream(_))));
    }

    #[test]
    fn file_source_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = StreamSpec::cil(4, 2, Source::Synthetic(syn())).unwrap();
        let tasks = make_stream(&spec, Seed(3)).unwrap();
        for t in &tasks {
            t.train.write(&dir.path().join(format!("task{}/train", t.index))).unwrap();
            t.test.write(&dir.path().join(format!("task{}/test", t.index))).unwrap();
        }
        let from_files = StreamSpec {
            source: Source::Files(dir.path().to_path_buf()),
            ..spec
        };
        assert_eq!(make_stream(&from_files, Seed(99)).unwrap(), tasks);
    }
}
