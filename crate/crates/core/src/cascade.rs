// SPDX-License-Identifier: Apache-2.0

//! Four binary forests applied in a fixed order; the first stage that fires
//! decides the label.

use rayon::prelude::*;
use thiserror::Error;

use crate::apb::{Label, Sample};
use crate::faultgen::{Dataset, Field};
use crate::forest::{
    self, featurize, open_envelope, seal_envelope, ByteReader, ByteWriter, FeatureLayout,
    FeatureMatrix, FeatureVector, Forest, ForestError, Hyperparams, Task,
};

pub const CASCADE_MAGIC: &[u8; 4] = b"APBC";
pub const CASCADE_VERSION: u16 = 1;

/// Stage order, which is also the slot order in a bundle.
pub const STAGES: [Task; 4] = [Task::Oor, Task::Addr, Task::D0, Task::D1];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CascadeError {
    #[error("stage {stage} needs `{label}` samples, none in the dataset")]
    MissingClass { stage: &'static str, label: Label },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: ForestError,
    },
    #[error(transparent)]
    Model(#[from] ForestError),
}

/// Training definition of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub task: Task,
    pub field: Field,
    pub positive: Label,
    pub negatives: &'static [Label],
    /// Fine label returned when the stage fires.
    pub fires_as: Label,
}

pub fn task_spec(task: Task) -> TaskSpec {
    match task {
        Task::Oor => TaskSpec {
            task,
            field: Field::Address,
            positive: Label::OutOfRangeError,
            negatives: &[Label::NoError],
            fires_as: Label::OutOfRangeError,
        },
        Task::Addr => TaskSpec {
            task,
            field: Field::Address,
            positive: Label::AddressError,
            negatives: &[Label::NoError],
            fires_as: Label::AddressError,
        },
        Task::D0 => TaskSpec {
            task,
            field: Field::Data,
            positive: Label::DataError0,
            negatives: &[Label::NoError, Label::DataError1],
            fires_as: Label::DataError0,
        },
        Task::D1 => TaskSpec {
            task,
            field: Field::Data,
            positive: Label::DataError1,
            negatives: &[Label::NoError, Label::DataError0],
            fires_as: Label::DataError1,
        },
        Task::Custom => panic!("custom forests have no cascade stage"),
    }
}

impl TaskSpec {
    /// Indices of `samples` that belong to this task, with their binary
    /// targets. Samples of other labels are skipped.
    pub fn select(&self, samples: &[Sample]) -> (Vec<usize>, Vec<bool>) {
        let mut idx = Vec::new();
        let mut y = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            match s.label {
                Some(l) if l == self.positive => {
                    idx.push(i);
                    y.push(true);
                }
                Some(l) if self.negatives.contains(&l) => {
                    idx.push(i);
                    y.push(false);
                }
                _ => {}
            }
        }
        (idx, y)
    }

    pub fn check_classes(&self, samples: &[Sample]) -> Result<(), CascadeError> {
        for &label in std::iter::once(&self.positive).chain(self.negatives) {
            if !samples.iter().any(|s| s.label == Some(label)) {
                return Err(CascadeError::MissingClass {
                    stage: self.task.name(),
                    label,
                });
            }
        }
        Ok(())
    }

    pub fn features(
        &self,
        samples: &[Sample],
        idx: &[usize],
        layout: FeatureLayout,
    ) -> Vec<FeatureVector> {
        idx.par_iter()
            .map(|&i| featurize(&samples[i], self.field, layout))
            .collect()
    }
}

/// Trains the forest for one stage on the matching subset of `samples`.
pub fn train_stage(
    samples: &[Sample],
    task: Task,
    hp: &Hyperparams,
    layout: FeatureLayout,
) -> Result<Forest, CascadeError> {
    let spec = task_spec(task);
    spec.check_classes(samples)?;
    let (idx, y) = spec.select(samples);
    let x = FeatureMatrix::from_rows(&spec.features(samples, &idx, layout))?;
    forest::train_forest_matrix(&x, &y, hp)
        .map(|f| f.with_task(task))
        .map_err(|source| CascadeError::Stage {
            stage: task.name(),
            source,
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub oor_model: Forest,
    pub addr_model: Forest,
    pub d0_model: Forest,
    pub d1_model: Forest,
    pub layout: FeatureLayout,
}

/// Label plus how many stages were evaluated to reach it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diagnosis {
    pub label: Label,
    pub stages_run: usize,
}

pub fn train_cascade(ds: &Dataset, hp: &Hyperparams) -> Result<CascadeModel, CascadeError> {
    train_cascade_with_layout(&ds.samples, hp, FeatureLayout::default())
}

pub fn train_cascade_with_layout(
    samples: &[Sample],
    hp: &Hyperparams,
    layout: FeatureLayout,
) -> Result<CascadeModel, CascadeError> {
    // Fail on a missing class before spending time on any stage.
    for task in STAGES {
        task_spec(task).check_classes(samples)?;
    }
    Ok(CascadeModel {
        oor_model: train_stage(samples, Task::Oor, hp, layout)?,
        addr_model: train_stage(samples, Task::Addr, hp, layout)?,
        d0_model: train_stage(samples, Task::D0, hp, layout)?,
        d1_model: train_stage(samples, Task::D1, hp, layout)?,
        layout,
    })
}

impl CascadeModel {
    pub fn stage(&self, task: Task) -> &Forest {
        match task {
            Task::Oor => &self.oor_model,
            Task::Addr => &self.addr_model,
            Task::D0 => &self.d0_model,
            Task::D1 => &self.d1_model,
            Task::Custom => panic!("custom forests have no cascade stage"),
        }
    }

    pub fn stage_mut(&mut self, task: Task) -> &mut Forest {
        match task {
            Task::Oor => &mut self.oor_model,
            Task::Addr => &mut self.addr_model,
            Task::D0 => &mut self.d0_model,
            Task::D1 => &mut self.d1_model,
            Task::Custom => panic!("custom forests have no cascade stage"),
        }
    }

    pub fn diagnose(&self, s: &Sample) -> Label {
        self.diagnose_traced(s).label
    }

    pub fn diagnose_traced(&self, s: &Sample) -> Diagnosis {
        let mut address: Option<FeatureVector> = None;
        let mut data: Option<FeatureVector> = None;
        for (i, task) in STAGES.into_iter().enumerate() {
            let spec = task_spec(task);
            let slot = match spec.field {
                Field::Address => &mut address,
                Field::Data => &mut data,
            };
            let x = slot.get_or_insert_with(|| featurize(s, spec.field, self.layout));
            let fires = self
                .stage(task)
                .classify(x.as_slice())
                .expect("bundle stages share the cascade feature layout");
            if fires {
                return Diagnosis {
                    label: spec.fires_as,
                    stages_run: i + 1,
                };
            }
        }
        Diagnosis {
            label: Label::NoError,
            stages_run: STAGES.len(),
        }
    }

    /// Diagnoses in parallel; output order follows input order.
    pub fn diagnose_batch(&self, samples: &[Sample]) -> Vec<Label> {
        samples.par_iter().map(|s| self.diagnose(s)).collect()
    }

    /// Positive-class score of one stage for a sample.
    pub fn stage_score(&self, task: Task, s: &Sample) -> f64 {
        let x = featurize(s, task_spec(task).field, self.layout);
        self.stage(task)
            .predict_proba(x.as_slice())
            .expect("bundle stages share the cascade feature layout")
    }
}

pub fn save_cascade(m: &CascadeModel) -> Vec<u8> {
    let mut w = ByteWriter(Vec::new());
    w.u8(m.layout.code());
    w.u8(STAGES.len() as u8);
    for task in STAGES {
        let blob = forest::save_forest(m.stage(task));
        w.u64(blob.len() as u64);
        w.bytes(&blob);
    }
    seal_envelope(CASCADE_MAGIC, CASCADE_VERSION, &w.0)
}

pub fn load_cascade(bytes: &[u8]) -> Result<CascadeModel, ForestError> {
    let corrupt = |m: &str| ForestError::CorruptModel(m.to_string());
    let payload = open_envelope(bytes, CASCADE_MAGIC, CASCADE_VERSION)?;
    let mut r = ByteReader::new(payload);
    let layout =
        FeatureLayout::from_code(r.u8()?).ok_or_else(|| corrupt("unknown feature layout"))?;
    let slots = r.u8()? as usize;
    if slots != STAGES.len() {
        return Err(corrupt(&format!(
            "bundle has {slots} model slots, expected 4"
        )));
    }
    let mut models = Vec::with_capacity(4);
    for task in STAGES {
        let len = r.u64()? as usize;
        let f = forest::load_forest(r.take(len)?)?;
        if f.task != task {
            return Err(corrupt(&format!(
                "slot for {} holds a {} model",
                task.name(),
                f.task.name()
            )));
        }
        if f.n_features != layout.width() {
            return Err(corrupt("model width does not match the bundle layout"));
        }
        models.push(f);
    }
    if r.remaining() != 0 {
        return Err(corrupt("trailing bytes"));
    }
    let mut it = models.into_iter();
    Ok(CascadeModel {
        oor_model: it.next().unwrap(),
        addr_model: it.next().unwrap(),
        d0_model: it.next().unwrap(),
        d1_model: it.next().unwrap(),
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faultgen::{generate_dataset, GenSpec, LabelCounts};
    use crate::forest::{Hyperparams, Tree};

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            tree_count: 10,
            ..Hyperparams::default()
        }
    }

    fn const_forest(task: Task, p: f64) -> Forest {
        Forest::from_trees(
            vec![Tree::leaf(p)],
            Hyperparams::default(),
            task,
            FeatureLayout::default().width(),
        )
    }

    fn const_cascade(fire: [bool; 4]) -> CascadeModel {
        let p = |b: bool| if b { 1.0 } else { 0.0 };
        CascadeModel {
            oor_model: const_forest(Task::Oor, p(fire[0])),
            addr_model: const_forest(Task::Addr, p(fire[1])),
            d0_model: const_forest(Task::D0, p(fire[2])),
            d1_model: const_forest(Task::D1, p(fire[3])),
            layout: FeatureLayout::default(),
        }
    }

    fn any_sample() -> Sample {
        generate_dataset(&GenSpec::new(LabelCounts::uniform(1), 3))
            .unwrap()
            .samples[0]
            .clone()
    }

    #[test]
    fn invoked_stages_form_a_prefix() {
        let s = any_sample();
        for mask in 0u8..16 {
            let fire = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0, mask & 8 != 0];
            let d = const_cascade(fire).diagnose_traced(&s);
            let first = fire.iter().position(|&b| b);
            match first {
                Some(i) => {
                    assert_eq!(d.stages_run, i + 1);
                    assert_eq!(d.label, task_spec(STAGES[i]).fires_as);
                }
                None => {
                    assert_eq!(d.stages_run, 4);
                    assert_eq!(d.label, Label::NoError);
                }
            }
        }
    }

    #[test]
    fn negative_sets() {
        assert_eq!(
            task_spec(Task::D0).negatives,
            &[Label::NoError, Label::DataError1]
        );
        assert_eq!(
            task_spec(Task::D1).negatives,
            &[Label::NoError, Label::DataError0]
        );
        let ds = generate_dataset(&GenSpec::new(LabelCounts::uniform(4), 9)).unwrap();
        let (idx, y) = task_spec(Task::D0).select(&ds.samples);
        assert_eq!(idx.len(), 12);
        assert_eq!(y.iter().filter(|&&b| b).count(), 4);
        for &i in &idx {
            let l = ds.samples[i].label.unwrap();
            assert!(!matches!(l, Label::OutOfRangeError | Label::AddressError));
        }
    }

    #[test]
    fn missing_class_names_the_stage() {
        let mut counts = LabelCounts::uniform(5);
        counts.address_error = 0;
        let ds = generate_dataset(&GenSpec::new(counts, 1)).unwrap();
        assert_eq!(
            train_cascade(&ds, &tiny_hp()).unwrap_err(),
            CascadeError::MissingClass {
                stage: "addr",
                label: Label::AddressError
            }
        );
    }

    #[test]
    fn bundle_round_trip_and_errors() {
        let ds = generate_dataset(&GenSpec::new(LabelCounts::uniform(30), 2)).unwrap();
        let m = train_cascade(&ds, &tiny_hp()).unwrap();
        let bytes = save_cascade(&m);
        assert_eq!(
            bytes,
            save_cascade(&train_cascade(&ds, &tiny_hp()).unwrap())
        );
        let back = load_cascade(&bytes).unwrap();
        assert_eq!(back, m);
        for s in &ds.samples {
            assert_eq!(back.diagnose(s), m.diagnose(s));
        }

        let mut bumped = bytes.clone();
        bumped[4] = 9;
        assert!(matches!(
            load_cascade(&bumped),
            Err(ForestError::VersionMismatch { .. })
        ));
        assert!(matches!(
            load_cascade(&bytes[..bytes.len() / 2]),
            Err(ForestError::CorruptModel(_))
        ));
    }

    #[test]
    fn bundle_without_d1_slot_is_corrupt() {
        let m = const_cascade([false; 4]);
        let mut w = ByteWriter(Vec::new());
        w.u8(m.layout.code());
        w.u8(3);
        for task in &STAGES[..3] {
            let blob = forest::save_forest(m.stage(*task));
            w.u64(blob.len() as u64);
            w.bytes(&blob);
        }
        let bytes = seal_envelope(CASCADE_MAGIC, CASCADE_VERSION, &w.0);
        assert!(matches!(
            load_cascade(&bytes),
            Err(ForestError::CorruptModel(_))
        ));
    }
}
