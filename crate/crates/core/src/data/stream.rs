//! Split and permuted task streams over a loaded MNIST base.

use super::{normalize_pixel, Example, MnistBase};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    SplitMnist,
    PermutedMnist,
}

/// Everything needed to rebuild a stream deterministically; stored in
/// checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub kind: StreamKind,
    pub tasks: usize,
    pub seed: u64,
}

struct TaskDef {
    train_idx: Vec<u32>,
    test_idx: Vec<u32>,
    /// Output pixel j reads input pixel permutation[j]; None is identity.
    permutation: Option<Vec<u32>>,
    /// Base label of local class 0 (split pairs); permuted tasks use 0.
    label_base: u8,
    classes: usize,
    global_offset: usize,
}

pub struct TaskStream {
    base: Arc<MnistBase>,
    descriptor: StreamDescriptor,
    tasks: Vec<TaskDef>,
}

pub const SPLIT_PAIRS: [(u8, u8); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

impl TaskStream {
    /// The five binary digit-pair tasks 0v1, 2v3, 4v5, 6v7, 8v9.
    pub fn split(base: Arc<MnistBase>, tasks: usize, seed: u64) -> Result<TaskStream> {
        if tasks == 0 || tasks > SPLIT_PAIRS.len() {
            return Err(Error::Config(format!(
                "split stream supports 1..=5 tasks, got {tasks}"
            )));
        }
        let defs = SPLIT_PAIRS[..tasks]
            .iter()
            .enumerate()
            .map(|(t, &(lo, hi))| {
                let select = |labels: &[u8]| {
                    labels
                        .iter()
                        .enumerate()
                        .filter(|(_, &l)| l == lo || l == hi)
                        .map(|(i, _)| i as u32)
                        .collect::<Vec<u32>>()
                };
                TaskDef {
                    train_idx: select(&base.train_labels),
                    test_idx: select(&base.test_labels),
                    permutation: None,
                    label_base: lo,
                    classes: 2,
                    global_offset: 2 * t,
                }
            })
            .collect();
        Ok(TaskStream {
            base,
            descriptor: StreamDescriptor { kind: StreamKind::SplitMnist, tasks, seed },
            tasks: defs,
        })
    }

    /// `tasks` copies of 10-way MNIST; the first uses the identity
    /// permutation, later ones a seeded pixel shuffle.
    pub fn permuted(base: Arc<MnistBase>, tasks: usize, seed: u64) -> Result<TaskStream> {
        if tasks == 0 {
            return Err(Error::Config("permuted stream needs at least one task".into()));
        }
        let all_train: Vec<u32> = (0..base.n_train() as u32).collect();
        let all_test: Vec<u32> = (0..base.n_test() as u32).collect();
        let dim = base.dim;
        let defs = (0..tasks)
            .map(|t| {
                let permutation = if t == 0 {
                    None
                } else {
                    let mut p: Vec<u32> = (0..dim as u32).collect();
                    p.shuffle(&mut rng::stream(seed, &[rng::tag::PERMUTATION, t as u64]));
                    Some(p)
                };
                TaskDef {
                    train_idx: all_train.clone(),
                    test_idx: all_test.clone(),
                    permutation,
                    label_base: 0,
                    classes: 10,
                    global_offset: 10 * t,
                }
            })
            .collect();
        Ok(TaskStream {
            base,
            descriptor: StreamDescriptor { kind: StreamKind::PermutedMnist, tasks, seed },
            tasks: defs,
        })
    }

    pub fn from_descriptor(base: Arc<MnistBase>, desc: &StreamDescriptor) -> Result<TaskStream> {
        match desc.kind {
            StreamKind::SplitMnist => Self::split(base, desc.tasks, desc.seed),
            StreamKind::PermutedMnist => Self::permuted(base, desc.tasks, desc.seed),
        }
    }

    pub fn descriptor(&self) -> &StreamDescriptor {
        &self.descriptor
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.base.dim
    }

    /// Total number of global classes across all tasks.
    pub fn total_classes(&self) -> usize {
        self.tasks
            .last()
            .map(|t| t.global_offset + t.classes)
            .unwrap_or(0)
    }

    pub fn task(&self, t: usize) -> TaskView<'_> {
        TaskView { stream: self, def: &self.tasks[t], task_id: t }
    }
}

#[derive(Clone, Copy)]
pub struct TaskView<'a> {
    stream: &'a TaskStream,
    def: &'a TaskDef,
    pub task_id: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl<'a> TaskView<'a> {
    pub fn n_train(&self) -> usize {
        self.def.train_idx.len()
    }

    pub fn n_test(&self) -> usize {
        self.def.test_idx.len()
    }

    pub fn classes(&self) -> usize {
        self.def.classes
    }

    pub fn global_offset(&self) -> usize {
        self.def.global_offset
    }

    pub fn global_label(&self, local: usize) -> usize {
        self.def.global_offset + local
    }

    fn pixels_of(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.stream.base.train_pixels,
            Split::Test => &self.stream.base.test_pixels,
        }
    }

    fn labels_of(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.stream.base.train_labels,
            Split::Test => &self.stream.base.test_labels,
        }
    }

    fn index_of(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.def.train_idx,
            Split::Test => &self.def.test_idx,
        }
    }

    /// Normalized, permuted input rows for the given positions within the
    /// task's split.
    pub fn inputs(&self, split: Split, positions: &[usize]) -> Tensor {
        let dim = self.stream.base.dim;
        let pixels = self.pixels_of(split);
        let index = self.index_of(split);
        let mut out = Vec::with_capacity(positions.len() * dim);
        for &pos in positions {
            let src = &pixels[index[pos] as usize * dim..(index[pos] as usize + 1) * dim];
            match &self.def.permutation {
                None => out.extend(src.iter().map(|&b| normalize_pixel(b))),
                Some(p) => out.extend(p.iter().map(|&j| normalize_pixel(src[j as usize]))),
            }
        }
        Tensor::matrix(positions.len(), dim, out)
    }

    /// Task-local labels for the given positions.
    pub fn local_labels(&self, split: Split, positions: &[usize]) -> Vec<usize> {
        let labels = self.labels_of(split);
        let index = self.index_of(split);
        positions
            .iter()
            .map(|&pos| (labels[index[pos] as usize] - self.def.label_base) as usize)
            .collect()
    }

    pub fn example(&self, split: Split, position: usize) -> Example {
        let x = self.inputs(split, &[position]);
        let local = self.local_labels(split, &[position])[0];
        Example {
            pixels: x.data().to_vec(),
            task_id: self.task_id,
            local_label: local,
            global_label: self.global_label(local),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 12 fake 2x2 images with labels cycling 0..9 then 0, 1.
    fn tiny_base() -> Arc<MnistBase> {
        let n = 12;
        let dim = 4;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            for j in 0..dim {
                pixels.push((i * dim + j) as u8);
            }
            labels.push((i % 10) as u8);
        }
        Arc::new(MnistBase {
            train_pixels: pixels.clone(),
            train_labels: labels.clone(),
            test_pixels: pixels,
            test_labels: labels,
            dim,
        })
    }

    #[test]
    fn split_partitions_by_digit_pair() {
        let s = TaskStream::split(tiny_base(), 5, 0).unwrap();
        // labels 0..9,0,1: task 0 holds the four examples labeled 0 or 1
        let t0 = s.task(0);
        assert_eq!(t0.n_train(), 4);
        assert_eq!(t0.local_labels(Split::Train, &[0, 1, 2, 3]), vec![0, 1, 0, 1]);
        assert_eq!(t0.global_label(1), 1);
        let t3 = s.task(3);
        assert_eq!(t3.n_train(), 2);
        assert_eq!(t3.global_offset(), 6);
        // union over tasks covers every example exactly once
        let total: usize = (0..5).map(|t| s.task(t).n_train()).sum();
        assert_eq!(total, 12);
    }

    #[test]
    fn permuted_first_task_is_identity_and_labels_match_base() {
        let s = TaskStream::permuted(tiny_base(), 3, 42).unwrap();
        let t0 = s.task(0);
        let x = t0.inputs(Split::Train, &[1]);
        let expect: Vec<f64> = (4..8).map(|b| normalize_pixel(b as u8)).collect();
        assert_eq!(x.data(), &expect[..]);
        // permuted tasks reorder pixels but keep the multiset of values
        let t2 = s.task(2);
        let y = t2.inputs(Split::Train, &[1]);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        // identical label distribution on every task
        for t in 0..3 {
            let lv = s.task(t);
            let pos: Vec<usize> = (0..lv.n_train()).collect();
            assert_eq!(
                lv.local_labels(Split::Train, &pos),
                s.task(0).local_labels(Split::Train, &pos)
            );
        }
        assert_eq!(s.total_classes(), 30);
    }

    #[test]
    fn permutations_are_seed_stable() {
        let a = TaskStream::permuted(tiny_base(), 3, 7).unwrap();
        let b = TaskStream::permuted(tiny_base(), 3, 7).unwrap();
        let c = TaskStream::permuted(tiny_base(), 3, 8).unwrap();
        let pos = [0usize, 5];
        assert_eq!(
            a.task(2).inputs(Split::Train, &pos).data(),
            b.task(2).inputs(Split::Train, &pos).data()
        );
        assert_ne!(
            a.task(2).inputs(Split::Train, &pos).data(),
            c.task(2).inputs(Split::Train, &pos).data()
        );
    }
}
