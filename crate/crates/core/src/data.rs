//! Longitudinal records on a shared design grid.

use serde::{Deserialize, Serialize};

use crate::basisfn::TimeGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Index into [`LongitudinalDataset::groups`].
    pub group: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SubjectRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value_at(&self, grid: &TimeGrid, t: f64) -> Option<f64> {
        let target = grid.index_of(t)?;
        self.times
            .iter()
            .position(|&s| grid.index_of(s) == Some(target))
            .map(|i| self.values[i])
    }

    /// (time, value) of the last available observation.
    pub fn last(&self) -> Option<(f64, f64)> {
        let i = self.times.len().checked_sub(1)?;
        Some((self.times[i], self.values[i]))
    }

    pub fn first(&self) -> Option<(f64, f64)> {
        Some((*self.times.first()?, *self.values.first()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub grid: TimeGrid,
    pub subjects: Vec<SubjectRecord>,
    pub groups: Vec<String>,
}

impl LongitudinalDataset {
    /// Checks the structural invariants; observations are sorted by time on success.
    pub fn new(grid: TimeGrid, mut subjects: Vec<SubjectRecord>, groups: Vec<String>) -> Result<Self> {
        for s in subjects.iter_mut() {
            if s.group >= groups.len() {
                return Err(Error::InvalidSpec(format!(
                    "subject {} has group index {} but only {} groups exist",
                    s.id,
                    s.group,
                    groups.len()
                )));
            }
            if s.times.len() != s.values.len() {
                return Err(Error::InvalidSpec(format!(
                    "subject {} has {} times but {} values",
                    s.id,
                    s.times.len(),
                    s.values.len()
                )));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!("subject {} has a non-finite value", s.id)));
            }
            let mut idx = Vec::with_capacity(s.times.len());
            for &t in &s.times {
                let i = grid.index_of(t).ok_or_else(|| {
                    Error::InvalidSpec(format!("subject {} observed at off-grid time {t}", s.id))
                })?;
                idx.push(i);
            }
            let mut order: Vec<usize> = (0..idx.len()).collect();
            order.sort_by_key(|&k| idx[k]);
            if order.windows(2).any(|w| idx[w[0]] == idx[w[1]]) {
                return Err(Error::InvalidSpec(format!("subject {} has a repeated time", s.id)));
            }
            s.times = order.iter().map(|&k| grid.points()[idx[k]]).collect();
            s.values = order.iter().map(|&k| s.values[k]).collect();
            if idx.iter().all(|&i| i != 0) {
                return Err(Error::InvalidSpec(format!("subject {} is missing the baseline", s.id)));
            }
        }
        Ok(Self { grid, subjects, groups })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_subjects(&self, group: usize) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(move |s| s.group == group)
    }

    pub fn group_size(&self, group: usize) -> usize {
        self.group_subjects(group).count()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.len()).sum()
    }

    /// True when every subject is observed at every grid time.
    pub fn is_complete(&self) -> bool {
        self.subjects.iter().all(|s| s.len() == self.grid.len())
    }

    /// Subset keeping only the listed group, relabelled as group 0.
    pub fn single_group(&self, group: usize) -> Self {
        Self {
            grid: self.grid.clone(),
            subjects: self
                .group_subjects(group)
                .cloned()
                .map(|mut s| {
                    s.group = 0;
                    s
                })
                .collect(),
            groups: vec![self.groups[group].clone()],
        }
    }

    pub fn require_two_groups(&self) -> Result<()> {
        if self.groups.len() != 2 {
            return Err(Error::Contract(format!(
                "group comparison needs exactly two groups, dataset has {}",
                self.groups.len()
            )));
        }
        Ok(())
    }
}
