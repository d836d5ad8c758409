use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::sampler::{ParamVector, Sampler, SamplerError};

/// Every `(sim_id, t_index)` the server has accepted.
#[derive(Debug, Default, Clone)]
pub struct DedupIndex {
    seen: HashSet<(u64, u32)>,
}

impl DedupIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// True when the pair is new; it is then recorded.
    pub fn insert(&mut self, sim_id: u64, t_index: u32) -> bool {
        self.seen.insert((sim_id, t_index))
    }

    pub fn contains(&self, sim_id: u64, t_index: u32) -> bool {
        self.seen.contains(&(sim_id, t_index))
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// Which parameter vectors have been handed out and which sims finished.
#[derive(Debug, Clone)]
pub struct RunPlan {
    sampler: Sampler,
    next_index: u64,
    assigned: BTreeMap<u64, ParamVector>,
    completed: BTreeSet<u64>,
}

impl RunPlan {
    pub fn new(sampler: Sampler) -> Self {
        Self {
            sampler,
            next_index: 0,
            assigned: BTreeMap::new(),
            completed: BTreeSet::new(),
        }
    }

    pub fn ensemble_size(&self) -> u64 {
        self.sampler.ensemble_size()
    }

    /// Up to `count` fresh assignments; fewer once the ensemble is exhausted.
    /// The sim id is the ensemble index.
    pub fn assign(&mut self, count: u32) -> Result<Vec<(u64, ParamVector)>, SamplerError> {
        let mut out = Vec::new();
        while out.len() < count as usize && self.next_index < self.sampler.ensemble_size() {
            let sim_id = self.next_index;
            let params = self.sampler.next_params(sim_id)?;
            self.assigned.insert(sim_id, params.clone());
            out.push((sim_id, params));
            self.next_index += 1;
        }
        Ok(out)
    }

    pub fn assigned(&self) -> &BTreeMap<u64, ParamVector> {
        &self.assigned
    }

    pub fn mark_completed(&mut self, sim_id: u64) {
        self.completed.insert(sim_id);
    }

    pub fn completed(&self) -> &BTreeSet<u64> {
        &self.completed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{ParamEntry, ParamSpace, SamplingStrategy};

    fn plan(n: u64) -> RunPlan {
        let space = ParamSpace::new(vec![ParamEntry::uniform("rho", 0.0, 100.0)]).unwrap();
        RunPlan::new(Sampler::new(space, SamplingStrategy::MonteCarlo { seed: 1 }, n).unwrap())
    }

    #[test]
    fn assignments_are_distinct_and_bounded() {
        let mut p = plan(3);
        let a = p.assign(2).unwrap();
        assert_eq!(a.len(), 2);
        assert_ne!(a[0].0, a[1].0);
        assert_eq!(p.assign(5).unwrap().len(), 1);
        assert!(p.assign(1).unwrap().is_empty());
        assert_eq!(p.assigned().len(), 3);
    }

    #[test]
    fn dedup_admits_once() {
        let mut d = DedupIndex::new();
        assert!(d.insert(7, 3));
        assert!(!d.insert(7, 3));
        assert!(d.insert(8, 3));
        assert_eq!(d.len(), 2);
    }
}
