use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::{ActiveSet, Rulebook};

/// Rulebooks of one backbone stage. Every layer after the downsampler is a
/// 3x3 submanifold convolution over the same sites and shares `subm`.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub down: Rulebook,
    pub subm: Rulebook,
}

impl StagePlan {
    pub fn output(&self) -> &Arc<ActiveSet> {
        self.down.output()
    }
}

/// All rulebooks for one frame, derived from the pillar sites alone.
#[derive(Debug, Clone)]
pub struct ActivePlan {
    pub pillars: Arc<ActiveSet>,
    pub stages: Vec<StagePlan>,
    /// 1x1 rulebook over the stage-2 sites (alignment and head outputs).
    pub pointwise: Rulebook,
}

impl ActivePlan {
    pub fn build(pillars: &Arc<ActiveSet>, num_stages: usize) -> Result<Self> {
        if num_stages < 2 {
            return Err(Error::Structure(format!("{num_stages} stages, need at least 2")));
        }
        let mut stages = Vec::with_capacity(num_stages);
        let mut input = pillars.clone();
        for _ in 0..num_stages {
            let down = Rulebook::downsample(&input)?;
            let subm = Rulebook::submanifold(down.output(), 3)?;
            input = down.output().clone();
            stages.push(StagePlan { down, subm });
        }
        let pointwise = Rulebook::submanifold(stages[1].output(), 1)?;
        Ok(Self {
            pillars: pillars.clone(),
            stages,
            pointwise,
        })
    }

    /// Sites of the grid the head runs on.
    pub fn head_set(&self) -> &Arc<ActiveSet> {
        self.stages[1].output()
    }

    /// 3x3 submanifold rulebook over the head grid.
    pub fn head_subm(&self) -> &Rulebook {
        &self.stages[1].subm
    }

    pub fn stage_active(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.output().len()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Coord;

    #[test]
    fn halves_each_stage() {
        let set = Arc::new(ActiveSet::new(64, 64, [Coord::new(10, 10), Coord::new(40, 3)]).unwrap());
        let plan = ActivePlan::build(&set, 4).unwrap();
        let dims: Vec<(u32, u32)> = plan.stages.iter().map(|s| (s.output().width(), s.output().height())).collect();
        assert_eq!(dims, vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
        assert_eq!(plan.head_set().width(), 16);
        assert_eq!(plan.pointwise.num_pairs(), plan.head_set().len() as u64);
        assert!(plan.stages.iter().all(|s| Arc::ptr_eq(s.subm.input(), s.output())));
    }

    #[test]
    fn empty_frame() {
        let plan = ActivePlan::build(&Arc::new(ActiveSet::empty(16, 16)), 4).unwrap();
        assert_eq!(plan.stage_active(), vec![0, 0, 0, 0]);
    }
}
