//! Layer-freeze schedules.
//!
//! Three fine-tuning modes decide which layer groups train at each epoch:
//!
//! - `FtAll`: every group, every epoch.
//! - `FtFc`: only the head group.
//! - `Sft`: sequential fine-tuning. The head trains alone for the first
//!   `step_epochs` epochs; after each further block of `step_epochs` epochs,
//!   `unfreeze_per_step` more groups directly below the trainable ones are
//!   released, moving toward the input. Once every group is trainable the
//!   network trains whole for the remaining epochs.
//!
//! Groups are never re-frozen, and the trainable set is always a suffix
//! `{j, .., m-1}` of the group indices.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FineTuneMode {
    #[serde(rename = "FT_ALL")]
    FtAll,
    #[serde(rename = "FT_FC")]
    FtFc,
    #[serde(rename = "SFT")]
    Sft,
}

impl FineTuneMode {
    /// Report order: whole network, head only, sequential.
    pub const ALL: [FineTuneMode; 3] = [FineTuneMode::FtAll, FineTuneMode::FtFc, FineTuneMode::Sft];

    pub fn label(self) -> &'static str {
        match self {
            FineTuneMode::FtAll => "FT_ALL",
            FineTuneMode::FtFc => "FT_FC",
            FineTuneMode::Sft => "SFT",
        }
    }

    /// Lowercase form used in output file names.
    pub fn slug(self) -> &'static str {
        match self {
            FineTuneMode::FtAll => "ft_all",
            FineTuneMode::FtFc => "ft_fc",
            FineTuneMode::Sft => "sft",
        }
    }

    /// Position in [`FineTuneMode::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ft_all" | "all" => Ok(FineTuneMode::FtAll),
            "ft_fc" | "fc" => Ok(FineTuneMode::FtFc),
            "sft" => Ok(FineTuneMode::Sft),
            _ => Err(Error::Config(format!("unknown fine-tuning mode {s:?} (expected ft_all, ft_fc or sft)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSchedule {
    /// Total training epochs (n).
    pub epochs: usize,
    /// Epochs per sequential step (x).
    pub step_epochs: usize,
    /// Groups released per step (s).
    pub unfreeze_per_step: usize,
    /// Layer groups in the network (m).
    pub num_groups: usize,
    pub mode: FineTuneMode,
}

impl SftSchedule {
    pub fn new(
        epochs: usize,
        step_epochs: usize,
        unfreeze_per_step: usize,
        num_groups: usize,
        mode: FineTuneMode,
    ) -> Result<Self> {
        let schedule = SftSchedule { epochs, step_epochs, unfreeze_per_step, num_groups, mode };
        schedule.validate()?;
        if schedule.is_truncated() {
            log::warn!(
                "{} epochs end before all {} groups are released (needs {} epochs)",
                epochs,
                num_groups,
                schedule.epochs_until_full() + 1
            );
        }
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("step_epochs", self.step_epochs),
            ("unfreeze_per_step", self.unfreeze_per_step),
            ("num_groups", self.num_groups),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Head-only step plus the steps needed to release the other `m − 1` groups.
    pub fn step_count(&self) -> usize {
        (self.num_groups - 1).div_ceil(self.unfreeze_per_step) + 1
    }

    /// First epoch at which every group trains under `Sft`.
    pub fn epochs_until_full(&self) -> usize {
        (self.step_count() - 1) * self.step_epochs
    }

    /// True when an `Sft` schedule ends before the whole network is released.
    pub fn is_truncated(&self) -> bool {
        self.mode == FineTuneMode::Sft && self.epochs_until_full() >= self.epochs
    }

    /// Lowest trainable group index at `epoch`.
    pub fn first_trainable(&self, epoch: usize) -> Result<usize> {
        if epoch >= self.epochs {
            return Err(Error::Contract(format!("epoch {epoch} outside 0..{}", self.epochs)));
        }
        let head = self.num_groups - 1;
        Ok(match self.mode {
            FineTuneMode::FtAll => 0,
            FineTuneMode::FtFc => head,
            FineTuneMode::Sft => {
                let step = epoch / self.step_epochs;
                head.saturating_sub(step.saturating_mul(self.unfreeze_per_step))
            }
        })
    }

    pub fn trainable_groups_at_epoch(&self, epoch: usize) -> Result<BTreeSet<usize>> {
        Ok((self.first_trainable(epoch)?..self.num_groups).collect())
    }

    pub fn freeze_state(&self, epoch: usize) -> Result<FreezeState> {
        Ok(FreezeState { epoch, trainable: self.trainable_groups_at_epoch(epoch)? })
    }

    /// Maximal runs of epochs sharing the same trainable set.
    pub fn schedule_summary(&self) -> Vec<Phase> {
        let mut phases: Vec<Phase> = Vec::new();
        for epoch in 0..self.epochs {
            let count = self.num_groups - self.first_trainable(epoch).expect("epoch in range");
            match phases.last_mut() {
                Some(p) if p.trainable_count == count => p.last_epoch = epoch,
                _ => phases.push(Phase { first_epoch: epoch, last_epoch: epoch, trainable_count: count }),
            }
        }
        phases
    }
}

/// A run of epochs `first_epoch..=last_epoch` with `trainable_count` groups
/// trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub trainable_count: usize,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epochs {:>4}..={:<4} trainable groups: {}", self.first_epoch, self.last_epoch, self.trainable_count)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeState {
    pub epoch: usize,
    pub trainable: BTreeSet<usize>,
}

/// Sets `requires_grad` on exactly the parameters of the trainable groups
/// and clears it everywhere else.
pub fn apply_freeze_state(network: &mut Network, state: &FreezeState) -> Result<()> {
    let m = network.num_groups();
    if let Some(&bad) = state.trainable.iter().find(|&&g| g >= m) {
        return Err(Error::Contract(format!("group {bad} does not exist (network has {m} groups)")));
    }
    for p in network.parameters_mut() {
        let trainable = state.trainable.contains(&p.group);
        p.tensor.set_requires_grad(trainable);
        if !trainable {
            p.tensor.clear_grad();
        }
    }
    Ok(())
}
