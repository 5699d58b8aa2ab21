use super::MultiExitNet;
use crate::error::{Error, Result};

/// Multiply-accumulate counts per sample. Bias adds and activations are not
/// counted. Discriminators only run during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostModel {
    pub trunk_macs: Vec<u64>,
    pub head_macs: Vec<u64>,
    pub disc_macs: Vec<u64>,
}

impl CostModel {
    pub fn of(net: &MultiExitNet) -> Self {
        CostModel {
            trunk_macs: net.trunk.iter().map(|l| l.mac_cost()).collect(),
            head_macs: net.heads.iter().map(|l| l.mac_cost()).collect(),
            disc_macs: net
                .discriminators
                .iter()
                .map(|d| d.hidden.mac_cost() + d.output.mac_cost())
                .collect(),
        }
    }

    pub fn exit_count(&self) -> usize {
        self.trunk_macs.len()
    }

    /// Cost of reaching exit `k` (1-based): blocks `1..=k` plus heads
    /// `1..=k`, since every passed exit evaluates its head to test the exit
    /// condition.
    pub fn cumulative_inference_macs(&self, exit: usize) -> Result<u64> {
        if exit == 0 || exit > self.exit_count() {
            return Err(Error::Index {
                what: "exit",
                index: exit,
                limit: self.exit_count(),
            });
        }
        Ok(self.trunk_macs[..exit].iter().sum::<u64>() + self.head_macs[..exit].iter().sum::<u64>())
    }

    /// `cumulative_inference_macs(k)` for every exit.
    pub fn prefix_sums(&self) -> Vec<u64> {
        (1..=self.exit_count())
            .map(|k| self.cumulative_inference_macs(k).expect("in range"))
            .collect()
    }
}
