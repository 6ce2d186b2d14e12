// SPDX-License-Identifier: Apache-2.0

use std::collections::VecDeque;

pub const NUM_QUEUES: usize = 8;

/// Eight strict-priority queues indexed by PCP; FIFO within a queue.
#[derive(Debug, Clone)]
pub struct EgressQueues<T> {
    queues: [VecDeque<T>; NUM_QUEUES],
}

impl<T> Default for EgressQueues<T> {
    fn default() -> Self {
        EgressQueues {
            queues: std::array::from_fn(|_| VecDeque::new()),
        }
    }
}

impl<T> EgressQueues<T> {
    pub fn enqueue(&mut self, pcp: u8, item: T) {
        self.queues[usize::from(pcp & 0x7)].push_back(item);
    }

    /// Transmission selection: highest non-empty priority first.
    pub fn dequeue(&mut self) -> Option<T> {
        self.queues.iter_mut().rev().find_map(VecDeque::pop_front)
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// Queued items, highest priority first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.queues.iter().rev().flat_map(VecDeque::iter)
    }

    pub fn drain(&mut self) -> Vec<T> {
        std::iter::from_fn(|| self.dequeue()).collect()
    }
}
