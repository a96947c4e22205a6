use super::DomainDataset;
use crate::error::{Error, Result};

/// Shortest sequence that can be split: one prefix item plus three targets.
pub const MIN_SPLIT_LEN: usize = 4;

/// Leave-one-out split of one user's sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: String,
    pub train_prefix: Vec<usize>,
    pub train_target: usize,
    pub valid_target: usize,
    pub test_target: usize,
}

impl UserSplit {
    /// Prefix followed by the training target: the sequence the model may
    /// learn from.
    pub fn train_sequence(&self) -> Vec<usize> {
        let mut s = self.train_prefix.clone();
        s.push(self.train_target);
        s
    }

    /// Input history and target for validation.
    pub fn valid_example(&self) -> (Vec<usize>, usize) {
        (self.train_sequence(), self.valid_target)
    }

    /// Input history and target for test.
    pub fn test_example(&self) -> (Vec<usize>, usize) {
        let mut s = self.train_sequence();
        s.push(self.valid_target);
        (s, self.test_target)
    }

    /// The original sequence.
    pub fn reconstruct(&self) -> Vec<usize> {
        let (mut s, t) = self.test_example();
        s.push(t);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitBundle {
    pub users: Vec<UserSplit>,
}

impl SplitBundle {
    /// Every next-item pair inside the training sequences: the history
    /// `seq[..j]` paired with `seq[j]` for `j >= 1`.
    pub fn train_examples(&self) -> Vec<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        for u in &self.users {
            let seq = u.train_sequence();
            for j in 1..seq.len() {
                out.push((seq[..j].to_vec(), seq[j]));
            }
        }
        out
    }

    /// One example per user: the training prefix and its training target.
    pub fn train_target_examples(&self) -> Vec<(Vec<usize>, usize)> {
        self.users
            .iter()
            .map(|u| (u.train_prefix.clone(), u.train_target))
            .collect()
    }

    pub fn valid_examples(&self) -> Vec<(Vec<usize>, usize)> {
        self.users.iter().map(UserSplit::valid_example).collect()
    }

    pub fn test_examples(&self) -> Vec<(Vec<usize>, usize)> {
        self.users.iter().map(UserSplit::test_example).collect()
    }
}

/// Reserves the last three items of every sequence as training, validation
/// and test targets.
pub fn leave_one_out_split(dataset: &DomainDataset) -> Result<SplitBundle> {
    let users = dataset
        .sequences
        .iter()
        .map(|s| {
            let n = s.items.len();
            if n < MIN_SPLIT_LEN {
                return Err(Error::SequenceTooShort {
                    user: s.user.clone(),
                    len: n,
                    min: MIN_SPLIT_LEN,
                });
            }
            Ok(UserSplit {
                user: s.user.clone(),
                train_prefix: s.items[..n - 3].to_vec(),
                train_target: s.items[n - 3],
                valid_target: s.items[n - 2],
                test_target: s.items[n - 1],
            })
        })
        .collect::<Result<_>>()?;
    Ok(SplitBundle { users })
}
