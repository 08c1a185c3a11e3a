use serde::{Deserialize, Serialize};

use super::DataError;

/// Head/Tail/All class index sets.
///
/// Head holds the most prevalent classes, Tail the rest plus the support
/// device class, which is the only index shared by both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub head_indices: Vec<usize>,
    pub tail_indices: Vec<usize>,
    pub all_indices: Vec<usize>,
    pub support_device_index: usize,
}

/// ⌈C·9/19⌉, which is 9 for the 19-class label set.
pub fn default_head_size(num_classes: usize) -> usize {
    (num_classes * 9).div_ceil(19)
}

/// Splits classes into Head (top `head_size` by count, ties to the lower
/// index) and Tail (the remainder plus the support device).
///
/// `head_size = None` uses [`default_head_size`].
pub fn partition_classes(
    counts: &[usize],
    class_names: &[String],
    support_device_name: &str,
    head_size: Option<usize>,
) -> Result<ClassPartition, DataError> {
    let c = counts.len();
    if class_names.len() != c {
        return Err(DataError::Partition(format!(
            "{} counts but {} class names",
            c,
            class_names.len()
        )));
    }
    let head_size = head_size.unwrap_or_else(|| default_head_size(c));
    if head_size == 0 || head_size >= c {
        return Err(DataError::Partition(format!("head size {head_size} must lie in 1..{c}")));
    }
    let support = class_names
        .iter()
        .position(|n| n == support_device_name)
        .ok_or_else(|| DataError::Partition(format!("unknown support device class `{support_device_name}`")))?;

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut head: Vec<usize> = order[..head_size].to_vec();
    if !head.contains(&support) {
        return Err(DataError::Partition(format!(
            "support device class `{support_device_name}` is not among the {head_size} most prevalent classes"
        )));
    }
    let mut tail: Vec<usize> = order[head_size..].to_vec();
    tail.push(support);
    head.sort_unstable();
    tail.sort_unstable();
    Ok(ClassPartition {
        head_indices: head,
        tail_indices: tail,
        all_indices: (0..c).collect(),
        support_device_index: support,
    })
}

impl ClassPartition {
    pub fn num_classes(&self) -> usize {
        self.all_indices.len()
    }

    pub fn check(&self) -> Result<(), DataError> {
        let c = self.all_indices.len();
        let mut covered = vec![0u8; c];
        for &i in self.head_indices.iter().chain(&self.tail_indices) {
            if i >= c {
                return Err(DataError::Partition(format!("index {i} out of range")));
            }
            covered[i] += 1;
        }
        for (i, &n) in covered.iter().enumerate() {
            let expected = if i == self.support_device_index { 2 } else { 1 };
            if n != expected {
                return Err(DataError::Partition(format!("class {i} covered {n} times, expected {expected}")));
            }
        }
        Ok(())
    }
}
