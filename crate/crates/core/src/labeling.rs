use crate::error::{Error, Result};

/// Per-pixel instance ids over an `H x W` grid: 0 is background, `1..=K` are
/// instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabeling {
    height: usize,
    width: usize,
    labels: Vec<u16>,
    count: usize,
}

impl InstanceLabeling {
    /// Validates that every id in `1..=max` occurs at least once.
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "labeling has {} entries for a {height}x{width} grid",
                labels.len()
            )));
        }
        let count = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; count + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=count).find(|&k| !seen[k]) {
            return Err(Error::invalid(format!(
                "instance id {missing} missing from labeling with {count} instances"
            )));
        }
        Ok(InstanceLabeling {
            height,
            width,
            labels,
            count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Number of foreground instances `K`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn foreground(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&p| self.labels[p] != 0).collect()
    }

    pub fn background(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&p| self.labels[p] == 0).collect()
    }

    /// Pixel lists of instances `1..=K`, in id order.
    pub fn instances(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (p, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                out[l as usize - 1].push(p);
            }
        }
        out
    }

    pub fn same_grid(&self, other: &InstanceLabeling) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_gaps_in_ids() {
        assert!(InstanceLabeling::new(1, 3, vec![0, 1, 3]).is_err());
        assert!(InstanceLabeling::new(1, 3, vec![0, 1, 2]).is_ok());
        assert!(InstanceLabeling::new(2, 2, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn instance_lists() {
        let l = InstanceLabeling::new(2, 3, vec![0, 1, 1, 2, 0, 2]).unwrap();
        assert_eq!(l.count(), 2);
        assert_eq!(l.instances(), vec![vec![1, 2], vec![3, 5]]);
        assert_eq!(l.background(), vec![0, 4]);
    }
}
