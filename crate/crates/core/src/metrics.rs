use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts with rows = true class (ASD, TD) and columns =
/// predicted class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 2]; 2]);

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut c = [[0u64; 2]; 2];
        for (truth, pred) in pairs {
            if truth > 1 || pred > 1 {
                return Err(Error::Data(format!("class index out of range: ({truth}, {pred})")));
            }
            c[truth][pred] += 1;
        }
        Ok(Confusion(c))
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.0[0][0] + self.0[1][1]
    }

    /// Recall of class `k`, or `None` when the class has no samples.
    pub fn recall(&self, k: usize) -> Option<f64> {
        let row: u64 = self.0[k].iter().sum();
        (row > 0).then(|| self.0[k][k] as f64 / row as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    /// Unweighted average recall: the mean of per-class recalls over classes
    /// present in the ground truth.
    pub uar: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::Data("no samples to score".into()));
        }
        let recalls: Vec<f64> = (0..2).filter_map(|k| confusion.recall(k)).collect();
        Ok(Self {
            confusion,
            accuracy: confusion.correct() as f64 / total as f64,
            uar: recalls.iter().sum::<f64>() / recalls.len() as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = Metrics::from_confusion(Confusion([[5, 0], [0, 7]])).unwrap();
        assert_eq!((m.accuracy, m.uar), (1.0, 1.0));
    }

    #[test]
    fn mixed_confusion() {
        let m = Metrics::from_confusion(Confusion([[8, 2], [1, 9]])).unwrap();
        assert_eq!(m.accuracy, 0.85);
        assert_eq!(m.uar, (0.8 + 0.9) / 2.0);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let m = Metrics::from_confusion(Confusion([[10, 0], [10, 0]])).unwrap();
        assert_eq!((m.accuracy, m.uar), (0.5, 0.5));
    }

    #[test]
    fn uar_ignores_class_counts() {
        // same per-class recalls (0.8, 0.9), different class sizes
        let a = Metrics::from_confusion(Confusion([[8, 2], [1, 9]])).unwrap();
        let b = Metrics::from_confusion(Confusion([[80, 20], [1, 9]])).unwrap();
        assert_eq!(a.uar, b.uar);
        assert_ne!(a.accuracy, b.accuracy);
    }

    #[test]
    fn from_pairs_counts() {
        let c = Confusion::from_pairs([(0, 0), (0, 1), (1, 1), (1, 1)]).unwrap();
        assert_eq!(c.0, [[1, 1], [0, 2]]);
        assert!(Confusion::from_pairs([(2, 0)]).is_err());
        assert!(Metrics::from_confusion(Confusion::default()).is_err());
    }
}
