use ndarray::Array2;

use super::Record;

/// N×C binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub values: Array2<u8>,
    pub class_names: Vec<String>,
}

impl LabelMatrix {
    pub fn new(values: Array2<u8>, class_names: Vec<String>) -> Self {
        assert_eq!(values.ncols(), class_names.len(), "column count must match class names");
        Self { values, class_names }
    }

    pub fn from_records(records: &[Record], class_names: Vec<String>) -> Self {
        let c = class_names.len();
        let mut values = Array2::<u8>::zeros((records.len(), c));
        for (i, r) in records.iter().enumerate() {
            for (j, &v) in r.labels.iter().enumerate() {
                values[[i, j]] = v;
            }
        }
        Self { values, class_names }
    }

    pub fn num_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    /// Column `c` as booleans.
    pub fn column(&self, c: usize) -> Vec<bool> {
        self.values.column(c).iter().map(|&v| v == 1).collect()
    }

    /// Restricts to the given global class indices, in that order.
    pub fn select_classes(&self, indices: &[usize]) -> LabelMatrix {
        LabelMatrix {
            values: self.values.select(ndarray::Axis(1), indices),
            class_names: indices.iter().map(|&i| self.class_names[i].clone()).collect(),
        }
    }
}

/// N×C probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Array2<f64>,
    pub class_names: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(values: Array2<f64>, class_names: Vec<String>) -> Self {
        assert_eq!(values.ncols(), class_names.len(), "column count must match class names");
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)), "scores must lie in [0, 1]");
        Self { values, class_names }
    }

    pub fn num_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.column(c).to_vec()
    }

    pub fn select_classes(&self, indices: &[usize]) -> ScoreMatrix {
        ScoreMatrix {
            values: self.values.select(ndarray::Axis(1), indices),
            class_names: indices.iter().map(|&i| self.class_names[i].clone()).collect(),
        }
    }
}
