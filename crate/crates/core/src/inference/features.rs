use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};

use super::{InferenceError, StructureLabel};

pub const FEATURE_DIM: usize = 512;
/// Global feature plus one slot per structure.
pub const FEATURE_SLOTS: usize = 1 + StructureLabel::ALL.len();

/// `(k + 1) × 512` features: row 0 is the global image feature, rows 1..=5
/// the cropped structure features in canonical structure order. Missing
/// structures leave an all-zero row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    rows: Array2<f64>,
    occupancy: [bool; FEATURE_SLOTS],
}

impl FeatureBundle {
    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, slot: usize) -> ArrayView1<'_, f64> {
        self.rows.row(slot)
    }

    pub fn occupancy(&self) -> &[bool; FEATURE_SLOTS] {
        &self.occupancy
    }

    pub fn filled(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// Slot of a structure feature.
    pub fn slot_of(label: StructureLabel) -> usize {
        1 + label.index()
    }
}

pub fn assemble_features(
    global: &[f64],
    locals: &BTreeMap<StructureLabel, Vec<f64>>,
) -> Result<FeatureBundle, InferenceError> {
    if global.len() != FEATURE_DIM {
        return Err(InferenceError::Shape(format!("global feature has {} values, expected {FEATURE_DIM}", global.len())));
    }
    let mut rows = Array2::<f64>::zeros((FEATURE_SLOTS, FEATURE_DIM));
    let mut occupancy = [false; FEATURE_SLOTS];
    rows.row_mut(0).assign(&ArrayView1::from(global));
    occupancy[0] = true;
    for (label, v) in locals {
        if v.len() != FEATURE_DIM {
            return Err(InferenceError::Shape(format!(
                "{label:?} feature has {} values, expected {FEATURE_DIM}",
                v.len()
            )));
        }
        let slot = FeatureBundle::slot_of(*label);
        rows.row_mut(slot).assign(&ArrayView1::from(v.as_slice()));
        occupancy[slot] = true;
    }
    Ok(FeatureBundle { rows, occupancy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(x: f64) -> Vec<f64> {
        vec![x; FEATURE_DIM]
    }

    #[test]
    fn all_structures_present() {
        let locals: BTreeMap<_, _> =
            StructureLabel::ALL.iter().enumerate().map(|(i, &l)| (l, vec_of(i as f64 + 1.0))).collect();
        let b = assemble_features(&vec_of(0.5), &locals).unwrap();
        assert_eq!(b.filled(), 6);
        assert_eq!(b.rows().dim(), (6, 512));
        assert_eq!(b.row(3)[0], 3.0);
    }

    #[test]
    fn no_structures() {
        let b = assemble_features(&vec_of(0.5), &BTreeMap::new()).unwrap();
        assert_eq!(b.occupancy(), &[true, false, false, false, false, false]);
        for slot in 1..6 {
            assert!(b.row(slot).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn blanks_at_missing_slots() {
        let locals = BTreeMap::from([
            (StructureLabel::CleftLip, vec_of(1.0)),
            (StructureLabel::AlveolarRidge, vec_of(2.0)),
        ]);
        let b = assemble_features(&vec_of(0.1), &locals).unwrap();
        assert_eq!(b.occupancy(), &[true, false, true, true, false, false]);
        for label in [StructureLabel::UpperLip, StructureLabel::CleftAlveolus, StructureLabel::CleftPalate] {
            assert!(b.row(FeatureBundle::slot_of(label)).iter().all(|&v| v == 0.0));
        }
        assert_eq!(b.row(FeatureBundle::slot_of(StructureLabel::AlveolarRidge))[7], 2.0);
    }

    #[test]
    fn wrong_dimension() {
        assert!(matches!(assemble_features(&[1.0; 10], &BTreeMap::new()), Err(InferenceError::Shape(_))));
        let locals = BTreeMap::from([(StructureLabel::UpperLip, vec![0.0; 511])]);
        assert!(matches!(assemble_features(&vec_of(0.0), &locals), Err(InferenceError::Shape(_))));
    }
}
