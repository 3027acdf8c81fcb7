use crate::numerics::Matrix;

const SYMBOLS: [&str; 86] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn",
];

/// Elements with a dedicated one-hot slot; everything else shares the last.
const ELEMENT_SLOTS: [u8; 31] = [
    1, 3, 5, 6, 7, 8, 9, 11, 12, 13, 14, 15, 16, 17, 19, 20, 22, 24, 25, 26, 27, 28, 29, 30, 32, 33,
    34, 35, 50, 53, 78,
];

pub const ELEMENT_DIM: usize = 32;
pub const DEGREE_DIM: usize = 6;
pub const CHARGE_DIM: usize = 5;
pub const HYDROGEN_DIM: usize = 5;
pub const HYBRIDIZATION_DIM: usize = 4;
pub const FEATURE_DIM: usize = ELEMENT_DIM + DEGREE_DIM + CHARGE_DIM + HYDROGEN_DIM + HYBRIDIZATION_DIM;

/// Formal charges −2..=+2; slot of charge 0.
const NEUTRAL_CHARGE_SLOT: usize = 2;

pub fn atomic_number(symbol: &str) -> Option<u8> {
    SYMBOLS.iter().position(|&s| s == symbol).map(|i| i as u8 + 1)
}

pub fn element_symbol(z: u8) -> Option<&'static str> {
    SYMBOLS.get((z as usize).checked_sub(1)?).copied()
}

pub fn element_slot(z: u8) -> usize {
    ELEMENT_SLOTS
        .iter()
        .position(|&e| e == z)
        .unwrap_or(ELEMENT_DIM - 1)
}

/// One feature row: element one-hot, then degree, charge, hydrogen count and
/// hybridization one-hots. Without a bond graph the last four sit in their
/// zero class (degree 0, neutral, no hydrogens, unspecified).
pub fn atom_features(z: u8) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[element_slot(z)] = 1.0;
    let mut at = ELEMENT_DIM;
    f[at] = 1.0;
    at += DEGREE_DIM;
    f[at + NEUTRAL_CHARGE_SLOT] = 1.0;
    at += CHARGE_DIM;
    f[at] = 1.0;
    at += HYDROGEN_DIM;
    f[at] = 1.0;
    f
}

pub fn featurize(atomic_numbers: &[u8]) -> Matrix {
    let mut m = Matrix::zeros(atomic_numbers.len(), FEATURE_DIM);
    for (i, &z) in atomic_numbers.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&atom_features(z));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_table() {
        assert_eq!(atomic_number("C"), Some(6));
        assert_eq!(atomic_number("Cl"), Some(17));
        assert_eq!(atomic_number("Rn"), Some(86));
        assert_eq!(atomic_number("Xx"), None);
        for z in 1..=86 {
            assert_eq!(atomic_number(element_symbol(z).unwrap()), Some(z));
        }
        assert_eq!(element_symbol(0), None);
    }

    #[test]
    fn one_hot_blocks() {
        assert_eq!(FEATURE_DIM, 52);
        for z in [1, 6, 17, 53, 79, 86] {
            let f = atom_features(z);
            let blocks = [ELEMENT_DIM, DEGREE_DIM, CHARGE_DIM, HYDROGEN_DIM, HYBRIDIZATION_DIM];
            let mut at = 0;
            for b in blocks {
                let hot: Vec<f64> = f[at..at + b].to_vec();
                assert_eq!(hot.iter().sum::<f64>(), 1.0);
                assert!(hot.iter().all(|&v| v == 0.0 || v == 1.0));
                at += b;
            }
        }
        assert_ne!(element_slot(6), element_slot(7));
        assert_eq!(element_slot(79), element_slot(86));
        let m = featurize(&[6, 6, 8]);
        assert_eq!(m.row(0), m.row(1));
        assert_ne!(m.row(0), m.row(2));
    }
}
