//! Featurization, the ChiMol file format, manifests and synthetic datasets.

mod chimol;
mod elements;
mod manifest;
mod synth;

pub use chimol::{parse_chimol, read_chimol, write_chimol, write_chimol_file};
pub use elements::{atom_features, atomic_number, element_slot, element_symbol, featurize, FEATURE_DIM};
pub use manifest::{
    format_manifest, load_manifest, parse_manifest, read_manifest, split_sizes, write_dataset,
    ManifestEntry, MANIFEST, SPLITS,
};
pub use synth::{
    axial_toy, biaryl, canonical_center, circular_sign_runs, first_unit_products, gen_axial,
    gen_axial_torsion, gen_rs, label_of, SyntheticSpec, LABEL_R, LABEL_S, POSITION_NOISE,
    SPECTATOR_CLEARANCE, TOY_ELEMENTS, TOY_PHASE_DEG,
};

use crate::geometry::{mirror, Molecule};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMolecule {
    pub mol: Molecule,
    pub label: usize,
}

/// Mirror image through the xy-plane; every chirality product changes sign.
pub fn make_enantiomer(mol: &Molecule) -> Molecule {
    mirror(mol)
}
