//! Chiral units, atom partitions, chirality matrices and the signed-volume
//! chirality product, plus the rigid motions and reflections used to audit them.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{cross, det3, dot, sub3, Matrix};

pub type Vec3 = [f64; 3];

/// Default tolerance (Å³) below which a chirality product is called degenerate.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-9;

/// The stereogenic element of a chiral unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stereocenter {
    /// A tetrahedral atom.
    Center(usize),
    /// A stereogenic axis between two atoms.
    Axis(usize, usize),
}

impl Stereocenter {
    pub fn atoms(&self) -> Vec<usize> {
        match *self {
            Stereocenter::Center(i) => vec![i],
            Stereocenter::Axis(a, b) => vec![a, b],
        }
    }

    pub fn is_axis(&self) -> bool {
        matches!(self, Stereocenter::Axis(..))
    }
}

/// A stereocenter together with its four substituent atoms in priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChiralUnit {
    pub center: Stereocenter,
    pub related: [usize; 4],
}

impl ChiralUnit {
    pub fn center(atom: usize, related: [usize; 4]) -> Self {
        ChiralUnit {
            center: Stereocenter::Center(atom),
            related,
        }
    }

    pub fn axis(a: usize, b: usize, related: [usize; 4]) -> Self {
        ChiralUnit {
            center: Stereocenter::Axis(a, b),
            related,
        }
    }

    pub fn validate(&self, n_atoms: usize) -> Result<()> {
        let centers = self.center.atoms();
        let mut seen = BTreeSet::new();
        for &i in centers.iter().chain(self.related.iter()) {
            if i >= n_atoms {
                return Err(Error::Index {
                    index: i,
                    len: n_atoms,
                });
            }
            if !seen.insert(i) {
                return Err(Error::Annotation(format!(
                    "atom {i} appears twice in chiral unit {:?}",
                    self.center
                )));
            }
        }
        Ok(())
    }
}

/// A molecule: coordinates in Å, element numbers, per-atom features and
/// chiral annotations. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    id: String,
    coords: Vec<Vec3>,
    atomic_numbers: Vec<u8>,
    features: Matrix,
    chiral_units: Vec<ChiralUnit>,
    /// Atoms forming a rigid blade that can be rotated about an axis.
    blade: Option<Vec<usize>>,
}

impl Molecule {
    pub fn new(
        id: impl Into<String>,
        coords: Vec<Vec3>,
        atomic_numbers: Vec<u8>,
        features: Matrix,
        chiral_units: Vec<ChiralUnit>,
    ) -> Result<Self> {
        let n = coords.len();
        if n == 0 {
            return Err(Error::Argument("molecule has no atoms".into()));
        }
        if atomic_numbers.len() != n || features.rows() != n {
            return Err(Error::Shape(format!(
                "{n} coordinates, {} atomic numbers, {} feature rows",
                atomic_numbers.len(),
                features.rows()
            )));
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input(format!("coordinates of atom {i}")));
        }
        for unit in &chiral_units {
            unit.validate(n)?;
        }
        let mol = Molecule {
            id: id.into(),
            coords,
            atomic_numbers,
            features,
            chiral_units,
            blade: None,
        };
        // center disjointness is part of validity
        partition_atoms(&mol)?;
        Ok(mol)
    }

    pub fn with_blade(mut self, blade: Vec<usize>) -> Result<Self> {
        if let Some(&i) = blade.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index {
                index: i,
                len: self.len(),
            });
        }
        self.blade = Some(blade);
        Ok(self)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn atomic_numbers(&self) -> &[u8] {
        &self.atomic_numbers
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn chiral_units(&self) -> &[ChiralUnit] {
        &self.chiral_units
    }

    pub fn blade(&self) -> Option<&[usize]> {
        self.blade.as_deref()
    }

    /// Same annotations and features with new coordinates.
    pub fn with_coords(&self, coords: Vec<Vec3>) -> Result<Self> {
        if coords.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} coordinates, got {}",
                self.len(),
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input(format!("coordinates of atom {i}")));
        }
        Ok(Molecule {
            coords,
            ..self.clone()
        })
    }

    /// Chirality products of every unit, in annotation order.
    pub fn chirality_products(&self) -> Vec<f64> {
        self.chiral_units
            .iter()
            .map(|u| chirality_product(&chirality_matrix(u, &self.coords)))
            .collect()
    }
}

/// Index sets of chiral, chiral-related and non-chiral atoms (ascending).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AtomPartition {
    pub chiral: Vec<usize>,
    pub related: Vec<usize>,
    pub nonchiral: Vec<usize>,
}

/// Splits the atoms into chiral centers, their substituents, and the rest.
/// An atom that is a substituent of one unit and a center of another counts
/// as chiral.
pub fn partition_atoms(mol: &Molecule) -> Result<AtomPartition> {
    let mut chiral = BTreeSet::new();
    for unit in &mol.chiral_units {
        for i in unit.center.atoms() {
            if !chiral.insert(i) {
                return Err(Error::Annotation(format!(
                    "atom {i} is the center of more than one chiral unit"
                )));
            }
        }
    }
    let related: BTreeSet<usize> = mol
        .chiral_units
        .iter()
        .flat_map(|u| u.related)
        .filter(|i| !chiral.contains(i))
        .collect();
    let nonchiral = (0..mol.len())
        .filter(|i| !chiral.contains(i) && !related.contains(i))
        .collect();
    Ok(AtomPartition {
        chiral: chiral.into_iter().collect(),
        related: related.into_iter().collect(),
        nonchiral,
    })
}

/// Position the substituent vectors are measured from: the center atom, or
/// the midpoint of an axis.
pub fn reference_point(unit: &ChiralUnit, coords: &[Vec3]) -> Vec3 {
    match unit.center {
        Stereocenter::Center(i) => coords[i],
        Stereocenter::Axis(a, b) => {
            let (p, q) = (coords[a], coords[b]);
            [
                0.5 * (p[0] + q[0]),
                0.5 * (p[1] + q[1]),
                0.5 * (p[2] + q[2]),
            ]
        }
    }
}

/// 3×3 matrix with rows `x_r1 − x_ref`, `x_r2 − x_ref`, `x_r4 − x_r3` (Å).
#[derive(Debug, Clone, PartialEq)]
pub struct ChiralityMatrix(pub Matrix);

impl ChiralityMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    fn row(&self, i: usize) -> Vec3 {
        let r = self.0.row(i);
        [r[0], r[1], r[2]]
    }
}

pub fn chirality_matrix(unit: &ChiralUnit, coords: &[Vec3]) -> ChiralityMatrix {
    let origin = reference_point(unit, coords);
    let [r1, r2, r3, r4] = unit.related;
    ChiralityMatrix(Matrix::from_rows(&[
        sub3(coords[r1], origin),
        sub3(coords[r2], origin),
        sub3(coords[r4], coords[r3]),
    ]))
}

/// `((x_r1 − x_ref) × (x_r2 − x_ref)) · (x_r4 − x_r3)`, which equals the
/// determinant of the chirality matrix.
pub fn chirality_product(mc: &ChiralityMatrix) -> f64 {
    let c = cross(mc.row(0), mc.row(1));
    dot(&c, &mc.row(2))
}

/// Same quantity through cofactor expansion; kept as the independent route.
pub fn chirality_product_cofactor(mc: &ChiralityMatrix) -> f64 {
    det3(&mc.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Configuration {
    R,
    S,
    Degenerate,
}

impl Configuration {
    pub fn opposite(self) -> Self {
        match self {
            Configuration::R => Configuration::S,
            Configuration::S => Configuration::R,
            Configuration::Degenerate => Configuration::Degenerate,
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Configuration::R => "R",
            Configuration::S => "S",
            Configuration::Degenerate => "Degenerate",
        })
    }
}

/// R for positive products, S for negative, Degenerate within `tol` of zero.
pub fn assign_configuration(product: f64, tol: f64) -> Configuration {
    debug_assert!(tol >= 0.0);
    if product > tol {
        Configuration::R
    } else if product < -tol {
        Configuration::S
    } else {
        Configuration::Degenerate
    }
}

/// Applies `x ↦ R·x + t` to every atom. `rotation` must be orthogonal
/// (reflections allowed).
pub fn transform(mol: &Molecule, rotation: &Matrix, translation: Vec3) -> Result<Molecule> {
    if rotation.shape() != (3, 3) {
        return Err(Error::Argument("rotation must be 3×3".into()));
    }
    let drift = rotation
        .t_matmul(rotation)
        .max_abs_diff(&Matrix::identity(3));
    if !(drift <= 1e-10) {
        return Err(Error::Argument(format!(
            "rotation is not orthogonal (|RᵀR − I| = {drift:e})"
        )));
    }
    let coords = mol
        .coords
        .iter()
        .map(|x| {
            let mut y = translation;
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += dot(rotation.row(i), x);
            }
            y
        })
        .collect();
    mol.with_coords(coords)
}

/// Reflection through the xy-plane (z ↦ −z).
pub fn mirror(mol: &Molecule) -> Molecule {
    let coords = mol.coords.iter().map(|&[x, y, z]| [x, y, -z]).collect();
    Molecule {
        coords,
        ..mol.clone()
    }
}

/// Sorts four substituents by ascending priority, breaking exact ties by
/// atom index. Fails only if an (index, priority) pair is repeated.
pub fn order_substituents(indices: [usize; 4], priorities: [f64; 4]) -> Result<[usize; 4]> {
    if priorities.iter().any(|p| p.is_nan()) {
        return Err(Error::Annotation("priority is NaN".into()));
    }
    let mut pairs: Vec<(f64, usize)> = priorities.into_iter().zip(indices).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if pairs.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Annotation(format!(
            "substituents {indices:?} cannot be ordered by priorities {priorities:?}"
        )));
    }
    Ok([pairs[0].1, pairs[1].1, pairs[2].1, pairs[3].1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{random_matrix, random_rotation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bare(coords: Vec<Vec3>, units: Vec<ChiralUnit>) -> Molecule {
        let n = coords.len();
        Molecule::new("t", coords, vec![6; n], Matrix::zeros(n, 1), units).unwrap()
    }

    fn canonical() -> Molecule {
        bare(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            vec![],
        )
    }

    fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect()
    }

    #[test]
    fn partition_single_center() {
        let mol = bare(random_coords(&mut ChaCha8Rng::seed_from_u64(0), 5), vec![ChiralUnit::center(0, [1, 2, 3, 4])]);
        let p = partition_atoms(&mol).unwrap();
        assert_eq!(p.chiral, vec![0]);
        assert_eq!(p.related, vec![1, 2, 3, 4]);
        assert!(p.nonchiral.is_empty());
    }

    #[test]
    fn partition_without_units() {
        let mol = bare(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![]);
        let p = partition_atoms(&mol).unwrap();
        assert!(p.chiral.is_empty() && p.related.is_empty());
        assert_eq!(p.nonchiral, vec![0, 1, 2]);
    }

    #[test]
    fn partition_two_centers_sharing_a_substituent() {
        let units = vec![
            ChiralUnit::center(0, [2, 3, 4, 1]),
            ChiralUnit::center(1, [0, 4, 5, 6]),
        ];
        let mol = bare(random_coords(&mut ChaCha8Rng::seed_from_u64(1), 8), units.clone());
        let p = partition_atoms(&mol).unwrap();

        // brute-force set arithmetic over the explicit index lists
        let centers: Vec<usize> = vec![0, 1];
        let mut related = Vec::new();
        for u in &units {
            for &r in &u.related {
                if !centers.contains(&r) && !related.contains(&r) {
                    related.push(r);
                }
            }
        }
        related.sort();
        let nonchiral: Vec<usize> = (0..8).filter(|i| !centers.contains(i) && !related.contains(i)).collect();
        assert_eq!(p.chiral, centers);
        assert_eq!(p.related, related);
        assert_eq!(p.nonchiral, nonchiral);
        assert_eq!((p.chiral.len(), p.related.len(), p.nonchiral.len()), (2, 5, 1));
    }

    #[test]
    fn overlapping_centers_are_rejected() {
        let coords = random_coords(&mut ChaCha8Rng::seed_from_u64(2), 9);
        let err = Molecule::new(
            "x",
            coords,
            vec![6; 9],
            Matrix::zeros(9, 1),
            vec![ChiralUnit::center(0, [1, 2, 3, 4]), ChiralUnit::axis(0, 5, [1, 6, 7, 8])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Annotation(_)));
    }

    #[test]
    fn reference_points() {
        let coords = vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [-1.0, 4.0, 2.0], [3.0, -2.0, 0.0]];
        assert_eq!(reference_point(&ChiralUnit::center(0, [1, 2, 3, 4]), &coords), [1.0, 2.0, 3.0]);
        assert_eq!(reference_point(&ChiralUnit::axis(1, 2, [0, 3, 4, 0]), &coords), [1.0, 0.0, 0.0]);
        assert_eq!(reference_point(&ChiralUnit::axis(3, 4, [0, 1, 2, 0]), &coords), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn canonical_frame_matrix_and_translation() {
        let mol = canonical();
        let unit = ChiralUnit::center(0, [1, 2, 3, 4]);
        let mc = chirality_matrix(&unit, mol.coords());
        assert_eq!(mc.0, Matrix::identity(3));
        let moved: Vec<Vec3> = mol.coords().iter().map(|c| [c[0] + 5.0, c[1] + 5.0, c[2] + 5.0]).collect();
        assert_eq!(chirality_matrix(&unit, &moved), mc);
    }

    #[test]
    fn matrix_rows_match_elementwise_subtraction_seed_7() {
        let coords = random_coords(&mut ChaCha8Rng::seed_from_u64(7), 5);
        let unit = ChiralUnit::center(2, [4, 0, 3, 1]);
        let mc = chirality_matrix(&unit, &coords);
        for k in 0..3 {
            assert_eq!(mc.0[(0, k)], coords[4][k] - coords[2][k]);
            assert_eq!(mc.0[(1, k)], coords[0][k] - coords[2][k]);
            assert_eq!(mc.0[(2, k)], coords[1][k] - coords[3][k]);
        }
    }

    #[test]
    fn product_examples() {
        assert_eq!(chirality_product(&ChiralityMatrix(Matrix::identity(3))), 1.0);
        let flipped = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        assert_eq!(chirality_product(&ChiralityMatrix(flipped)), -1.0);
        let a = ChiralityMatrix(random_matrix(&mut ChaCha8Rng::seed_from_u64(11), 3, 3));
        let (p, c) = (chirality_product(&a), chirality_product_cofactor(&a));
        assert!((p - c).abs() <= 1e-12 * c.abs());
    }

    #[test]
    fn configuration_labels() {
        assert_eq!(assign_configuration(2.5, 1e-9), Configuration::R);
        assert_eq!(assign_configuration(-0.3, 1e-9), Configuration::S);
        assert_eq!(assign_configuration(1e-12, 1e-9), Configuration::Degenerate);
    }

    #[test]
    fn transform_examples() {
        let mol = canonical().with_id("c");
        let same = transform(&mol, &Matrix::identity(3), [0.0; 3]).unwrap();
        assert_eq!(same.coords(), mol.coords());

        let mol = bare(canonical().coords().to_vec(), vec![ChiralUnit::center(0, [1, 2, 3, 4])]);
        let refl = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        assert_eq!(transform(&mol, &refl, [0.0; 3]).unwrap().chirality_products(), vec![-1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mol = bare(random_coords(&mut rng, 5), vec![ChiralUnit::center(0, [1, 2, 3, 4])]);
        let r = random_rotation(&mut rng);
        let t = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let before = mol.chirality_products()[0];
        let after = transform(&mol, &r, t).unwrap().chirality_products()[0];
        assert!((after - before).abs() <= 1e-10 * before.abs());

        let bad = Matrix::from_rows(&[[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(transform(&mol, &bad, [0.0; 3]), Err(Error::Argument(_))));
    }

    #[test]
    fn mirror_examples() {
        let mol = bare(canonical().coords().to_vec(), vec![ChiralUnit::center(0, [1, 2, 3, 4])]);
        assert_eq!(mirror(&mol).chirality_products(), vec![-1.0]);
        assert_eq!(mirror(&mirror(&mol)), mol);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let units = vec![ChiralUnit::center(0, [1, 2, 3, 4]), ChiralUnit::axis(5, 6, [7, 8, 9, 1])];
        let mol = bare(random_coords(&mut rng, 10), units);
        let flipped = mirror(&mol).chirality_products();
        for (a, b) in mol.chirality_products().iter().zip(&flipped) {
            assert_eq!(*b, -*a);
        }
    }

    #[test]
    fn substituent_ordering() {
        let (a, b, c, d) = (10, 11, 12, 13);
        assert_eq!(order_substituents([a, b, c, d], [1.0, 4.0, 2.0, 5.0]).unwrap(), [a, c, b, d]);
        assert_eq!(order_substituents([3, 1, 4, 2], [0.1, 0.2, 0.3, 0.4]).unwrap(), [3, 1, 4, 2]);
        // exact priority ties fall back to atom index
        assert_eq!(order_substituents([7, 5, 6, 8], [1.0, 1.0, 2.0, 0.0]).unwrap(), [8, 5, 7, 6]);
        assert!(order_substituents([1, 1, 2, 3], [1.0, 1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn ordering_ignores_input_permutation() {
        let pairs = [(10usize, 1.0), (11, 4.0), (12, 2.0), (13, 5.0)];
        let expected = [10, 12, 11, 13];
        let mut count = 0;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = [a, b, c, d];
                        if (0..4).any(|i| (i + 1..4).any(|j| p[i] == p[j])) {
                            continue;
                        }
                        let idx = p.map(|k| pairs[k].0);
                        let pri = p.map(|k| pairs[k].1);
                        assert_eq!(order_substituents(idx, pri).unwrap(), expected);
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(count, 24);
    }

    proptest! {
        #[test]
        fn double_mirror_is_identity_and_flips_labels(
            coords in proptest::collection::vec(proptest::array::uniform3(-5.0f64..5.0), 5)
        ) {
            let mol = bare(coords, vec![ChiralUnit::center(0, [1, 2, 3, 4])]);
            let back = mirror(&mirror(&mol));
            prop_assert_eq!(back.coords(), mol.coords());
            let p = mol.chirality_products()[0];
            let q = mirror(&mol).chirality_products()[0];
            let (a, b) = (assign_configuration(p, 1e-9), assign_configuration(q, 1e-9));
            if a != Configuration::Degenerate {
                prop_assert_eq!(b, a.opposite());
            }
        }

        #[test]
        fn cross_dot_equals_cofactor(entries in proptest::collection::vec(-10.0f64..10.0, 9)) {
            let mc = ChiralityMatrix(Matrix::from_vec(3, 3, entries));
            let (p, c) = (chirality_product(&mc), chirality_product_cofactor(&mc));
            let scale = mc.0.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).powi(3).max(1e-300);
            prop_assert!((p - c).abs() <= 1e-12 * c.abs().max(1e-3 * scale));
        }

        #[test]
        fn ordering_is_permutation_invariant(
            pri in proptest::array::uniform4(-100i32..100),
            perm in Just([0usize, 1, 2, 3]).prop_shuffle()
        ) {
            let idx = [4usize, 9, 2, 7];
            let pri = pri.map(|p| p as f64);
            let base = order_substituents(idx, pri).unwrap();
            let shuffled = order_substituents(perm.map(|k| idx[k]), perm.map(|k| pri[k])).unwrap();
            prop_assert_eq!(base, shuffled);
        }
    }
}
