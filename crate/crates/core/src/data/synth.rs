use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::elements::featurize;
use super::LabeledMolecule;
use crate::error::{Error, Result};
use crate::geometry::{
    assign_configuration, chirality_matrix, chirality_product, mirror, ChiralUnit, Configuration,
    Molecule, Stereocenter, Vec3, DEFAULT_DEGENERACY_TOL,
};
use crate::numerics::{norm3, random_rotation, sub3, Matrix};

pub const LABEL_R: usize = 0;
pub const LABEL_S: usize = 1;

/// Standard deviation of the Gaussian jitter on generated positions (Å).
pub const POSITION_NOISE: f64 = 0.1;
/// Minimum distance between a spectator and any other atom (Å).
pub const SPECTATOR_CLEARANCE: f64 = 2.0;
/// Unit-normalized ideal tetrahedral directions (before scaling by √3).
const TETRAHEDRAL: [Vec3; 4] = [
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
];
const SUBSTITUENT_POOL: [u8; 8] = [1, 6, 7, 8, 9, 17, 35, 53];
const SPECTATOR_POOL: [u8; 5] = [1, 6, 7, 8, 16];
const MAX_ATTEMPTS_PER_SAMPLE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Number of extra atoms far from the stereocenter.
    pub spectators: RangeInclusive<usize>,
    /// Substituent bond length interval (Å).
    pub bond_length: (f64, f64),
    /// Samples with `|P| below this (Å³) are redrawn.
    pub min_abs_product: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 100,
            spectators: 0..=3,
            bond_length: (1.4, 1.8),
            min_abs_product: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Argument("count must be at least 1".into()));
        }
        if !(self.min_abs_product > 0.0) {
            return Err(Error::Argument("min_abs_product must be positive".into()));
        }
        let (lo, hi) = self.bond_length;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Argument("bond length interval must be positive".into()));
        }
        Ok(())
    }
}

pub fn label_of(configuration: Configuration) -> Option<usize> {
    match configuration {
        Configuration::R => Some(LABEL_R),
        Configuration::S => Some(LABEL_S),
        Configuration::Degenerate => None,
    }
}

fn jitter<R: Rng>(rng: &mut R, p: Vec3, sigma: f64) -> Vec3 {
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    [p[0] + n.sample(rng), p[1] + n.sample(rng), p[2] + n.sample(rng)]
}

fn rotate_all(coords: &mut [Vec3], r: &Matrix) {
    for c in coords.iter_mut() {
        let v = *c;
        *c = [0, 1, 2].map(|i| (0..3).map(|j| r[(i, j)] * v[j]).sum());
    }
}

/// Adds spectators at random positions clear of every existing atom.
/// Returns `false` if no clear position was found.
fn place_spectators<R: Rng>(
    rng: &mut R,
    coords: &mut Vec<Vec3>,
    zs: &mut Vec<u8>,
    count: usize,
    radius: f64,
) -> bool {
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS_PER_SAMPLE {
            let p = [0; 3].map(|_| rng.gen_range(-radius..radius));
            if coords.iter().all(|&c| norm3(sub3(p, c)) >= SPECTATOR_CLEARANCE) {
                coords.push(p);
                zs.push(*SPECTATOR_POOL.choose(rng).unwrap());
                placed = true;
                break;
            }
        }
        if !placed {
            return false;
        }
    }
    true
}

fn sample_center<R: Rng>(rng: &mut R, spec: &SyntheticSpec, id: &str) -> Result<Option<Molecule>> {
    let mut elements: Vec<u8> = SUBSTITUENT_POOL.choose_multiple(rng, 4).copied().collect();
    elements.sort_unstable();
    let mut dirs = TETRAHEDRAL;
    dirs.shuffle(rng);
    let mut coords = vec![[0.0; 3]];
    let mut zs = vec![6u8];
    let inv = 1.0 / 3f64.sqrt();
    for (d, &z) in dirs.iter().zip(&elements) {
        let len = rng.gen_range(spec.bond_length.0..=spec.bond_length.1);
        coords.push(jitter(rng, d.map(|v| v * inv * len), POSITION_NOISE));
        zs.push(z);
    }
    let extra = rng.gen_range(spec.spectators.clone());
    if !place_spectators(rng, &mut coords, &mut zs, extra, 5.0) {
        return Ok(None);
    }
    rotate_all(&mut coords, &random_rotation(rng));
    let features = featurize(&zs);
    Molecule::new(id, coords, zs, features, vec![ChiralUnit::center(0, [1, 2, 3, 4])]).map(Some)
}

fn balanced<F>(spec: &SyntheticSpec, prefix: &str, mut sample: F) -> Result<Vec<LabeledMolecule>>
where
    F: FnMut(&mut ChaCha8Rng, &str) -> Result<Option<Molecule>>,
{
    spec.validate()?;
    let limit = MAX_ATTEMPTS_PER_SAMPLE * spec.count;
    let mut attempts = 0;
    let mut out = Vec::with_capacity(spec.count);
    for t in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(t as u64));
        let id = format!("{prefix}{t:05}");
        let mol = loop {
            attempts += 1;
            if attempts > limit {
                return Err(Error::Generation { attempts: limit });
            }
            let Some(mol) = sample(&mut rng, &id)? else { continue };
            if mol.chirality_products()[0].abs() >= spec.min_abs_product {
                break mol;
            }
        };
        let want = if t % 2 == 0 { LABEL_R } else { LABEL_S };
        let p = mol.chirality_products()[0];
        let have = label_of(assign_configuration(p, DEFAULT_DEGENERACY_TOL)).expect("|P| above threshold");
        let mol = if have == want { mol } else { mirror(&mol) };
        out.push(LabeledMolecule { mol, label: want });
    }
    Ok(out)
}

/// Tetrahedral centers with four distinct substituent elements in ascending
/// priority and exact R/S labels from the chirality product. Even indices are
/// R, odd are S (a sample is mirrored when needed), so even counts are exactly
/// balanced.
pub fn gen_rs(spec: &SyntheticSpec) -> Result<Vec<LabeledMolecule>> {
    balanced(spec, "rs", |rng, id| sample_center(rng, spec, id))
}

/// Atoms of the biaryl-like toy: axis atoms 0 and 1, ortho atoms 2 and 3 on
/// the first ring, 4 and 5 on the second, para atoms 6 and 7.
pub const TOY_ELEMENTS: [u8; 8] = [6, 6, 17, 1, 35, 1, 6, 6];
/// Torsion of the toy's second ring at conformer 0.
pub const TOY_PHASE_DEG: f64 = 10.0;
const AXIS_HALF: f64 = 0.745;

/// Biaryl-like toy with the second ring twisted by `torsion` radians. The
/// chirality product is proportional to `−sin(torsion)`.
pub fn biaryl(id: &str, torsion: f64, elements: [u8; 8]) -> Molecule {
    let (s, c) = torsion.sin_cos();
    let a = [-AXIS_HALF, 0.0, 0.0];
    let b = [AXIS_HALF, 0.0, 0.0];
    let coords = vec![
        a,
        b,
        [a[0] - 0.7, 1.2, 0.0],
        [a[0] - 0.7, -1.2, 0.0],
        [b[0] + 0.7, 1.2 * c, 1.2 * s],
        [b[0] + 0.7, -1.2 * c, -1.2 * s],
        [a[0] - 2.8, 0.0, 0.0],
        [b[0] + 2.8, 0.0, 0.0],
    ];
    let zs = elements.to_vec();
    let features = featurize(&zs);
    Molecule::new(id, coords, zs, features, vec![ChiralUnit::axis(0, 1, [2, 3, 4, 5])])
        .and_then(|m| m.with_blade(vec![1, 4, 5, 7]))
        .expect("toy geometry is valid")
}

/// The torsion-sweep base molecule.
pub fn axial_toy() -> Molecule {
    biaryl("biaryl", TOY_PHASE_DEG.to_radians(), TOY_ELEMENTS)
}

fn sample_axial<R: Rng>(rng: &mut R, spec: &SyntheticSpec, id: &str) -> Result<Option<Molecule>> {
    let torsion = rng.gen_range(0.0..std::f64::consts::TAU);
    let heavy = [9u8, 17, 35, 53, 6, 7, 8];
    let mut elements = TOY_ELEMENTS;
    elements[2] = *heavy.choose(rng).unwrap();
    elements[4] = *heavy.choose(rng).unwrap();
    let base = biaryl(id, torsion, elements);
    let mut coords: Vec<Vec3> = base.coords().iter().map(|&p| jitter(rng, p, POSITION_NOISE)).collect();
    let mut zs = elements.to_vec();
    let extra = rng.gen_range(spec.spectators.clone());
    if !place_spectators(rng, &mut coords, &mut zs, extra, 6.0) {
        return Ok(None);
    }
    rotate_all(&mut coords, &random_rotation(rng));
    let features = featurize(&zs);
    Molecule::new(id, coords, zs, features, base.chiral_units().to_vec()).map(Some)
}

/// Axially chiral toys at random torsions, labeled by the sign of the axial
/// chirality product (class 0 positive, class 1 negative), balanced like
/// [`gen_rs`].
pub fn gen_axial(spec: &SyntheticSpec) -> Result<Vec<LabeledMolecule>> {
    balanced(spec, "ax", |rng, id| sample_axial(rng, spec, id))
}

fn rotate_about(p: Vec3, origin: Vec3, u: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let v = sub3(p, origin);
    let dot = v[0] * u[0] + v[1] * u[1] + v[2] * u[2];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    [0, 1, 2].map(|i| origin[i] + v[i] * c + cross[i] * s + u[i] * dot * (1.0 - c))
}

/// Conformers obtained by rotating the molecule's blade about its stereogenic
/// axis in steps of `step_deg` degrees. Conformer 0 is the base itself.
pub fn gen_axial_torsion(base: &Molecule, step_deg: f64) -> Result<Vec<Molecule>> {
    let axes: Vec<&ChiralUnit> = base.chiral_units().iter().filter(|u| u.center.is_axis()).collect();
    let [unit] = axes.as_slice() else {
        return Err(Error::Annotation(format!(
            "torsion sweep needs exactly one axis unit, found {}",
            axes.len()
        )));
    };
    let Stereocenter::Axis(a, b) = unit.center else { unreachable!() };
    let count = 360.0 / step_deg;
    if !(step_deg > 0.0) || (count - count.round()).abs() > 1e-9 {
        return Err(Error::Argument(format!("step {step_deg}° does not divide 360°")));
    }
    let blade = base
        .blade()
        .ok_or_else(|| Error::Annotation("no BLADE annotation".into()))?;
    let coords = base.coords();
    let axis = sub3(coords[b], coords[a]);
    let len = norm3(axis);
    let u = axis.map(|v| v / len);
    let mid = [0, 1, 2].map(|i| 0.5 * (coords[a][i] + coords[b][i]));
    let side = |i: usize| {
        let d = sub3(coords[i], mid);
        let t = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
        if t > 1e-9 * len {
            1
        } else if t < -1e-9 * len {
            -1
        } else {
            0
        }
    };
    let sides: Vec<i32> = blade.iter().map(|&i| side(i)).collect();
    if sides.contains(&1) && sides.contains(&-1) {
        return Err(Error::Annotation(
            "blade contains atoms on both sides of the axis".into(),
        ));
    }
    let n = count.round() as usize;
    let mut out = Vec::with_capacity(n);
    out.push(base.clone());
    for k in 1..n {
        let angle = (k as f64 * step_deg).to_radians();
        let mut next = coords.to_vec();
        for &i in blade {
            next[i] = rotate_about(coords[i], mid, u, angle);
        }
        let deg = k as f64 * step_deg;
        out.push(base.with_coords(next)?.with_id(format!("{}_{deg}", base.id())));
    }
    Ok(out)
}

/// The smallest R center: product exactly +1.
pub fn canonical_center() -> Molecule {
    let zs = vec![6, 1, 9, 17, 35];
    let coords = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [-0.5, -0.5, -0.5],
        [-0.5, -0.5, 0.5],
    ];
    let features = featurize(&zs);
    Molecule::new("canonical", coords, zs, features, vec![ChiralUnit::center(0, [1, 2, 3, 4])])
        .expect("canonical geometry is valid")
}

/// Products of the first chiral unit over a conformer sequence.
pub fn first_unit_products(conformers: &[Molecule]) -> Vec<f64> {
    conformers
        .iter()
        .map(|m| chirality_product(&chirality_matrix(&m.chiral_units()[0], m.coords())))
        .collect()
}

/// Number of maximal runs of equal sign, treating the sequence as circular.
pub fn circular_sign_runs(values: &[f64]) -> Vec<(bool, usize)> {
    let signs: Vec<bool> = values.iter().map(|&v| v > 0.0).collect();
    let n = signs.len();
    if n == 0 {
        return vec![];
    }
    let Some(start) = (0..n).find(|&i| signs[i] != signs[(i + n - 1) % n]) else {
        return vec![(signs[0], n)];
    };
    let mut runs: Vec<(bool, usize)> = Vec::new();
    for k in 0..n {
        let s = signs[(start + k) % n];
        match runs.last_mut() {
            Some((last, len)) if *last == s => *len += 1,
            _ => runs.push((s, 1)),
        }
    }
    runs
}
