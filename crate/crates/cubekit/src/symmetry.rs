//! The finite rotation groups that act exactly on a cubic voxel lattice.
//!
//! Every element is a 3×3 signed permutation matrix with determinant +1, so
//! all group arithmetic here is exact integer arithmetic. Groups are built by
//! filtering or closing over the 48 signed permutation matrices rather than
//! from hand-coded tables; the Cayley table, inverse table, and permutation
//! representation are derived artifacts that the axiom checker can audit.
//!
//! Canonical enumeration: the identity is always index 0 and the remaining
//! elements are sorted lexicographically by their flattened matrix entries.
//! This makes every derived table reproducible bit for bit.

use std::fmt;

use serde::{Deserialize, Serialize};

/// 3×3 integer matrix, row-major. Entries of valid rotations are in {-1, 0, +1}.
pub type Mat3 = [[i32; 3]; 3];

/// The identity matrix.
pub const IDENTITY: Mat3 = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];

/// Lattice axes, named for the spatial storage order `[D][H][W]`:
/// `Z` is the depth axis (component 0), `Y` height (1), `X` width (2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    fn component(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j][i] = v;
        }
    }
    out
}

pub fn mat_det(m: &Mat3) -> i32 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// True iff `m` has exactly one entry of ±1 per row and per column and zeros
/// elsewhere.
pub fn is_signed_permutation(m: &Mat3) -> bool {
    let mut col_nonzero = [0usize; 3];
    for row in m {
        let mut row_nonzero = 0;
        for (j, &v) in row.iter().enumerate() {
            match v {
                0 => {}
                1 | -1 => {
                    row_nonzero += 1;
                    col_nonzero[j] += 1;
                }
                _ => return false,
            }
        }
        if row_nonzero != 1 {
            return false;
        }
    }
    col_nonzero == [1, 1, 1]
}

/// The rotation by `turns` quarter turns about `axis` (right-handed in the
/// plane of the two remaining components).
pub fn quarter_turn(axis: Axis, turns: u32) -> Mat3 {
    let a = axis.component();
    // The two rotated components in cyclic order after the fixed one.
    let b = (a + 1) % 3;
    let c = (a + 2) % 3;
    let mut m = [[0; 3]; 3];
    m[a][a] = 1;
    match turns % 4 {
        0 => {
            m[b][b] = 1;
            m[c][c] = 1;
        }
        1 => {
            m[b][c] = -1;
            m[c][b] = 1;
        }
        2 => {
            m[b][b] = -1;
            m[c][c] = -1;
        }
        3 => {
            m[b][c] = 1;
            m[c][b] = -1;
        }
        _ => unreachable!(),
    }
    m
}

/// One right-angle 3D rotation: an integer signed-permutation matrix with
/// determinant +1, tagged with its ordinal position in its group's canonical
/// enumeration.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RotationElement {
    matrix: Mat3,
    index: usize,
}

impl RotationElement {
    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// The inverse rotation's matrix. For signed permutations this is the
    /// transpose.
    pub fn inverse_matrix(&self) -> Mat3 {
        mat_transpose(&self.matrix)
    }

    /// Apply the rotation to an integer lattice vector.
    pub fn apply(&self, v: [i64; 3]) -> [i64; 3] {
        apply_mat(&self.matrix, v)
    }
}

pub fn apply_mat(m: &Mat3, v: [i64; 3]) -> [i64; 3] {
    let mut out = [0i64; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = (0..3).map(|k| i64::from(row[k]) * v[k]).sum();
    }
    out
}

impl fmt::Debug for RotationElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}{:?}", self.index, self.matrix)
    }
}

/// Which of the three supported rotation groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    /// Klein four-group: identity plus the three 180° axis rotations.
    V,
    /// Rotational tetrahedral group: the twelve even rotations.
    T4,
    /// Full cube group: all 24 right-angle rotations.
    S4,
}

impl GroupKind {
    pub fn order(self) -> usize {
        match self {
            GroupKind::V => 4,
            GroupKind::T4 => 12,
            GroupKind::S4 => 24,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::V => "V",
            GroupKind::T4 => "T4",
            GroupKind::S4 => "S4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "V" | "v" => Some(GroupKind::V),
            "T4" | "t4" => Some(GroupKind::T4),
            "S4" | "s4" => Some(GroupKind::S4),
            _ => None,
        }
    }

    pub fn all() -> [GroupKind; 3] {
        [GroupKind::V, GroupKind::T4, GroupKind::S4]
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pass/fail result of checking the four group axioms against a group's
/// element list and Cayley table. Failures are report entries, not errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AxiomReport {
    /// Every matrix product of two elements is itself an element, and the
    /// Cayley table agrees with the matrix product.
    pub closure: bool,
    /// `(ab)c = a(bc)` for every triple, checked exhaustively on the table.
    pub associativity: bool,
    /// Element 0 is the identity matrix and acts as a two-sided identity.
    pub identity: bool,
    /// Every element has a two-sided inverse matching the inverse table.
    pub invertibility: bool,
}

impl AxiomReport {
    pub fn all_pass(&self) -> bool {
        self.closure && self.associativity && self.identity && self.invertibility
    }
}

/// A finite rotation group in canonical enumeration with derived tables.
///
/// Immutable after construction; safe to share across threads.
#[derive(Clone, Debug)]
pub struct FiniteRotationGroup {
    kind: GroupKind,
    elements: Vec<RotationElement>,
    cayley: Vec<Vec<usize>>,
    inverses: Vec<usize>,
}

impl FiniteRotationGroup {
    /// Build the group of the given kind.
    ///
    /// `S4` is every signed permutation matrix with determinant +1, `V` the
    /// diagonal subset of those, and `T4` the closure of all products of two
    /// quarter-turn axis rotations.
    pub fn generate(kind: GroupKind) -> Self {
        let matrices = match kind {
            GroupKind::S4 => proper_rotations(),
            GroupKind::V => proper_rotations()
                .into_iter()
                .filter(is_diagonal)
                .collect(),
            GroupKind::T4 => tetrahedral_matrices(),
        };
        let group = Self::from_matrices(kind, matrices);
        assert_eq!(group.order(), kind.order(), "wrong order for {kind}");
        group
    }

    fn from_matrices(kind: GroupKind, mut matrices: Vec<Mat3>) -> Self {
        for m in &matrices {
            assert!(is_signed_permutation(m) && mat_det(m) == 1);
        }
        matrices.sort_by_key(|m| (*m != IDENTITY, *m));
        matrices.dedup();
        assert_eq!(matrices[0], IDENTITY);

        let index_of = |m: &Mat3| -> usize {
            matrices
                .iter()
                .position(|e| e == m)
                .expect("set not closed under composition")
        };
        let n = matrices.len();
        let cayley: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| index_of(&mat_mul(&matrices[i], &matrices[j])))
                    .collect()
            })
            .collect();
        let inverses: Vec<usize> = matrices.iter().map(|m| index_of(&mat_transpose(m))).collect();

        let elements = matrices
            .into_iter()
            .enumerate()
            .map(|(index, matrix)| RotationElement { matrix, index })
            .collect();
        FiniteRotationGroup {
            kind,
            elements,
            cayley,
            inverses,
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[RotationElement] {
        &self.elements
    }

    pub fn element(&self, index: usize) -> &RotationElement {
        &self.elements[index]
    }

    /// Always 0 under the canonical enumeration.
    pub fn identity_index(&self) -> usize {
        0
    }

    /// Index of the element whose matrix equals `matrix(a) · matrix(b)`,
    /// i.e. "apply `b` first, then `a`" on column vectors.
    ///
    /// Panics if `a` or `b` is out of range.
    pub fn compose(&self, a: usize, b: usize) -> usize {
        self.cayley[a][b]
    }

    /// Index of the element inverting `a`. Panics if `a` is out of range.
    pub fn inverse(&self, a: usize) -> usize {
        self.inverses[a]
    }

    /// Position of a matrix in the canonical enumeration, if present.
    pub fn index_of(&self, m: &Mat3) -> Option<usize> {
        self.elements.iter().position(|e| e.matrix == *m)
    }

    /// The left-regular permutation matrix `P_p`: `P_p[i][j] = 1` iff
    /// `elements[i] = p · elements[j]`. Applying it to a `|G|`-vector indexed
    /// by group elements realizes the re-indexing `g ↦ p·g`.
    ///
    /// Panics if `p` is out of range.
    pub fn permutation_matrix(&self, p: usize) -> Vec<Vec<u8>> {
        let n = self.order();
        let mut mat = vec![vec![0u8; n]; n];
        for j in 0..n {
            mat[self.compose(p, j)][j] = 1;
        }
        mat
    }

    /// Check the four group axioms against the element list and tables.
    pub fn verify_axioms(&self) -> AxiomReport {
        let n = self.order();

        let mut closure = true;
        for i in 0..n {
            for j in 0..n {
                let idx = self.cayley[i][j];
                if idx >= n {
                    closure = false;
                    continue;
                }
                let product = mat_mul(&self.elements[i].matrix, &self.elements[j].matrix);
                if self.index_of(&product) != Some(idx) {
                    closure = false;
                }
            }
        }

        let mut associativity = true;
        for a in 0..n {
            for b in 0..n {
                let ab = self.cayley[a][b];
                for c in 0..n {
                    if self.cayley[ab][c] != self.cayley[a][self.cayley[b][c]] {
                        associativity = false;
                    }
                }
            }
        }

        let mut identity = self.elements[0].matrix == IDENTITY;
        for g in 0..n {
            if self.cayley[0][g] != g || self.cayley[g][0] != g {
                identity = false;
            }
        }

        let mut invertibility = true;
        for g in 0..n {
            let inv = self.inverses[g];
            if inv >= n || self.cayley[inv][g] != 0 || self.cayley[g][inv] != 0 {
                invertibility = false;
            }
        }

        AxiomReport {
            closure,
            associativity,
            identity,
            invertibility,
        }
    }

    /// True iff every matrix of `self` appears in `sup` and `self`'s elements
    /// are closed under `sup`'s composition.
    pub fn is_subgroup_of(&self, sup: &FiniteRotationGroup) -> bool {
        let mapped: Option<Vec<usize>> = self
            .elements
            .iter()
            .map(|e| sup.index_of(&e.matrix))
            .collect();
        let Some(mapped) = mapped else {
            return false;
        };
        for &a in &mapped {
            for &b in &mapped {
                if !mapped.contains(&sup.compose(a, b)) {
                    return false;
                }
            }
        }
        true
    }

    /// True iff `ab = ba` for every pair of elements.
    pub fn is_commutative(&self) -> bool {
        let n = self.order();
        (0..n).all(|a| (0..n).all(|b| self.cayley[a][b] == self.cayley[b][a]))
    }

    /// Cayley table as CSV: row = left operand, column = right operand,
    /// cell = element index. No header; one row per line, `\n` terminated.
    pub fn cayley_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.cayley {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn corrupt_cayley_entry(&mut self, i: usize, j: usize, value: usize) {
        self.cayley[i][j] = value;
    }
}

/// All 24 signed permutation matrices with determinant +1.
fn proper_rotations() -> Vec<Mat3> {
    let mut out = Vec::with_capacity(24);
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    for perm in perms {
        for signs in 0..8u32 {
            let mut m = [[0; 3]; 3];
            for (row, &col) in perm.iter().enumerate() {
                m[row][col] = if signs & (1 << row) == 0 { 1 } else { -1 };
            }
            if mat_det(&m) == 1 {
                out.push(m);
            }
        }
    }
    out
}

fn is_diagonal(m: &Mat3) -> bool {
    (0..3).all(|i| (0..3).all(|j| i == j || m[i][j] == 0))
}

/// T4 as the closure of all products of two quarter-turn axis rotations.
fn tetrahedral_matrices() -> Vec<Mat3> {
    let quarters: Vec<Mat3> = [Axis::Z, Axis::Y, Axis::X]
        .into_iter()
        .flat_map(|axis| [quarter_turn(axis, 1), quarter_turn(axis, 3)])
        .collect();
    let mut set: Vec<Mat3> = Vec::new();
    for a in &quarters {
        for b in &quarters {
            let m = mat_mul(a, b);
            if !set.contains(&m) {
                set.push(m);
            }
        }
    }
    // Close under multiplication until a fixed point.
    loop {
        let mut grew = false;
        for i in 0..set.len() {
            for j in 0..set.len() {
                let m = mat_mul(&set[i], &set[j]);
                if !set.contains(&m) {
                    set.push(m);
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }
    assert_eq!(set.len(), 12, "even-rotation closure must have order 12");
    set
}
