//! Dense two-phase tableau simplex over exact scalars, with Bland's rule.
//!
//! Arithmetic goes through [`Exact`], whose operations may report overflow;
//! callers run the fixed-width scalar first and retry with big rationals.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub, Signed, Zero};

/// Exact field element with fallible arithmetic.
pub trait Exact: Clone + PartialOrd + Debug {
    fn zero() -> Self;
    fn from_i128(v: i128) -> Self;
    fn add(&self, o: &Self) -> Option<Self>;
    fn sub(&self, o: &Self) -> Option<Self>;
    fn mul(&self, o: &Self) -> Option<Self>;
    fn div(&self, o: &Self) -> Option<Self>;
    fn is_zero(&self) -> bool;
    fn is_positive(&self) -> bool;
    fn is_negative(&self) -> bool;
    fn to_big(&self) -> BigRational;
}

impl Exact for Ratio<i128> {
    fn zero() -> Self {
        Zero::zero()
    }
    fn from_i128(v: i128) -> Self {
        Ratio::from_integer(v)
    }
    fn add(&self, o: &Self) -> Option<Self> {
        self.checked_add(o)
    }
    fn sub(&self, o: &Self) -> Option<Self> {
        self.checked_sub(o)
    }
    fn mul(&self, o: &Self) -> Option<Self> {
        self.checked_mul(o)
    }
    fn div(&self, o: &Self) -> Option<Self> {
        self.checked_div(o)
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn is_positive(&self) -> bool {
        Signed::is_positive(self)
    }
    fn is_negative(&self) -> bool {
        Signed::is_negative(self)
    }
    fn to_big(&self) -> BigRational {
        BigRational::new(BigInt::from(*self.numer()), BigInt::from(*self.denom()))
    }
}

impl Exact for BigRational {
    fn zero() -> Self {
        Zero::zero()
    }
    fn from_i128(v: i128) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }
    fn add(&self, o: &Self) -> Option<Self> {
        Some(self + o)
    }
    fn sub(&self, o: &Self) -> Option<Self> {
        Some(self - o)
    }
    fn mul(&self, o: &Self) -> Option<Self> {
        Some(self * o)
    }
    fn div(&self, o: &Self) -> Option<Self> {
        if Zero::is_zero(o) {
            None
        } else {
            Some(self / o)
        }
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn is_positive(&self) -> bool {
        Signed::is_positive(self)
    }
    fn is_negative(&self) -> bool {
        Signed::is_negative(self)
    }
    fn to_big(&self) -> BigRational {
        self.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

/// `coefs . x  (relation)  rhs`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    pub coefs: Vec<i128>,
    pub relation: Relation,
    pub rhs: i128,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome<T> {
    Optimal { x: Vec<T>, objective: T },
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overflow;

/// Minimizes `cost . x` subject to `rows` and `x >= 0`.
pub fn minimize<T: Exact>(cost: &[i128], rows: &[Row]) -> Result<LpOutcome<T>, Overflow> {
    Tableau::<T>::build(cost, rows)?.solve(cost)
}

/// Tries `Ratio<i128>` first and falls back to big rationals on overflow.
pub fn minimize_exact(cost: &[i128], rows: &[Row]) -> LpOutcome<BigRational> {
    match minimize::<Ratio<i128>>(cost, rows) {
        Ok(LpOutcome::Optimal { x, objective }) => LpOutcome::Optimal {
            x: x.iter().map(Exact::to_big).collect(),
            objective: objective.to_big(),
        },
        Ok(LpOutcome::Infeasible) => LpOutcome::Infeasible,
        Ok(LpOutcome::Unbounded) => LpOutcome::Unbounded,
        Err(Overflow) => minimize::<BigRational>(cost, rows).expect("big rationals never overflow"),
    }
}

struct Tableau<T> {
    /// `rows x (cols + 1)`, last column is the right-hand side.
    cells: Vec<Vec<T>>,
    basis: Vec<usize>,
    n_struct: usize,
    n_cols: usize,
    artificial_start: usize,
}

fn op<T>(v: Option<T>) -> Result<T, Overflow> {
    v.ok_or(Overflow)
}

impl<T: Exact> Tableau<T> {
    fn build(cost: &[i128], rows: &[Row]) -> Result<Self, Overflow> {
        let n = cost.len();
        // normalize to non-negative right-hand sides
        let norm: Vec<Row> = rows
            .iter()
            .map(|r| {
                if r.rhs < 0 {
                    Row {
                        coefs: r.coefs.iter().map(|c| -c).collect(),
                        relation: match r.relation {
                            Relation::Le => Relation::Ge,
                            Relation::Ge => Relation::Le,
                            Relation::Eq => Relation::Eq,
                        },
                        rhs: -r.rhs,
                    }
                } else {
                    r.clone()
                }
            })
            .collect();
        let n_slack = norm.iter().filter(|r| r.relation != Relation::Eq).count();
        let n_art = norm.iter().filter(|r| r.relation != Relation::Le).count();
        let artificial_start = n + n_slack;
        let n_cols = artificial_start + n_art;
        let mut cells = Vec::with_capacity(norm.len());
        let mut basis = Vec::with_capacity(norm.len());
        let (mut slack, mut art) = (n, artificial_start);
        for r in &norm {
            let mut row = vec![T::zero(); n_cols + 1];
            for (j, &c) in r.coefs.iter().enumerate() {
                row[j] = T::from_i128(c);
            }
            row[n_cols] = T::from_i128(r.rhs);
            match r.relation {
                Relation::Le => {
                    row[slack] = T::from_i128(1);
                    basis.push(slack);
                    slack += 1;
                }
                Relation::Ge => {
                    row[slack] = T::from_i128(-1);
                    slack += 1;
                    row[art] = T::from_i128(1);
                    basis.push(art);
                    art += 1;
                }
                Relation::Eq => {
                    row[art] = T::from_i128(1);
                    basis.push(art);
                    art += 1;
                }
            }
            cells.push(row);
        }
        Ok(Tableau { cells, basis, n_struct: n, n_cols, artificial_start })
    }

    fn pivot(&mut self, obj: &mut [T], r: usize, c: usize) -> Result<(), Overflow> {
        let p = self.cells[r][c].clone();
        for v in self.cells[r].iter_mut() {
            if !v.is_zero() {
                *v = op(v.div(&p))?;
            }
        }
        let pivot_row = self.cells[r].clone();
        for (i, row) in self.cells.iter_mut().enumerate() {
            if i == r || row[c].is_zero() {
                continue;
            }
            let factor = row[c].clone();
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                if !pv.is_zero() {
                    *v = op(v.sub(&op(factor.mul(pv))?))?;
                }
            }
        }
        if !obj[c].is_zero() {
            let factor = obj[c].clone();
            for (v, pv) in obj.iter_mut().zip(&pivot_row) {
                if !pv.is_zero() {
                    *v = op(v.sub(&op(factor.mul(pv))?))?;
                }
            }
        }
        self.basis[r] = c;
        Ok(())
    }

    /// Runs simplex iterations on reduced-cost row `obj` (minimization),
    /// considering only columns below `col_limit`.
    fn iterate(&mut self, obj: &mut [T], col_limit: usize) -> Result<bool, Overflow> {
        loop {
            // Bland: lowest-index column with negative reduced cost
            let Some(c) = (0..col_limit).find(|&j| obj[j].is_negative()) else {
                return Ok(true);
            };
            let rhs = self.n_cols;
            let mut best: Option<(usize, T)> = None;
            for (i, row) in self.cells.iter().enumerate() {
                if !row[c].is_positive() {
                    continue;
                }
                let ratio = op(row[rhs].div(&row[c]))?;
                let better = match &best {
                    None => true,
                    Some((bi, br)) => {
                        ratio < *br || (ratio == *br && self.basis[i] < self.basis[*bi])
                    }
                };
                if better {
                    best = Some((i, ratio));
                }
            }
            match best {
                Some((r, _)) => self.pivot(obj, r, c)?,
                None => return Ok(false),
            }
        }
    }

    fn solve(mut self, cost: &[i128]) -> Result<LpOutcome<T>, Overflow> {
        let rhs = self.n_cols;
        if self.artificial_start < self.n_cols {
            // phase one: minimize the sum of artificials
            let mut obj = vec![T::zero(); self.n_cols + 1];
            for v in obj.iter_mut().take(self.n_cols).skip(self.artificial_start) {
                *v = T::from_i128(1);
            }
            for (i, &b) in self.basis.iter().enumerate() {
                if b >= self.artificial_start {
                    for (o, v) in obj.iter_mut().zip(&self.cells[i]) {
                        *o = op(o.sub(v))?;
                    }
                }
            }
            self.iterate(&mut obj, self.n_cols)?;
            // obj[rhs] holds minus the phase-one objective
            if !obj[rhs].is_zero() {
                return Ok(LpOutcome::Infeasible);
            }
            // drive remaining artificials out of the basis
            let mut r = 0;
            while r < self.cells.len() {
                if self.basis[r] >= self.artificial_start {
                    match (0..self.artificial_start).find(|&j| !self.cells[r][j].is_zero()) {
                        Some(c) => {
                            let mut scratch = vec![T::zero(); self.n_cols + 1];
                            self.pivot(&mut scratch, r, c)?;
                        }
                        None => {
                            // redundant constraint
                            self.cells.remove(r);
                            self.basis.remove(r);
                            continue;
                        }
                    }
                }
                r += 1;
            }
        }

        let mut obj = vec![T::zero(); self.n_cols + 1];
        for (j, &c) in cost.iter().enumerate() {
            obj[j] = T::from_i128(c);
        }
        for i in 0..self.cells.len() {
            let b = self.basis[i];
            if obj[b].is_zero() {
                continue;
            }
            let factor = obj[b].clone();
            for (o, v) in obj.iter_mut().zip(&self.cells[i]) {
                *o = op(o.sub(&op(factor.mul(v))?))?;
            }
        }
        if !self.iterate(&mut obj, self.artificial_start)? {
            return Ok(LpOutcome::Unbounded);
        }
        let mut x = vec![T::zero(); self.n_struct];
        for (i, &b) in self.basis.iter().enumerate() {
            if b < self.n_struct {
                x[b] = self.cells[i][rhs].clone();
            }
        }
        let mut objective = T::zero();
        for (xj, &c) in x.iter().zip(cost) {
            objective = op(objective.add(&op(xj.mul(&T::from_i128(c)))?))?;
        }
        Ok(LpOutcome::Optimal { x, objective })
    }
}
