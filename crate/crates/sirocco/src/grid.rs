//! Dense (region, day) lattice storage.
//!
//! Everything that lives on the space-time lattice (fields, latent counts,
//! surveillance series) uses region-major order: cell (r, d) sits at flat
//! index `r * n_days + d`. This is the same ordering the Kronecker precision
//! constructor uses, so a flattened grid can be handed to GMRF routines
//! directly.

/// Rectangular lattice of values over regions and days.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    n_regions: usize,
    n_days: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn zeros(n_regions: usize, n_days: usize) -> Self {
        Grid {
            n_regions,
            n_days,
            data: vec![T::default(); n_regions * n_days],
        }
    }
}

impl<T: Copy> Grid<T> {
    pub fn filled(n_regions: usize, n_days: usize, value: T) -> Self {
        Grid {
            n_regions,
            n_days,
            data: vec![value; n_regions * n_days],
        }
    }

    /// Wraps an existing region-major buffer. Panics if the length is not
    /// `n_regions * n_days`.
    pub fn from_flat(n_regions: usize, n_days: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n_regions * n_days, "grid buffer length mismatch");
        Grid {
            n_regions,
            n_days,
            data,
        }
    }

    #[inline]
    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    #[inline]
    pub fn n_days(&self) -> usize {
        self.n_days
    }

    #[inline]
    pub fn flat_index(&self, region: usize, day: usize) -> usize {
        debug_assert!(region < self.n_regions && day < self.n_days);
        region * self.n_days + day
    }

    #[inline]
    pub fn get(&self, region: usize, day: usize) -> T {
        self.data[self.flat_index(region, day)]
    }

    #[inline]
    pub fn set(&mut self, region: usize, day: usize, value: T) {
        let idx = self.flat_index(region, day);
        self.data[idx] = value;
    }

    /// All days for one region, in day order.
    #[inline]
    pub fn row(&self, region: usize) -> &[T] {
        &self.data[region * self.n_days..(region + 1) * self.n_days]
    }

    #[inline]
    pub fn row_mut(&mut self, region: usize) -> &mut [T] {
        &mut self.data[region * self.n_days..(region + 1) * self.n_days]
    }

    #[inline]
    pub fn flat(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            n_regions: self.n_regions,
            n_days: self.n_days,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Grid<i64> {
    /// Column sum over a subset of regions for one day.
    pub fn sum_over(&self, regions: &[usize], day: usize) -> i64 {
        regions.iter().map(|&r| self.get(r, day)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_major_layout() {
        let mut g = Grid::<i64>::zeros(3, 4);
        g.set(1, 2, 7);
        assert_eq!(g.flat()[1 * 4 + 2], 7);
        assert_eq!(g.row(1), &[0, 0, 7, 0]);
        assert_eq!(g.flat_index(2, 3), 11);
    }

    #[test]
    #[should_panic(expected = "grid buffer length mismatch")]
    fn from_flat_rejects_bad_length() {
        let _ = Grid::from_flat(2, 3, vec![0i64; 5]);
    }
}
