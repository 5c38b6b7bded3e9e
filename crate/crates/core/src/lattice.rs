//! The discrete torus `T_N^d` and two-species configurations on it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rates::Counts;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("invalid lattice: {0}")]
    Invalid(String),
    #[error("block window 2·{ell}+1 exceeds lattice side {n}")]
    WindowTooLarge { ell: u32, n: u32 },
}

/// `T_N^d = {0, …, N−1}^d`, sites numbered row-major (last coordinate fastest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Torus {
    n: u32,
    d: u32,
    sites: usize,
}

impl Torus {
    pub fn new(n: u32, d: u32) -> Result<Self, LatticeError> {
        if n == 0 || d == 0 {
            return Err(LatticeError::Invalid(format!("side and dimension must be positive (N={n}, d={d})")));
        }
        let sites = (n as u128).checked_pow(d).filter(|s| *s <= u32::MAX as u128).ok_or_else(|| {
            LatticeError::Invalid(format!("N^d too large (N={n}, d={d})"))
        })? as usize;
        Ok(Self { n, d, sites })
    }

    pub fn side(&self) -> u32 {
        self.n
    }

    pub fn dim(&self) -> u32 {
        self.d
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn coords(&self, x: usize) -> Vec<u32> {
        let mut c = vec![0; self.d as usize];
        let mut r = x;
        for j in (0..self.d as usize).rev() {
            c[j] = (r % self.n as usize) as u32;
            r /= self.n as usize;
        }
        c
    }

    pub fn index(&self, coords: &[u32]) -> usize {
        coords.iter().fold(0usize, |acc, &c| acc * self.n as usize + (c % self.n) as usize)
    }

    /// Stride of coordinate `j` in the row-major numbering.
    fn stride(&self, j: usize) -> usize {
        (self.n as usize).pow(self.d - 1 - j as u32)
    }

    /// The `2d` nearest-neighbour targets `x ± e_j` (with repetitions when
    /// `N ≤ 2`, matching the projected kernel `p_N`).
    pub fn neighbours(&self, x: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * self.d as usize);
        self.for_each_neighbour(x, |y| out.push(y));
        out
    }

    #[inline]
    pub fn for_each_neighbour<F: FnMut(usize)>(&self, x: usize, mut f: F) {
        let n = self.n as usize;
        for j in 0..self.d as usize {
            let stride = self.stride(j);
            let c = (x / stride) % n;
            let base = x - c * stride;
            f(base + ((c + 1) % n) * stride);
            f(base + ((c + n - 1) % n) * stride);
        }
    }

    /// Target of the `k`-th neighbour move (`k < 2d`): `k = 2j` is `+e_j`,
    /// `k = 2j+1` is `−e_j`.
    #[inline]
    pub fn neighbour(&self, x: usize, k: usize) -> usize {
        let n = self.n as usize;
        let j = k / 2;
        let stride = self.stride(j);
        let c = (x / stride) % n;
        let base = x - c * stride;
        if k % 2 == 0 {
            base + ((c + 1) % n) * stride
        } else {
            base + ((c + n - 1) % n) * stride
        }
    }

    /// `x/N ∈ [0,1)^d`.
    pub fn macro_point(&self, x: usize) -> Vec<f64> {
        self.coords(x).iter().map(|&c| f64::from(c) / f64::from(self.n)).collect()
    }
}

/// Occupation pairs `η(x)` on a torus with cached per-species totals.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeConfiguration {
    torus: Torus,
    eta: Vec<Counts>,
    totals: [u64; 2],
}

impl LatticeConfiguration {
    pub fn empty(torus: Torus) -> Self {
        Self {
            torus,
            eta: vec![[0, 0]; torus.sites()],
            totals: [0, 0],
        }
    }

    pub fn from_occupations(torus: Torus, eta: Vec<Counts>) -> Result<Self, LatticeError> {
        if eta.len() != torus.sites() {
            return Err(LatticeError::Invalid(format!(
                "{} occupations given for {} sites",
                eta.len(),
                torus.sites()
            )));
        }
        let totals = totals_of(&eta);
        Ok(Self { torus, eta, totals })
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn occupations(&self) -> &[Counts] {
        &self.eta
    }

    #[inline]
    pub fn get(&self, x: usize) -> Counts {
        self.eta[x]
    }

    pub fn totals(&self) -> [u64; 2] {
        self.totals
    }

    /// Moves one particle of `species` from `x` to `y`; a no-op if `x` holds none.
    #[inline]
    pub fn move_particle(&mut self, species: usize, x: usize, y: usize) {
        if self.eta[x][species] == 0 {
            return;
        }
        self.eta[x][species] -= 1;
        self.eta[y][species] += 1;
    }

    /// Recomputes the totals from the occupations.
    pub fn recount(&self) -> [u64; 2] {
        totals_of(&self.eta)
    }

    /// `η^ℓ(x)`: the average over the periodic cube of radius `ℓ` around `x`.
    pub fn block_average(&self, ell: u32, x: usize) -> Result<[f64; 2], LatticeError> {
        let n = self.torus.side();
        if 2 * u64::from(ell) + 1 > u64::from(n) {
            return Err(LatticeError::WindowTooLarge { ell, n });
        }
        let d = self.torus.dim() as usize;
        let c = self.torus.coords(x);
        let width = 2 * ell + 1;
        let count = (width as usize).pow(d as u32);
        let mut sum = [0u64; 2];
        let mut offs = vec![0u32; d];
        let mut pos = vec![0u32; d];
        for _ in 0..count {
            for j in 0..d {
                pos[j] = (c[j] + n - ell + offs[j]) % n;
            }
            let k = self.eta[self.torus.index(&pos)];
            sum[0] += u64::from(k[0]);
            sum[1] += u64::from(k[1]);
            for j in (0..d).rev() {
                offs[j] += 1;
                if offs[j] < width {
                    break;
                }
                offs[j] = 0;
            }
        }
        Ok([sum[0] as f64 / count as f64, sum[1] as f64 / count as f64])
    }

    /// Block averages at every site, by separable running sums along each axis.
    pub fn empirical_density_field(&self, ell: u32) -> Result<[Vec<f64>; 2], LatticeError> {
        let n = self.torus.side() as usize;
        if 2 * ell as usize + 1 > n {
            return Err(LatticeError::WindowTooLarge {
                ell,
                n: self.torus.side(),
            });
        }
        let sites = self.torus.sites();
        let mut fields = [
            self.eta.iter().map(|k| f64::from(k[0])).collect::<Vec<f64>>(),
            self.eta.iter().map(|k| f64::from(k[1])).collect::<Vec<f64>>(),
        ];
        let width = (2 * ell + 1) as f64;
        for j in 0..self.torus.dim() as usize {
            let stride = self.torus.stride(j);
            for field in fields.iter_mut() {
                let src = field.clone();
                for x in 0..sites {
                    let c = (x / stride) % n;
                    if c != 0 {
                        continue;
                    }
                    // line starting at x along axis j
                    let at = |i: usize| src[x + (i % n) * stride];
                    let mut window: f64 = (0..=2 * ell as usize).map(|i| at(i + n - ell as usize)).sum();
                    for i in 0..n {
                        field[x + i * stride] = window / width;
                        window += at(i + ell as usize + 1) - at(i + n - ell as usize);
                    }
                }
            }
        }
        Ok(fields)
    }
}

fn totals_of(eta: &[Counts]) -> [u64; 2] {
    eta.iter()
        .fold([0u64; 2], |acc, k| [acc[0] + u64::from(k[0]), acc[1] + u64::from(k[1])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbours_wrap_and_coincide_on_two_sites() {
        let t = Torus::new(4, 1).unwrap();
        assert_eq!(t.neighbours(0), vec![1, 3]);
        let t = Torus::new(2, 1).unwrap();
        assert_eq!(t.neighbours(0), vec![1, 1]);
        let t = Torus::new(3, 2).unwrap();
        // site (1,2) = 5: neighbours (2,2), (0,2), (1,0), (1,1)
        assert_eq!(t.neighbours(5), vec![8, 2, 3, 4]);
        for k in 0..4 {
            assert_eq!(t.neighbour(5, k), t.neighbours(5)[k]);
        }
    }

    #[test]
    fn block_average_examples() {
        let t = Torus::new(5, 1).unwrap();
        let c = LatticeConfiguration::from_occupations(t, vec![[1, 0], [0, 0], [2, 0], [0, 0], [0, 0]]).unwrap();
        let avg = c.block_average(1, 2).unwrap();
        assert!((avg[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.block_average(0, 2).unwrap(), [2.0, 0.0]);
        assert!(matches!(c.block_average(3, 0), Err(LatticeError::WindowTooLarge { .. })));
        let flat = LatticeConfiguration::from_occupations(t, vec![[3, 1]; 5]).unwrap();
        assert_eq!(flat.block_average(2, 4).unwrap(), [3.0, 1.0]);
    }

    #[test]
    fn density_field_matches_pointwise_block_average() {
        let t = Torus::new(7, 2).unwrap();
        let eta: Vec<Counts> = (0..49u32).map(|x| [(x * 7 + 3) % 5, (x * x) % 3]).collect();
        let c = LatticeConfiguration::from_occupations(t, eta).unwrap();
        let f = c.empirical_density_field(2).unwrap();
        for x in 0..49 {
            let b = c.block_average(2, x).unwrap();
            assert!((f[0][x] - b[0]).abs() < 1e-12 && (f[1][x] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_site_is_smeared() {
        let t = Torus::new(6, 1).unwrap();
        let mut eta = vec![[0, 0]; 6];
        eta[0] = [3, 0];
        let c = LatticeConfiguration::from_occupations(t, eta).unwrap();
        let f = c.empirical_density_field(1).unwrap();
        assert_eq!(f[0], vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.empirical_density_field(0).unwrap()[0], vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
