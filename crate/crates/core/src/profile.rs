//! Density profiles `ρ(u) = Σ a + b cos(2π k·u) + c sin(2π k·u)` on `T^d`.

use serde::{Deserialize, Serialize};

/// Wave vector: a bare integer means `k e_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WaveVector {
    Axis(i32),
    Full(Vec<i32>),
}

impl Default for WaveVector {
    fn default() -> Self {
        WaveVector::Axis(1)
    }
}

impl WaveVector {
    fn dot(&self, u: &[f64]) -> f64 {
        match self {
            WaveVector::Axis(k) => f64::from(*k) * u.first().copied().unwrap_or(0.0),
            WaveVector::Full(ks) => ks.iter().zip(u).map(|(k, x)| f64::from(*k) * x).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProfileTerm {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub k: WaveVector,
}

impl ProfileTerm {
    pub fn constant(a: f64) -> Self {
        Self {
            a,
            ..Self::default()
        }
    }

    pub fn cosine(a: f64, b: f64, k: i32) -> Self {
        Self {
            a,
            b,
            c: 0.0,
            k: WaveVector::Axis(k),
        }
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * self.k.dot(u);
        self.a + self.b * phase.cos() + self.c * phase.sin()
    }
}

/// Two-species profile; each species is a sum of terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub rho1: Vec<ProfileTerm>,
    pub rho2: Vec<ProfileTerm>,
}

impl Profile {
    pub fn constant(rho: [f64; 2]) -> Self {
        Self {
            rho1: vec![ProfileTerm::constant(rho[0])],
            rho2: vec![ProfileTerm::constant(rho[1])],
        }
    }

    pub fn eval(&self, u: &[f64]) -> [f64; 2] {
        [
            self.rho1.iter().map(|t| t.eval(u)).sum(),
            self.rho2.iter().map(|t| t.eval(u)).sum(),
        ]
    }

    /// Values on the uniform grid `{j/m}^d`, row-major.
    pub fn grid_values(&self, m: usize, d: u32) -> Vec<[f64; 2]> {
        let total = m.pow(d);
        (0..total)
            .map(|x| {
                let mut r = x;
                let mut u = vec![0.0; d as usize];
                for j in (0..d as usize).rev() {
                    u[j] = (r % m) as f64 / m as f64;
                    r /= m;
                }
                self.eval(&u)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scalar_and_vector_wave_numbers() {
        let p: Profile = serde_json::from_str(
            r#"{"rho1":[{"a":0.5,"b":0.2,"k":1}],"rho2":[{"a":0.1},{"c":0.05,"k":[0,2]}]}"#,
        )
        .unwrap();
        let v = p.eval(&[0.0, 0.125]);
        assert!((v[0] - 0.7).abs() < 1e-15);
        assert!((v[1] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn grid_values_are_row_major() {
        let p = Profile {
            rho1: vec![ProfileTerm::cosine(1.0, 1.0, 1)],
            rho2: vec![ProfileTerm::constant(0.0)],
        };
        let g = p.grid_values(4, 1);
        assert!((g[0][0] - 2.0).abs() < 1e-15 && g[2][0].abs() < 1e-15);
    }
}
