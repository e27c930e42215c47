//! Parameter storage and the handful of layers the toy models need.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, GATHER_ZERO};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
    trainable: Vec<bool>,
    decay: Vec<bool>,
}

/// Name-keyed snapshot of a [`ParamSet`], the unit stored in checkpoints.
pub type NamedParams = std::collections::BTreeMap<String, Matrix>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Matrix, decay: bool) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(true);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.add(name, Matrix::from_vec(rows, cols, data), true)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols), false)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn to_named(&self) -> NamedParams {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Overwrites every parameter from `named`; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &NamedParams) -> Result<(), String> {
        if named.len() != self.values.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                named.len()
            ));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = named
                .get(name)
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if src.shape() != value.shape() {
                return Err(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    src.shape(),
                    value.shape()
                ));
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// Flat view `(param, index)` over all scalars, used by gradient checks.
    pub fn scalar_locations(&self) -> Vec<(ParamId, usize)> {
        self.ids()
            .flat_map(|id| (0..self.values[id.0].len()).map(move |k| (id, k)))
            .collect()
    }
}

/// Affine layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// He-style normal init scaled by `gain`.
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = params.add_normal(&format!("{name}.w"), fan_in, fan_out, std, rng);
        let b = params.add_zeros(&format!("{name}.b"), 1, fan_out);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Var {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

/// 3×3 same-padding convolution on a `(n·h·w) × c_in` spatial batch.
#[derive(Clone, Copy, Debug)]
pub struct Conv3x3 {
    pub lin: Linear,
    pub c_in: usize,
}

impl Conv3x3 {
    pub fn new(params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            lin: Linear::new(params, name, 9 * c_in, c_out, gain, rng),
            c_in,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var, n: usize, h: usize, w: usize) -> Var {
        let idx = im2col_index(n, h, w, self.c_in);
        let cols = tape.gather(x, idx, n * h * w, 9 * self.c_in);
        self.lin.forward(tape, params, cols)
    }
}

type IndexKey = (u8, usize, usize, usize, usize);

fn index_cache() -> &'static Mutex<HashMap<IndexKey, Arc<Vec<u32>>>> {
    static CACHE: OnceLock<Mutex<HashMap<IndexKey, Arc<Vec<u32>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached(key: IndexKey, build: impl FnOnce() -> Vec<u32>) -> Arc<Vec<u32>> {
    let mut cache = index_cache().lock().expect("index cache poisoned");
    cache.entry(key).or_insert_with(|| Arc::new(build())).clone()
}

/// Gather index turning a spatial batch into 3×3 patches, column order `(ky, kx, c)`.
pub fn im2col_index(n: usize, h: usize, w: usize, c: usize) -> Arc<Vec<u32>> {
    cached((0, n, h, w, c), || {
        let mut idx = Vec::with_capacity(n * h * w * 9 * c);
        for s in 0..n {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let (yy, xx) = (y + ky, x + kx);
                            let inside = yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize;
                            for ch in 0..c {
                                if inside {
                                    let row = (s * h + yy as usize) * w + xx as usize;
                                    idx.push((row * c + ch) as u32);
                                } else {
                                    idx.push(GATHER_ZERO);
                                }
                            }
                        }
                    }
                }
            }
        }
        idx
    })
}

/// Gather index repeating row `r` of an `n × c` matrix `per` times: output is `(n·per) × c`.
pub fn repeat_rows_index(n: usize, per: usize, c: usize) -> Arc<Vec<u32>> {
    cached((1, n, per, c, 0), || {
        let mut idx = Vec::with_capacity(n * per * c);
        for s in 0..n {
            for _ in 0..per {
                for ch in 0..c {
                    idx.push((s * c + ch) as u32);
                }
            }
        }
        idx
    })
}

/// Gather index tiling an `per × c` matrix `n` times: output is `(n·per) × c`.
pub fn tile_rows_index(n: usize, per: usize, c: usize) -> Arc<Vec<u32>> {
    cached((2, n, per, c, 0), || {
        let mut idx = Vec::with_capacity(n * per * c);
        for _ in 0..n {
            for k in 0..per * c {
                idx.push(k as u32);
            }
        }
        idx
    })
}

/// Gather index for arbitrary row selection: output row `i` copies row `rows[i]`.
pub fn select_rows_index(rows: &[usize], c: usize) -> Arc<Vec<u32>> {
    let mut idx = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        for ch in 0..c {
            idx.push((r * c + ch) as u32);
        }
    }
    Arc::new(idx)
}

/// Fixed sinusoidal features of a scalar, `dim` wide.
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (1000f64).powf(-(k as f64) / half.max(1) as f64);
        out.push((value * freq * 2.0 * std::f64::consts::PI).sin());
    }
    for k in 0..dim - half {
        let freq = (1000f64).powf(-(k as f64) / half.max(1) as f64);
        out.push((value * freq * 2.0 * std::f64::consts::PI).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_center_tap_is_identity() {
        let (n, h, w, c) = (2, 3, 4, 2);
        let idx = im2col_index(n, h, w, c);
        for row in 0..n * h * w {
            for ch in 0..c {
                // center tap is (ky=0,kx=0) -> position 4
                assert_eq!(idx[row * 9 * c + 4 * c + ch], (row * c + ch) as u32);
            }
        }
        // top-left pixel has zero-padded upper-left neighbour
        assert_eq!(idx[0], GATHER_ZERO);
    }

    #[test]
    fn named_round_trip() {
        let mut p = ParamSet::new();
        p.add("a", Matrix::filled(2, 2, 1.5), true);
        let named = p.to_named();
        let mut q = ParamSet::new();
        q.add("a", Matrix::zeros(2, 2), true);
        q.load_named(&named).unwrap();
        assert_eq!(p, q);
        let mut r = ParamSet::new();
        r.add("a", Matrix::zeros(1, 2), true);
        assert!(r.load_named(&named).is_err());
    }
}
