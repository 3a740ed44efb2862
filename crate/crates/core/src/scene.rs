//! Synthetic scenes: uniform sensor placement, range-limited observation and
//! sparse outlier injection.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edm::{
    apply_mask, edm_from_coords, CoordinateMatrix, ObservationMask, OutlierMatrix,
    SquaredDistanceMatrix,
};
use crate::error::{Error, Result};
use crate::formats;

const COORD_STREAM: u64 = 0;
const OUTLIER_STREAM: u64 = 1;

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub n: usize,
    pub k: usize,
    /// Radio range `r`, in distance units. A pair is observed iff its
    /// distance is at most `r`.
    pub radio_range: f64,
    pub outlier_ratio: f64,
    /// Upper bound of the uniform outlier distance; `None` means `√k`.
    pub outlier_magnitude_max: Option<f64>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n: 200,
            k: 3,
            radio_range: 1.0,
            outlier_ratio: 0.0,
            outlier_magnitude_max: None,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn magnitude_max(&self) -> f64 {
        self.outlier_magnitude_max
            .unwrap_or_else(|| (self.k as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.n < self.k + 2 {
            return Err(Error::config(
                "n",
                format!("must be at least k + 2 = {}, got {}", self.k + 2, self.n),
            ));
        }
        if self.radio_range.is_nan() || self.radio_range <= 0.0 {
            return Err(Error::config(
                "radio_range",
                format!("must be positive, got {}", self.radio_range),
            ));
        }
        check_ratio(self.outlier_ratio)?;
        let mag = self.magnitude_max();
        if !(mag > 0.0 && mag.is_finite()) {
            return Err(Error::config(
                "outlier_magnitude_max",
                format!("must be positive and finite, got {mag}"),
            ));
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(
            "outlier_ratio",
            format!("must lie in [0, 1), got {ratio}"),
        ));
    }
    Ok(())
}

/// Ground truth plus the contaminated observation derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub x_true: CoordinateMatrix,
    pub d_true: SquaredDistanceMatrix,
    pub mask: ObservationMask,
    pub d_obs: SquaredDistanceMatrix,
    pub l_true: OutlierMatrix,
}

impl Scene {
    /// Deterministically generates a scene from its spec.
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let x_true = generate_coords(spec.n, spec.k, spec.seed);
        let d_true = edm_from_coords(&x_true);
        let mask = observe(&d_true, spec.radio_range)?;
        let (d_obs, l_true) = inject_outliers(
            &d_true,
            &mask,
            spec.outlier_ratio,
            spec.magnitude_max(),
            spec.seed,
        )?;
        Ok(Self {
            spec: spec.clone(),
            x_true,
            d_true,
            mask,
            d_obs,
            l_true,
        })
    }

    pub fn n(&self) -> usize {
        self.x_true.n()
    }

    pub fn k(&self) -> usize {
        self.x_true.k()
    }

    pub fn outlier_count(&self) -> usize {
        self.l_true.nnz() / 2
    }

    /// Checks every structural invariant of a scene.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let violation = |msg: String| Err(Error::InvariantViolation(msg));
        if self.spec.n != n || self.spec.k != self.k() {
            return violation(format!(
                "spec says {}x{}, coordinates are {}x{}",
                self.spec.n,
                self.spec.k,
                n,
                self.k()
            ));
        }
        for (name, dim) in [
            ("d_true", self.d_true.n()),
            ("mask", self.mask.n()),
            ("d_obs", self.d_obs.n()),
            ("l_true", self.l_true.n()),
        ] {
            if dim != n {
                return violation(format!("{name} has dimension {dim}, expected {n}"));
            }
        }
        if !self.mask.is_symmetric() {
            return violation("observation mask is not symmetric".into());
        }
        if !self.mask.includes_diagonal() {
            return violation("observation mask is missing diagonal pairs".into());
        }
        let recomputed = edm_from_coords(&self.x_true);
        let scale = recomputed.as_matrix().amax().max(1.0);
        if (recomputed.as_matrix() - self.d_true.as_matrix()).amax() > 1e-12 * scale {
            return violation("d_true does not match the coordinates".into());
        }
        let l = self.l_true.as_matrix();
        for i in 0..n {
            if l[(i, i)] != 0.0 {
                return violation(format!("l_true has a nonzero diagonal entry at {i}"));
            }
            for j in 0..n {
                let observed = self.mask.contains(i, j);
                let obs = self.d_obs.get(i, j);
                if !observed && obs != 0.0 {
                    return violation(format!("d_obs is nonzero at unobserved pair ({i},{j})"));
                }
                if !observed && l[(i, j)] != 0.0 {
                    return violation(format!("l_true is nonzero at unobserved pair ({i},{j})"));
                }
                if l[(i, j)] != l[(j, i)] {
                    return violation(format!("l_true is not symmetric at ({i},{j})"));
                }
                if observed {
                    let resid = obs - self.d_true.get(i, j) - l[(i, j)];
                    if resid.abs() > 1e-12 * scale {
                        return violation(format!(
                            "observed entry ({i},{j}) does not decompose as d_true + l_true"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_scene(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_scene(path)
    }
}

/// `n × k` coordinates i.i.d. uniform on `[0, 1)`.
pub fn generate_coords(n: usize, k: usize, seed: u64) -> CoordinateMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(COORD_STREAM);
    let data: Vec<f64> = (0..n * k).map(|_| rng.random::<f64>()).collect();
    CoordinateMatrix::new(DMatrix::from_row_slice(n, k, &data))
        .expect("uniform samples are finite and n, k >= 1")
}

/// Range-limited observation: `(i, j)` is observed iff `D[i][j] ≤ r²`.
pub fn observe(d_true: &SquaredDistanceMatrix, radio_range: f64) -> Result<ObservationMask> {
    if radio_range.is_nan() || radio_range <= 0.0 {
        return Err(Error::config(
            "radio_range",
            format!("must be positive, got {radio_range}"),
        ));
    }
    let r2 = radio_range * radio_range;
    Ok(ObservationMask::from_upper_fn(d_true.n(), |i, j| {
        i == j || d_true.get(i, j) <= r2
    }))
}

/// Replaces `round(ratio · m)` of the `m` observed upper-triangle pairs with
/// `u²`, `u ~ Uniform(0, magnitude_max)`, mirrored to keep symmetry.
///
/// Returns the observed matrix (zero outside the mask) and the induced
/// outlier matrix `L = D_obs − D_true` on the corrupted pairs.
pub fn inject_outliers(
    d_true: &SquaredDistanceMatrix,
    mask: &ObservationMask,
    ratio: f64,
    magnitude_max: f64,
    seed: u64,
) -> Result<(SquaredDistanceMatrix, OutlierMatrix)> {
    check_ratio(ratio)?;
    if !(magnitude_max > 0.0 && magnitude_max.is_finite()) {
        return Err(Error::config(
            "outlier_magnitude_max",
            format!("must be positive and finite, got {magnitude_max}"),
        ));
    }
    let n = d_true.n();
    if mask.n() != n {
        return Err(Error::dims("inject_outliers mask", n, mask.n()));
    }
    let mut d_obs = apply_mask(d_true.as_matrix(), mask)?;
    let mut l = DMatrix::zeros(n, n);

    let candidates = mask.upper_offdiag_pairs();
    let count = outlier_count(ratio, candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(OUTLIER_STREAM);
    let mut chosen = index::sample(&mut rng, candidates.len(), count).into_vec();
    chosen.sort_unstable();
    for idx in chosen {
        let (i, j) = candidates[idx];
        let u: f64 = rng.random_range(0.0..magnitude_max);
        let value = u * u;
        d_obs[(i, j)] = value;
        d_obs[(j, i)] = value;
        let diff = value - d_true.get(i, j);
        l[(i, j)] = diff;
        l[(j, i)] = diff;
    }
    Ok((SquaredDistanceMatrix::new(d_obs)?, OutlierMatrix::new(l)?))
}

/// Number of corrupted pairs for a ratio over `observed` candidate pairs.
pub fn outlier_count(ratio: f64, observed: usize) -> usize {
    (ratio * observed as f64).round() as usize
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    formats::write_json(path, &formats::SceneFile::from_scene(scene))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let file: formats::SceneFile = formats::read_json(path)?;
    file.into_scene(path)
}
